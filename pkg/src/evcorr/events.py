"""Event stream ingestion and voxelization.

An event stream is a time-sorted sequence of (t, x, y, p) records over a
window [t_start, t_end] on a fixed sensor. Streams are stored columnar
(one array per field) for fast voxelization; `Event` is the per-record
view. Voxelization accumulates per-event mass into B temporal bins with
bilinear weights, so the grid conserves event count for events that land
strictly inside the bin range.

Two file formats round-trip losslessly:

- text: header ``# evt v1 <width> <height> <t_start_us> <t_end_us>``,
  then one ``<t_us> <x> <y> <p>`` line per event (p in {-1, 0, 1}; 0
  normalizes to -1).
- binary: magic ``EVT1``, little-endian u32 width, u32 height,
  u64 t_start, u64 t_end, u64 count, then (u64 t, u16 x, u16 y, i8 p)
  records.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

TEXT_HEADER_TAG = "# evt v1"
BINARY_MAGIC = b"EVT1"
DEFAULT_BINS = 5


class EventParseError(ValueError):
    """Malformed event file content; carries the offending line or byte offset."""


class EventBoundsError(ValueError):
    """Event coordinates or timestamps violate the stream's declared bounds."""


@dataclass(frozen=True)
class Event:
    t: int
    x: int
    y: int
    p: int


@dataclass
class EventStream:
    """Columnar store of events sorted non-decreasing by timestamp."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    width: int
    height: int
    t_start: int
    t_end: int
    was_unsorted: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        self.t = np.asarray(self.t, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.int32)
        self.y = np.asarray(self.y, dtype=np.int32)
        self.p = np.asarray(self.p, dtype=np.int8)
        if not (len(self.t) == len(self.x) == len(self.y) == len(self.p)):
            raise ValueError("field arrays must have equal length")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"sensor must be positive-sized, got {self.width}x{self.height}")
        if len(self.t) and np.any(np.diff(self.t) < 0):
            order = np.argsort(self.t, kind="stable")
            self.t = self.t[order]
            self.x = self.x[order]
            self.y = self.y[order]
            self.p = self.p[order]
            self.was_unsorted = True
        self._check_bounds()

    def _check_bounds(self) -> None:
        if len(self.t) == 0:
            return
        if self.t[0] < self.t_start or self.t[-1] > self.t_end:
            raise EventBoundsError(
                f"timestamps [{self.t[0]}, {self.t[-1]}] leave window [{self.t_start}, {self.t_end}]")
        if np.any((self.x < 0) | (self.x >= self.width) | (self.y < 0) | (self.y >= self.height)):
            i = int(np.argmax((self.x < 0) | (self.x >= self.width) | (self.y < 0) | (self.y >= self.height)))
            raise EventBoundsError(
                f"event {i} at ({self.x[i]}, {self.y[i]}) outside {self.width}x{self.height} sensor")
        if not np.all(np.abs(self.p) == 1):
            raise ValueError("polarity must be exactly +1 or -1 after normalization")

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))


@dataclass
class VoxelGrid:
    """H x W x B accumulation of event mass with bilinear temporal weighting."""

    data: np.ndarray

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise ValueError(f"voxel grid must be HxWxB, got shape {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bins(self) -> int:
        return self.data.shape[2]


def _normalize_polarity(p: int) -> int:
    # the on-disk formats admit 0 as an alias for -1
    if p == 0:
        return -1
    if p in (-1, 1):
        return p
    raise EventParseError(f"polarity must be -1, 0 or +1, got {p}")


def parse_events(data: bytes, format: str | None = None) -> EventStream:
    """Parse raw text or binary event file content.

    format is "text", "binary", or None to sniff from the leading bytes.
    """
    if format is None:
        if data[:4] == BINARY_MAGIC:
            format = "binary"
        elif data[:1] == b"#":
            format = "text"
        else:
            raise EventParseError("cannot sniff format: no EVT1 magic and no '#' header")
    if format == "text":
        return _parse_text(data)
    if format == "binary":
        return _parse_binary(data)
    raise ValueError(f"unknown format {format!r}")


def _parse_text(data: bytes) -> EventStream:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise EventParseError(f"not valid UTF-8: {e}") from e
    lines = text.splitlines()
    if not lines or not lines[0].startswith(TEXT_HEADER_TAG):
        raise EventParseError(f"line 1: expected header '{TEXT_HEADER_TAG} ...'")
    head = lines[0].split()
    if len(head) != 7:
        raise EventParseError(f"line 1: header needs 4 fields after '{TEXT_HEADER_TAG}'")
    try:
        width, height, t_start, t_end = (int(v) for v in head[3:])
    except ValueError as e:
        raise EventParseError(f"line 1: non-integer header field: {e}") from e

    ts, xs, ys, ps = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise EventParseError(f"line {lineno}: expected 4 fields, got {len(parts)}")
        try:
            t, x, y, p = (int(v) for v in parts)
        except ValueError as e:
            raise EventParseError(f"line {lineno}: non-integer field: {e}") from e
        ts.append(t)
        xs.append(x)
        ys.append(y)
        ps.append(_normalize_polarity(p))
    return EventStream(np.array(ts, dtype=np.int64), np.array(xs, dtype=np.int32),
                       np.array(ys, dtype=np.int32), np.array(ps, dtype=np.int8),
                       width, height, t_start, t_end)


def _parse_binary(data: bytes) -> EventStream:
    if data[:4] != BINARY_MAGIC:
        raise EventParseError(f"bad magic {data[:4]!r}, expected {BINARY_MAGIC!r}")
    if len(data) < 32:
        raise EventParseError(f"truncated header at offset {len(data)}")
    width, height = struct.unpack_from("<II", data, 4)
    t_start, t_end, count = struct.unpack_from("<QQQ", data, 12)
    rec = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])
    expected = 36 + rec.itemsize * count
    if len(data) != expected:
        raise EventParseError(f"expected {expected} bytes for {count} records, got {len(data)}")
    raw = np.frombuffer(data, dtype=rec, count=count, offset=36)
    p = raw["p"].astype(np.int8)
    p[p == 0] = -1
    if not np.all(np.abs(p) == 1):
        bad = int(np.argmax(np.abs(p) != 1))
        raise EventParseError(f"record {bad}: polarity must be -1, 0 or +1")
    return EventStream(raw["t"].astype(np.int64), raw["x"].astype(np.int32),
                       raw["y"].astype(np.int32), p, int(width), int(height),
                       int(t_start), int(t_end))


def write_events(stream: EventStream, format: str = "text") -> bytes:
    if format == "text":
        out = [f"{TEXT_HEADER_TAG} {stream.width} {stream.height} {stream.t_start} {stream.t_end}"]
        for i in range(len(stream)):
            out.append(f"{stream.t[i]} {stream.x[i]} {stream.y[i]} {stream.p[i]}")
        return ("\n".join(out) + "\n").encode("utf-8")
    if format == "binary":
        head = BINARY_MAGIC + struct.pack("<II", stream.width, stream.height)
        head += struct.pack("<QQQ", stream.t_start, stream.t_end, len(stream))
        rec = np.empty(len(stream), dtype=np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")]))
        rec["t"] = stream.t
        rec["x"] = stream.x
        rec["y"] = stream.y
        rec["p"] = stream.p
        return head + rec.tobytes()
    raise ValueError(f"unknown format {format!r}")


def normalize_timestamps(stream: EventStream, bins: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Map timestamps linearly from [t_start, t_end] to bin-index units [0, bins-1].

    Returns (x, y, t_norm, weight) column arrays, weight being |p| = 1.
    """
    if bins < 2:
        raise ValueError(f"need at least 2 bins, got {bins}")
    if stream.t_end <= stream.t_start:
        raise ValueError(f"empty window: t_end {stream.t_end} <= t_start {stream.t_start}")
    span = float(stream.t_end - stream.t_start)
    t_norm = (stream.t - stream.t_start).astype(np.float64) / span * (bins - 1)
    return stream.x, stream.y, t_norm, np.abs(stream.p).astype(np.float64)


def build_voxel_grid(stream: EventStream, bins: int = DEFAULT_BINS) -> VoxelGrid:
    """Accumulate events into an H x W x bins grid with bilinear temporal weights.

    Each event splits its unit mass between the two integer bins bracketing
    its normalized time; an event exactly on an integer bin deposits there
    in full. Accumulation runs in double precision, stored as float32.
    """
    x, y, t_norm, w = normalize_timestamps(stream, bins)
    grid = np.zeros((stream.height, stream.width, bins), dtype=np.float64)
    b0 = np.floor(t_norm).astype(np.intp)
    b0 = np.minimum(b0, bins - 1)
    frac = t_norm - b0
    np.add.at(grid, (y, x, b0), w * (1.0 - frac))
    hi = b0 + 1
    in_range = hi <= bins - 1
    np.add.at(grid, (y[in_range], x[in_range], hi[in_range]), (w * frac)[in_range])
    return VoxelGrid(grid.astype(np.float32))


def voxel_mass(v: VoxelGrid) -> float:
    return float(v.data.astype(np.float64).sum())

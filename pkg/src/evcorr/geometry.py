"""Pinhole stereo geometry and a synthetic event-scene generator.

The geometric identities link scene motion to image motion: a point
(X, Y, Z) with velocity (dX, dY, dZ) projects to f'(X, Y)/Z + c and
moves on the image plane at f'(dX, dY)/Z - f'(X, Y) dZ/Z^2. In a
rectified stereo rig with baseline B the vertical displacement is
identical in both views and the horizontal displacement difference
equals the disparity change, first-order in dZ tau / Z.

The generator emits event streams for a textured point set - a stereo
pair over a short window tau plus the left camera again after dt - with
the analytic flow and disparity fields as ground truth. One seed fixes
all randomness; per-point generators are derived from (seed, point
index) so event synthesis is order-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .events import EventStream
from .kernels import ShapeError, bilinear_sample
from .matching import DISPARITY, FLOW, DisplacementField

MICROS = 1_000_000


class BehindCameraError(ValueError):
    """Point at or behind the camera plane (Z <= 0)."""


class SceneError(ValueError):
    """Scene description file is malformed or inconsistent."""


@dataclass(frozen=True)
class CameraRig:
    """Rectified stereo rig: scaled focal length, baseline, sensor size."""

    f_prime: float
    baseline: float
    width: int
    height: int
    cx: float = 0.0
    cy: float = 0.0

    def __post_init__(self) -> None:
        if self.f_prime <= 0:
            raise ValueError(f"f_prime must be positive, got {self.f_prime}")
        if self.baseline < 0:
            raise ValueError(f"baseline must be non-negative, got {self.baseline}")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside image")

    @classmethod
    def centered(cls, f_prime: float, baseline: float, width: int, height: int) -> "CameraRig":
        return cls(f_prime, baseline, width, height, width / 2.0, height / 2.0)


@dataclass(frozen=True)
class ScenePoint:
    """3-D point in the left-camera frame with constant velocity."""

    position: tuple[float, float, float]
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def at(self, t: float) -> "ScenePoint":
        px, py, pz = self.position
        vx, vy, vz = self.velocity
        return ScenePoint((px + vx * t, py + vy * t, pz + vz * t), self.velocity)


@dataclass(frozen=True)
class TexturedPoint:
    point: ScenePoint
    rate: float  # events per unit time


@dataclass
class SyntheticScene:
    rig: CameraRig
    points: list[TexturedPoint]
    tau: float   # stereo accumulation window, scene time units
    dt: float    # flow interval
    seed: int = 0

    def __post_init__(self) -> None:
        if self.tau <= 0 or self.dt <= 0:
            raise ValueError(f"tau and dt must be positive, got {self.tau}, {self.dt}")


def project(p: ScenePoint, rig: CameraRig, view: str = "left") -> tuple[float, float]:
    """Pixel coordinates of a point; right view shifts X by the baseline."""
    x, y, z = p.position
    if z <= 0:
        raise BehindCameraError(f"Z must be positive, got {z}")
    if view == "right":
        x = x - rig.baseline
    return (rig.f_prime * x / z + rig.cx, rig.f_prime * y / z + rig.cy)


def flow_from_motion(p: ScenePoint, rig: CameraRig) -> tuple[float, float]:
    """Instantaneous image velocity of a moving point (pixels per unit time)."""
    x, y, z = p.position
    vx, vy, vz = p.velocity
    if z <= 0:
        raise BehindCameraError(f"Z must be positive, got {z}")
    u = rig.f_prime * vx / z - rig.f_prime * x * vz / (z * z)
    v = rig.f_prime * vy / z - rig.f_prime * y * vz / (z * z)
    return (u, v)


def disparity_from_depth(z: float, rig: CameraRig) -> float:
    if z <= 0:
        raise BehindCameraError(f"Z must be positive, got {z}")
    return rig.f_prime * rig.baseline / z


def stereo_flow_pair(p: ScenePoint, rig: CameraRig) -> tuple[tuple[float, float], tuple[float, float]]:
    """Per-unit-time image displacement of the point in the left and right views.

    Guarantees the vertical components agree exactly and the horizontal
    difference equals f' * baseline * dZ / Z^2.
    """
    x, y, z = p.position
    vx, vy, vz = p.velocity
    if z <= 0:
        raise BehindCameraError(f"Z must be positive, got {z}")
    f = rig.f_prime
    dx_l = f * vx / z - f * vz / (z * z) * x
    dy_l = f * vy / z - f * vz / (z * z) * y
    dx_r = f * vx / z - f * vz / (z * z) * (x - rig.baseline)
    dy_r = f * vy / z - f * vz / (z * z) * y
    return ((dx_l, dy_l), (dx_r, dy_r))


def disparity_rate_identity(p: ScenePoint, rig: CameraRig, tau: float = 1.0) -> tuple[float, float]:
    """Both sides of the disparity-rate identity over a step of length tau.

    lhs is the linearized horizontal displacement difference
    (dxR - dxL) * tau, rhs the exact disparity change D(t) - D(t + tau)
    computed from the depths. They agree to first order in dZ tau / Z.
    """
    (dx_l, _), (dx_r, _) = stereo_flow_pair(p, rig)
    lhs = (dx_r - dx_l) * tau
    z0 = p.position[2]
    z1 = p.at(tau).position[2]
    if z1 <= 0:
        raise BehindCameraError(f"depth becomes non-positive after step: {z1}")
    rhs = disparity_from_depth(z0, rig) - disparity_from_depth(z1, rig)
    return (lhs, rhs)


def eval_matching_cost(f1: np.ndarray, f2: np.ndarray, disp: DisplacementField,
                       mode: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel squared feature residual of a candidate displacement.

    Flow samples f2 at p + D, disparity at (x - D, y) along the scanline.
    Returns (residual, valid); out-of-bounds samples are invalid.
    """
    if f1.shape != f2.shape:
        raise ShapeError(f"feature shapes differ: {f1.shape} vs {f2.shape}")
    mode = mode or disp.mode
    h, w = f1.shape[:2]
    if disp.shape != (h, w):
        raise ShapeError(f"displacement grid {disp.shape} does not match features {(h, w)}")
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    if mode == FLOW:
        coords = np.stack([xs + disp.data[..., 0], ys + disp.data[..., 1]], axis=-1)
    elif mode == DISPARITY:
        coords = np.stack([xs - disp.data, ys], axis=-1)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    sampled, valid = bilinear_sample(f2, coords)
    residual = ((f1 - sampled) ** 2).sum(axis=-1)
    residual[~valid] = 0.0
    return residual, valid


@dataclass
class RenderResult:
    left_t: EventStream
    left_t2: EventStream
    right_t: EventStream
    gt_flow: DisplacementField       # full-res pixels, displacement over dt
    gt_disparity: DisplacementField  # full-res pixels at time t
    dropped_events: int = 0


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def _visible(p: ScenePoint, rig: CameraRig, times: tuple[float, ...]) -> bool:
    for t in times:
        q = p.at(t)
        if q.position[2] <= 0:
            return False
        for view in ("left", "right"):
            x, y = project(q, rig, view)
            if not (0 <= x < rig.width and 0 <= y < rig.height):
                return False
    return True


def render_synthetic(scene: SyntheticScene, seed: int) -> RenderResult:
    """Emit the three event streams and analytic ground-truth fields.

    Event times are stratified-jittered within the window; the same
    per-point jitter is reused in every stream, which realizes the
    event-distribution constancy that makes the streams matchable.
    Ground truth is deposited at each point's pixel at window start;
    events that land outside the sensor are dropped and counted.
    """
    rig = scene.rig
    h, w = rig.height, rig.width
    gt_flow_sum = np.zeros((h, w, 2), dtype=np.float64)
    gt_disp_sum = np.zeros((h, w), dtype=np.float64)
    gt_count = np.zeros((h, w), dtype=np.int64)

    windows = {"left_t": ("left", 0.0), "left_t2": ("left", scene.dt), "right_t": ("right", 0.0)}
    raw: dict[str, list[tuple[int, int, int, int]]] = {k: [] for k in windows}
    dropped = 0

    for idx, tp in enumerate(scene.points):
        p0 = tp.point
        x0, y0 = project(p0, rig, "left")
        px, py = _round_half_up(x0), _round_half_up(y0)
        if 0 <= px < w and 0 <= py < h:
            x1, y1 = project(p0.at(scene.dt), rig, "left")
            gt_flow_sum[py, px, 0] += x1 - x0
            gt_flow_sum[py, px, 1] += y1 - y0
            gt_disp_sum[py, px] += disparity_from_depth(p0.position[2], rig)
            gt_count[py, px] += 1

        n_events = max(1, int(round(tp.rate * scene.tau)))
        rng = np.random.default_rng([seed, idx])
        jitter = rng.random(n_events)
        pols = rng.integers(0, 2, n_events) * 2 - 1
        rel_times = (np.arange(n_events) + jitter) / n_events * scene.tau

        for name, (view, t_base) in windows.items():
            for s_rel, pol in zip(rel_times, pols):
                q = p0.at(t_base + s_rel)
                if q.position[2] <= 0:
                    dropped += 1
                    continue
                ex, ey = project(q, rig, view)
                exi, eyi = _round_half_up(ex), _round_half_up(ey)
                if not (0 <= exi < w and 0 <= eyi < h):
                    dropped += 1
                    continue
                t_us = int(math.floor((t_base + s_rel) * MICROS))
                raw[name].append((t_us, exi, eyi, int(pol)))

    streams = {}
    for name, (view, t_base) in windows.items():
        recs = raw[name]
        t_start = int(round(t_base * MICROS))
        t_end = int(round((t_base + scene.tau) * MICROS))
        if recs:
            arr = np.array(recs, dtype=np.int64)
            arr = arr[np.argsort(arr[:, 0], kind="stable")]
            t, x, y, p = arr.T
            t = np.clip(t, t_start, t_end)
        else:
            t = x = y = p = np.array([], dtype=np.int64)
        streams[name] = EventStream(t, x, y, p, w, h, t_start, t_end)

    valid = gt_count > 0
    counts = np.maximum(gt_count, 1)
    gt_flow = (gt_flow_sum / counts[..., None]).astype(np.float32)
    gt_disp = (gt_disp_sum / counts).astype(np.float32)
    return RenderResult(
        streams["left_t"], streams["left_t2"], streams["right_t"],
        DisplacementField(gt_flow, FLOW, valid=valid.copy()),
        DisplacementField(gt_disp, DISPARITY, valid=valid.copy()),
        dropped_events=dropped,
    )


def _parse_kv_tokens(tokens: list[str], lineno: int) -> dict[str, str]:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise SceneError(f"line {lineno}: expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        out[k] = v
    return out


def _floats(s: str, n: int, lineno: int) -> tuple[float, ...]:
    parts = s.split(",")
    if len(parts) != n:
        raise SceneError(f"line {lineno}: expected {n} comma-separated values, got {s!r}")
    return tuple(float(v) for v in parts)


def parse_scene(text: str) -> SyntheticScene:
    """Build a scene from the key-value description format.

    Scalar lines: f_prime, baseline, width, height, tau, dt, seed, cx, cy.
    Primitive lines:
      plane depth=Z vel=vx,vy,vz density=points_per_pixel rate=events_per_unit_time
      points count=N depth=zmin,zmax vel=vx,vy,vz rate=R
    Points that would leave either view during [0, dt + tau] are culled
    at construction so the scene satisfies its visibility invariant.
    """
    scalars: dict[str, float] = {}
    primitives: list[tuple[int, str, dict[str, str]]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        key = tokens[0]
        if key in ("plane", "points"):
            primitives.append((lineno, key, _parse_kv_tokens(tokens[1:], lineno)))
        elif len(tokens) == 2:
            try:
                scalars[key] = float(tokens[1])
            except ValueError as e:
                raise SceneError(f"line {lineno}: bad number {tokens[1]!r}") from e
        else:
            raise SceneError(f"line {lineno}: unrecognized directive {key!r}")

    for req in ("f_prime", "baseline", "width", "height", "tau", "dt"):
        if req not in scalars:
            raise SceneError(f"missing required scalar '{req}'")
    width, height = int(scalars["width"]), int(scalars["height"])
    cx = scalars.get("cx", width / 2.0)
    cy = scalars.get("cy", height / 2.0)
    rig = CameraRig(scalars["f_prime"], scalars["baseline"], width, height, cx, cy)
    tau, dt = scalars["tau"], scalars["dt"]
    seed = int(scalars.get("seed", 0))
    rng = np.random.default_rng(seed)

    check_times = (0.0, tau, dt, dt + tau)
    points: list[TexturedPoint] = []
    for lineno, kind, kv in primitives:
        try:
            if kind == "plane":
                depth = float(kv["depth"])
                vel = _floats(kv["vel"], 3, lineno)
                density = float(kv["density"])
                rate = float(kv.get("rate", "100"))
                count = int(round(density * width * height))
                depths_lo = depths_hi = depth
            else:
                count = int(kv["count"])
                depths_lo, depths_hi = _floats(kv["depth"], 2, lineno)
                vel = _floats(kv["vel"], 3, lineno)
                rate = float(kv.get("rate", "100"))
        except KeyError as e:
            raise SceneError(f"line {lineno}: missing field {e}") from e
        for _ in range(count):
            px = rng.uniform(0, width)
            py = rng.uniform(0, height)
            z = rng.uniform(depths_lo, depths_hi) if depths_hi > depths_lo else depths_lo
            pos = ((px - rig.cx) * z / rig.f_prime, (py - rig.cy) * z / rig.f_prime, z)
            sp = ScenePoint(pos, vel)
            if _visible(sp, rig, check_times):
                points.append(TexturedPoint(sp, rate))
    return SyntheticScene(rig, points, tau, dt, seed)

"""Multi-scale feature extraction and model weight management.

The trunk is a small residual CNN applied identically to both inputs of
a pair (weight sharing is the caller's contract: one ModelWeights
instance). A 7x7 stride-2 stem and a stride-2 residual stage bring the
map to 1/4 resolution; a single shared output convolution run at stride
1, 2 or 4 produces the 1/4, 1/8 and 1/16 feature maps from the same
trunk activations. Instance normalization follows every convolution
stage. The exact depth/width here is a stand-in: the reference
architecture is named but not sized by its description, so this is the
smallest trunk realizing the multi-scale weight-sharing scheme.

Weights live in a flat name -> tensor archive (magic EMWT) with
fan-in-scaled He initialization; the residual-update output head is
zero-initialized so an untrained model refines as the identity.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .events import VoxelGrid
from .kernels import ShapeError, conv2d, instance_norm, relu

WEIGHTS_MAGIC = b"EMWT"
WEIGHTS_VERSION = 1
VALID_SCALES = (4, 8, 16)


class WeightsFormatError(ValueError):
    """Corrupt or mismatching weights archive."""


@dataclass
class FeatureMap:
    """Dense H' x W' x d features at a pyramid scale (downsample factor)."""

    data: np.ndarray
    scale: int

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise ShapeError(f"feature map must be 3-d, got {self.data.shape}")
        if self.scale not in VALID_SCALES:
            raise ValueError(f"scale must be one of {VALID_SCALES}, got {self.scale}")

    @property
    def dim(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class ModelConfig:
    """Shapes of every learnable tensor in the model."""

    bins: int = 5
    dim: int = 128
    stem_channels: int = 64
    mid_channels: int = 96
    blocks: int = 6
    ffn_expansion: int = 4
    gru_hidden: int = 96
    context_dim: int = 64
    lookup_radius: int = 3

    def __post_init__(self) -> None:
        if self.dim % 2 != 0:
            raise ValueError(f"feature dim must be even, got {self.dim}")


@dataclass
class ModelWeights:
    tensors: dict[str, np.ndarray]
    version: int = WEIGHTS_VERSION
    seed: int | None = None

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.tensors[name]
        except KeyError:
            raise WeightsFormatError(f"missing weight tensor {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.tensors


def _attention_spec(prefix: str, d: int, out: dict[str, tuple[int, ...]]) -> None:
    for proj in ("wq", "wk", "wv", "wo"):
        out[f"{prefix}.{proj}"] = (d, d)
    for b in ("bq", "bk", "bv", "bo"):
        out[f"{prefix}.{b}"] = (d,)


def weight_spec(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Exact name -> shape map of the configured architecture."""
    b, d = config.bins, config.dim
    st, mid = config.stem_channels, config.mid_channels
    spec: dict[str, tuple[int, ...]] = {
        "trunk.stem.w": (7, 7, b, st), "trunk.stem.b": (st,),
        "trunk.stem.norm.g": (st,), "trunk.stem.norm.b": (st,),
        "trunk.out.w": (3, 3, mid, d), "trunk.out.b": (d,),
    }
    for name, cin, cout, has_skip in (("block1", st, mid, True), ("block2", mid, mid, False)):
        p = f"trunk.{name}"
        spec[f"{p}.conv1.w"] = (3, 3, cin, cout)
        spec[f"{p}.conv1.b"] = (cout,)
        spec[f"{p}.norm1.g"] = (cout,)
        spec[f"{p}.norm1.b"] = (cout,)
        spec[f"{p}.conv2.w"] = (3, 3, cout, cout)
        spec[f"{p}.conv2.b"] = (cout,)
        spec[f"{p}.norm2.g"] = (cout,)
        spec[f"{p}.norm2.b"] = (cout,)
        if has_skip:
            spec[f"{p}.skip.w"] = (1, 1, cin, cout)
            spec[f"{p}.skip.b"] = (cout,)
    for i in range(config.blocks):
        p = f"enh.block{i}"
        spec[f"{p}.self.norm.g"] = (d,)
        spec[f"{p}.self.norm.b"] = (d,)
        _attention_spec(f"{p}.self", d, spec)
        spec[f"{p}.cross.norm_q.g"] = (d,)
        spec[f"{p}.cross.norm_q.b"] = (d,)
        spec[f"{p}.cross.norm_kv.g"] = (d,)
        spec[f"{p}.cross.norm_kv.b"] = (d,)
        _attention_spec(f"{p}.cross", d, spec)
        spec[f"{p}.ffn.norm.g"] = (d,)
        spec[f"{p}.ffn.norm.b"] = (d,)
        spec[f"{p}.ffn.w1"] = (d, config.ffn_expansion * d)
        spec[f"{p}.ffn.b1"] = (config.ffn_expansion * d,)
        spec[f"{p}.ffn.w2"] = (config.ffn_expansion * d, d)
        spec[f"{p}.ffn.b2"] = (d,)
    side = 2 * config.lookup_radius + 1
    hid, ctx = config.gru_hidden, config.context_dim
    for task, cost_ch, field_ch in (("flow", side * side, 2), ("disp", side, 1)):
        p = f"gru.{task}"
        x_ch = cost_ch + field_ch + ctx
        spec[f"{p}.context.w"] = (1, 1, d, ctx)
        spec[f"{p}.context.b"] = (ctx,)
        spec[f"{p}.hidden.w"] = (1, 1, d, hid)
        spec[f"{p}.hidden.b"] = (hid,)
        for gate in ("wz", "wr", "wq"):
            spec[f"{p}.{gate}"] = (3, 3, hid + x_ch, hid)
            spec[f"{p}.{gate[1]}b"] = (hid,)
        spec[f"{p}.head1.w"] = (3, 3, hid, hid // 2)
        spec[f"{p}.head1.b"] = (hid // 2,)
        spec[f"{p}.head2.w"] = (3, 3, hid // 2, field_ch)
        spec[f"{p}.head2.b"] = (field_ch,)
    return spec


def _init_tensor(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if name.endswith((".b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2", ".zb", ".rb", ".qb")):
        return np.zeros(shape, dtype=np.float32)
    if ".norm" in name:
        fill = 1.0 if name.endswith(".g") else 0.0
        return np.full(shape, fill, dtype=np.float32)
    if name.endswith("head2.w"):
        # zero residual head: untrained refinement is the identity
        return np.zeros(shape, dtype=np.float32)
    fan_in = int(np.prod(shape[:-1]))
    std = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(np.float32)


def init_weights(seed: int, config: ModelConfig = ModelConfig()) -> ModelWeights:
    """Seed-deterministic fan-in-scaled initialization of every tensor."""
    rng = np.random.default_rng(seed)
    spec = weight_spec(config)
    tensors = {name: _init_tensor(name, spec[name], rng) for name in sorted(spec)}
    return ModelWeights(tensors, seed=seed)


def validate_weights(w: ModelWeights, config: ModelConfig) -> None:
    """Check the archive holds exactly the configured tensors, no extras."""
    spec = weight_spec(config)
    missing = sorted(set(spec) - set(w.tensors))
    extra = sorted(set(w.tensors) - set(spec))
    if missing:
        raise WeightsFormatError(f"missing tensors: {', '.join(missing[:5])}")
    if extra:
        raise WeightsFormatError(f"unexpected tensors: {', '.join(extra[:5])}")
    for name, shape in spec.items():
        if w.tensors[name].shape != shape:
            raise WeightsFormatError(
                f"{name}: expected shape {shape}, got {w.tensors[name].shape}")


def save_weights(w: ModelWeights) -> bytes:
    out = [WEIGHTS_MAGIC, struct.pack("<II", w.version, len(w.tensors))]
    for name in sorted(w.tensors):
        t = np.ascontiguousarray(w.tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<I", t.ndim))
        out.append(struct.pack(f"<{t.ndim}I", *t.shape))
        out.append(t.tobytes())
    return b"".join(out)


def load_weights(data: bytes) -> ModelWeights:
    if data[:4] != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"bad magic {data[:4]!r}")
    if len(data) < 12:
        raise WeightsFormatError("truncated header")
    version, count = struct.unpack_from("<II", data, 4)
    pos = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            n = int(np.prod(dims))
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos)
            pos += 4 * n
            tensors[name] = arr.reshape(dims).copy()
        except (struct.error, ValueError) as e:
            raise WeightsFormatError(f"corrupt archive near byte {pos}: {e}") from e
    if pos != len(data):
        raise WeightsFormatError(f"{len(data) - pos} trailing bytes after {count} entries")
    return ModelWeights(tensors, version=version)


def _res_block(x: np.ndarray, w: ModelWeights, prefix: str, stride: int) -> np.ndarray:
    y = conv2d(x, w[f"{prefix}.conv1.w"], stride=stride, padding=1, bias=w[f"{prefix}.conv1.b"])
    y = instance_norm(y, w[f"{prefix}.norm1.g"], w[f"{prefix}.norm1.b"])
    y = relu(y)
    y = conv2d(y, w[f"{prefix}.conv2.w"], stride=1, padding=1, bias=w[f"{prefix}.conv2.b"])
    y = instance_norm(y, w[f"{prefix}.norm2.g"], w[f"{prefix}.norm2.b"])
    if f"{prefix}.skip.w" in w:
        skip = conv2d(x, w[f"{prefix}.skip.w"], stride=stride, padding=0, bias=w[f"{prefix}.skip.b"])
    else:
        skip = x
    return relu(y + skip)


def extract_features(v: VoxelGrid, w: ModelWeights,
                     scales: tuple[int, ...] = (8,)) -> dict[int, FeatureMap]:
    """Run the shared trunk once and emit the requested pyramid scales."""
    bad = [s for s in scales if s not in VALID_SCALES]
    if bad:
        raise ValueError(f"unsupported scales {bad}; valid: {VALID_SCALES}")
    if v.bins != w["trunk.stem.w"].shape[2]:
        raise ShapeError(
            f"voxel has {v.bins} bins but stem expects {w['trunk.stem.w'].shape[2]}")
    x = v.data.astype(np.float32)
    t = conv2d(x, w["trunk.stem.w"], stride=2, padding=3, bias=w["trunk.stem.b"])
    t = relu(instance_norm(t, w["trunk.stem.norm.g"], w["trunk.stem.norm.b"]))
    t = _res_block(t, w, "trunk.block1", stride=2)
    t = _res_block(t, w, "trunk.block2", stride=1)
    out = {}
    for s in sorted(set(scales)):
        f = conv2d(t, w["trunk.out.w"], stride=s // 4, padding=1, bias=w["trunk.out.b"])
        want = (math.ceil(v.height / s), math.ceil(v.width / s))
        if f.shape[:2] != want:
            raise ShapeError(f"scale {s}: got extent {f.shape[:2]}, expected {want}")
        out[s] = FeatureMap(f, scale=s)
    return out


def positional_encoding(h: int, w: int, d: int, dtype=np.float32) -> np.ndarray:
    """Fixed 2-D sinusoid: first d/2 channels encode x, the rest y."""
    if d % 2 != 0:
        raise ValueError(f"feature dim must be even, got {d}")
    half = d // 2
    enc = np.zeros((h, w, d), dtype=np.float64)
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    for c in range(half):
        freq = 1.0 / (10000.0 ** ((c // 2 * 2) / half))
        wave_x = np.sin(xs * freq) if c % 2 == 0 else np.cos(xs * freq)
        wave_y = np.sin(ys * freq) if c % 2 == 0 else np.cos(ys * freq)
        enc[:, :, c] = wave_x[None, :]
        enc[:, :, half + c] = wave_y[:, None]
    return enc.astype(dtype)


def add_positional_encoding(f: FeatureMap) -> FeatureMap:
    h, w, d = f.data.shape
    return FeatureMap(f.data + positional_encoding(h, w, d, f.data.dtype), f.scale)

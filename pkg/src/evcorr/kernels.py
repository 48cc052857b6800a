"""Minimal dense-tensor kernels on numpy arrays.

Arrays are row-major, channel-last, float32 for storage; passing float64
inputs selects the double-precision reference path (used by gradient
checks). All kernels are pure and deterministic for a fixed BLAS setup.
"""

from __future__ import annotations

import struct

import numpy as np

TNSR_MAGIC = b"TNSR"
DTYPE_F32 = 0
MAX_NDIM = 4


class TensorFormatError(ValueError):
    """Raised for malformed TNSR payloads (bad magic, truncation, bad dims)."""


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    return a @ b


def softmax_lastdim(t: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Stabilized softmax over the last axis of ``t * scale``."""
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    z = t * scale
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
               eps: float = 1e-6) -> np.ndarray:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def instance_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
                  eps: float = 1e-5) -> np.ndarray:
    """Per-channel normalization over the spatial axes of an H x W x C map."""
    mu = x.mean(axis=(0, 1), keepdims=True)
    var = x.var(axis=(0, 1), keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1,
           padding: int = 0, bias: np.ndarray | None = None) -> np.ndarray:
    """Cross-correlation of an H x W x Cin map with a kh x kw x Cin x Cout kernel.

    Zero padding; output extent floor((H + 2p - kh)/stride) + 1.
    """
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects HxWxC input and 4-d kernel, got {x.shape}, {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    h, w, c = x.shape
    if c != cin:
        raise ShapeError(f"channel mismatch: input {c}, kernel {cin}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit {h}x{w} input with padding {padding}")
    xp = np.pad(x, ((padding, padding), (padding, padding), (0, 0))) if padding else x
    s0, s1, s2 = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(oh, ow, kh, kw, cin),
        strides=(s0 * stride, s1 * stride, s0, s1, s2),
        writeable=False,
    )
    cols = patches.reshape(oh * ow, kh * kw * cin)
    out = cols @ kernel.reshape(kh * kw * cin, cout)
    if bias is not None:
        out = out + bias
    return np.ascontiguousarray(out.reshape(oh, ow, cout))


def bilinear_sample(src: np.ndarray, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample an H x W x C map at fractional (x, y) coordinates.

    coords[..., 0] is the column (x), coords[..., 1] the row (y). Samples
    whose support leaves [0, W-1] x [0, H-1] are zero-filled and flagged
    invalid in the returned boolean mask.
    """
    if src.ndim != 3 or coords.shape[-1] != 2:
        raise ShapeError(f"expected HxWxC source and ...x2 coords, got {src.shape}, {coords.shape}")
    if not np.all(np.isfinite(coords)):
        raise ValueError("coords must be finite")
    h, w, c = src.shape
    x = coords[..., 0]
    y = coords[..., 1]
    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)

    x0 = np.clip(np.floor(x), 0, w - 1).astype(np.intp)
    y0 = np.clip(np.floor(y), 0, h - 1).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.clip(x - x0, 0.0, 1.0)[..., None]
    fy = np.clip(y - y0, 0.0, 1.0)[..., None]

    top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
    bot = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    out[~valid] = 0
    return out, valid


def write_tensor(t: np.ndarray) -> bytes:
    """Serialize a tensor: magic, u32 dtype code, u32 ndim, u32 dims, f32 LE payload."""
    if t.ndim < 1 or t.ndim > MAX_NDIM:
        raise TensorFormatError(f"ndim must be 1..{MAX_NDIM}, got {t.ndim}")
    data = np.ascontiguousarray(t, dtype="<f4")
    header = TNSR_MAGIC + struct.pack("<II", DTYPE_F32, t.ndim)
    header += struct.pack(f"<{t.ndim}I", *t.shape)
    return header + data.tobytes()


def read_tensor(data: bytes) -> np.ndarray:
    if len(data) < 12:
        raise TensorFormatError("truncated header")
    if data[:4] != TNSR_MAGIC:
        raise TensorFormatError(f"bad magic {data[:4]!r}")
    dtype_code, ndim = struct.unpack_from("<II", data, 4)
    if dtype_code != DTYPE_F32:
        raise TensorFormatError(f"unsupported dtype code {dtype_code}")
    if ndim < 1 or ndim > MAX_NDIM:
        raise TensorFormatError(f"ndim out of range: {ndim}")
    if len(data) < 12 + 4 * ndim:
        raise TensorFormatError("truncated dims")
    dims = struct.unpack_from(f"<{ndim}I", data, 12)
    if any(d < 1 for d in dims):
        raise TensorFormatError(f"non-positive dim in {dims}")
    offset = 12 + 4 * ndim
    count = int(np.prod(dims))
    if len(data) != offset + 4 * count:
        raise TensorFormatError(f"payload is {len(data) - offset} bytes, expected {4 * count}")
    flat = np.frombuffer(data, dtype="<f4", offset=offset, count=count)
    return flat.reshape(dims).copy()


def save_tensor(path, t: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(write_tensor(t))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f.read())

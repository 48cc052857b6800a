"""Feature enhancement: stacked windowed self/cross attention and FFN.

Each block symmetrically processes the two feature maps: self-attention
on each map, cross-attention with queries from the self-attended map
and keys/values from the other map's block input, then a feed-forward
network, all with pre-norm residual connections. Attention is computed
inside K x K local windows of size (H/K, W/K); odd-indexed blocks
cyclically shift the partition by half a window to mix across window
borders. Swapping the two inputs swaps the two outputs bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .features import FeatureMap, ModelWeights
from .kernels import ShapeError, layer_norm, relu, softmax_lastdim


@dataclass(frozen=True)
class EnhancementConfig:
    num_blocks: int = 6
    windows_per_side: int = 2  # K; fine stage uses 8

    def __post_init__(self) -> None:
        if self.windows_per_side < 1:
            raise ValueError(f"need at least one window per side, got {self.windows_per_side}")


@dataclass(frozen=True)
class WindowLayout:
    height: int
    width: int
    k: int
    shifted: bool


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Softmax(q k^T / sqrt(d)) v for token matrices [n x d]."""
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("attention expects 2-d token matrices")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"incompatible shapes q{q.shape} k{k.shape} v{v.shape}")
    a = softmax_lastdim(q @ k.T, scale=1.0 / math.sqrt(q.shape[1]))
    return a @ v


def _batched_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    # (B, n, d) per-window attention; same formula as attention()
    a = softmax_lastdim(np.einsum("bnd,bmd->bnm", q, k), scale=1.0 / math.sqrt(q.shape[-1]))
    return np.einsum("bnm,bmd->bnd", a, v)


def partition_windows(x: np.ndarray, k: int, shifted: bool) -> tuple[np.ndarray, WindowLayout]:
    """Split an H x W x d map into k*k window token blocks.

    Requires H and W divisible by 2k (enhance() pads before calling).
    A shifted partition first rolls the map by half a window so window
    borders land mid-window of the unshifted partition.
    """
    h, w, d = x.shape
    if h % (2 * k) or w % (2 * k):
        raise ShapeError(f"{h}x{w} map not divisible by 2K={2 * k}; pad first")
    wh, ww = h // k, w // k
    if shifted:
        x = np.roll(x, (-(wh // 2), -(ww // 2)), axis=(0, 1))
    t = x.reshape(k, wh, k, ww, d).transpose(0, 2, 1, 3, 4).reshape(k * k, wh * ww, d)
    return np.ascontiguousarray(t), WindowLayout(h, w, k, shifted)


def unpartition_windows(tokens: np.ndarray, layout: WindowLayout) -> np.ndarray:
    """Exact inverse of partition_windows."""
    h, w, k = layout.height, layout.width, layout.k
    wh, ww = h // k, w // k
    d = tokens.shape[-1]
    x = tokens.reshape(k, k, wh, ww, d).transpose(0, 2, 1, 3, 4).reshape(h, w, d)
    if layout.shifted:
        x = np.roll(x, (wh // 2, ww // 2), axis=(0, 1))
    return np.ascontiguousarray(x)


def _project(t: np.ndarray, w: ModelWeights, prefix: str, which: str) -> np.ndarray:
    return t @ w[f"{prefix}.w{which}"] + w[f"{prefix}.b{which}"]


def _windowed_attention(x_q: np.ndarray, x_kv: np.ndarray, w: ModelWeights,
                        prefix: str, k: int, shifted: bool,
                        norm_q: str, norm_kv: str) -> np.ndarray:
    tq, layout = partition_windows(x_q, k, shifted)
    tkv, _ = partition_windows(x_kv, k, shifted)
    zq = layer_norm(tq, w[f"{prefix}.{norm_q}.g"], w[f"{prefix}.{norm_q}.b"])
    zkv = layer_norm(tkv, w[f"{prefix}.{norm_kv}.g"], w[f"{prefix}.{norm_kv}.b"])
    out = _batched_attention(
        _project(zq, w, prefix, "q"),
        _project(zkv, w, prefix, "k"),
        _project(zkv, w, prefix, "v"))
    out = _project(out, w, prefix, "o")
    return unpartition_windows(out, layout)


def _ffn(x: np.ndarray, w: ModelWeights, prefix: str) -> np.ndarray:
    z = layer_norm(x, w[f"{prefix}.norm.g"], w[f"{prefix}.norm.b"])
    return relu(z @ w[f"{prefix}.w1"] + w[f"{prefix}.b1"]) @ w[f"{prefix}.w2"] + w[f"{prefix}.b2"]


def transformer_block(x1: np.ndarray, x2: np.ndarray, w: ModelWeights,
                      config: EnhancementConfig, block_index: int) -> tuple[np.ndarray, np.ndarray]:
    """One symmetric enhancement block; odd indices use the shifted partition."""
    if x1.shape != x2.shape:
        raise ShapeError(f"feature shapes differ: {x1.shape} vs {x2.shape}")
    k = config.windows_per_side
    shifted = block_index % 2 == 1
    p = f"enh.block{block_index}"
    q1 = x1 + _windowed_attention(x1, x1, w, f"{p}.self", k, shifted, "norm", "norm")
    q2 = x2 + _windowed_attention(x2, x2, w, f"{p}.self", k, shifted, "norm", "norm")
    v1 = q1 + _windowed_attention(q1, x2, w, f"{p}.cross", k, shifted, "norm_q", "norm_kv")
    v2 = q2 + _windowed_attention(q2, x1, w, f"{p}.cross", k, shifted, "norm_q", "norm_kv")
    y1 = v1 + _ffn(v1, w, f"{p}.ffn")
    y2 = v2 + _ffn(v2, w, f"{p}.ffn")
    return y1, y2


def _pad_to_multiple(x: np.ndarray, m: int) -> np.ndarray:
    h, w = x.shape[:2]
    ph = (-h) % m
    pw = (-w) % m
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, ph), (0, pw), (0, 0)))


def enhance(f1: FeatureMap, f2: FeatureMap, w: ModelWeights,
            config: EnhancementConfig = EnhancementConfig()) -> tuple[FeatureMap, FeatureMap]:
    """Run the full block stack; pads to 2K divisibility and crops after."""
    if f1.data.shape != f2.data.shape:
        raise ShapeError(f"feature shapes differ: {f1.data.shape} vs {f2.data.shape}")
    h, w_, _ = f1.data.shape
    m = 2 * config.windows_per_side
    x1 = _pad_to_multiple(f1.data, m)
    x2 = _pad_to_multiple(f2.data, m)
    for i in range(config.num_blocks):
        x1, x2 = transformer_block(x1, x2, w, config, i)
    return (FeatureMap(np.ascontiguousarray(x1[:h, :w_]), f1.scale),
            FeatureMap(np.ascontiguousarray(x2[:h, :w_]), f2.scale))

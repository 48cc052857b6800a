"""Displacement refinement: multi-scale residual matching, propagation,
and recurrent updates.

The coarse 1/8 match is upsampled to 1/4, the target features are
warped by it, and a second pass of the same enhancement model (with an
8x8 window grid) plus a 9x9 local match estimates the leftover
residual. Propagation spreads displacements across the reference
feature's self-attention, filling regions the matcher cannot see. The
recurrent head iterates conv-GRU updates driven by locally sampled
matching costs; its residual output head is zero at initialization, so
refinement is exactly the identity until trained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .enhancement import EnhancementConfig, enhance
from .features import FeatureMap, ModelWeights, add_positional_encoding
from .kernels import ShapeError, bilinear_sample, conv2d, relu, sigmoid, softmax_lastdim
from .matching import DISPARITY, FLOW, DisplacementField, local_match


@dataclass(frozen=True)
class RefineConfig:
    flow_iters: int = 6
    disp_iters: int = 3
    gru_hidden: int = 96
    lookup_radius: int = 3
    fine_windows: int = 8
    local_radius: int = 4  # 9x9 residual matching window

    def __post_init__(self) -> None:
        if self.flow_iters < 0 or self.disp_iters < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.lookup_radius < 1:
            raise ValueError(f"lookup radius must be >= 1, got {self.lookup_radius}")


def _resize_bilinear(src: np.ndarray, oh: int, ow: int) -> np.ndarray:
    """Center-aligned bilinear resize with edge clamping."""
    h, w = src.shape[:2]
    sy = (np.arange(oh, dtype=np.float64) + 0.5) * (h / oh) - 0.5
    sx = (np.arange(ow, dtype=np.float64) + 0.5) * (w / ow) - 0.5
    coords = np.stack(np.meshgrid(np.clip(sx, 0, w - 1), np.clip(sy, 0, h - 1)), axis=-1)
    squeeze = src.ndim == 2
    src3 = src[..., None] if squeeze else src
    out, _ = bilinear_sample(src3.astype(np.float64), coords)
    out = out.astype(src.dtype)
    return out[..., 0] if squeeze else out


def _resize_nearest_mask(mask: np.ndarray, oh: int, ow: int) -> np.ndarray:
    h, w = mask.shape
    iy = np.clip(np.round((np.arange(oh) + 0.5) * (h / oh) - 0.5).astype(np.intp), 0, h - 1)
    ix = np.clip(np.round((np.arange(ow) + 0.5) * (w / ow) - 0.5).astype(np.intp), 0, w - 1)
    return mask[iy[:, None], ix[None, :]]


def upsample_displacement(d: DisplacementField, factor: int) -> DisplacementField:
    """Bilinear spatial upsampling with displacement magnitudes scaled by factor."""
    if factor not in (2, 4, 8):
        raise ValueError(f"factor must be 2, 4 or 8, got {factor}")
    if d.scale % factor != 0:
        raise ValueError(f"cannot upsample a scale-{d.scale} field by {factor}")
    h, w = d.shape
    oh, ow = h * factor, w * factor
    data = _resize_bilinear(d.data, oh, ow) * factor
    valid = _resize_nearest_mask(d.valid, oh, ow)
    return DisplacementField(data, d.mode, valid=valid, scale=d.scale // factor)


def warp_features(f2: np.ndarray, d: DisplacementField) -> tuple[np.ndarray, np.ndarray]:
    """Sample the target features at each pixel's current match position."""
    h, w = f2.shape[:2]
    if d.shape != (h, w):
        raise ShapeError(f"displacement grid {d.shape} does not match features {(h, w)}")
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    if d.mode == FLOW:
        coords = np.stack([xs + d.data[..., 0], ys + d.data[..., 1]], axis=-1)
    else:
        coords = np.stack([xs - d.data, ys], axis=-1)
    return bilinear_sample(f2, coords)


def propagate(f1: FeatureMap, d: DisplacementField) -> DisplacementField:
    """Spread displacements with self-attention over the reference features.

    Every output pixel is a convex combination of input displacements,
    weighted by feature similarity, so occluded or out-of-view pixels
    inherit values from pixels that look like them.
    """
    feats = f1.data if isinstance(f1, FeatureMap) else f1
    h, w, dim = feats.shape
    if d.shape != (h, w):
        raise ShapeError(f"displacement grid {d.shape} does not match features {(h, w)}")
    tok = feats.reshape(h * w, dim)
    att = softmax_lastdim(tok @ tok.T, scale=1.0 / np.sqrt(dim))
    vals = d.data.reshape(h * w, -1)
    out = (att @ vals).reshape(d.data.shape)
    return DisplacementField(out, d.mode, valid=np.ones((h, w), dtype=bool), scale=d.scale)


def multi_scale_refine(f1_4: FeatureMap, f2_4: FeatureMap, d8: DisplacementField,
                       weights: ModelWeights, config: RefineConfig = RefineConfig(),
                       num_blocks: int = 6, temperature: float = 1.0,
                       corr_scaled: bool = True, use_transformer: bool = True) -> DisplacementField:
    """Upsample the 1/8 result to 1/4 and add a locally matched residual."""
    if f1_4.scale != 4 or f2_4.scale != 4:
        raise ValueError("multi_scale_refine expects 1/4-scale features")
    if d8.scale != 8:
        raise ValueError(f"coarse displacement must be at 1/8, got scale {d8.scale}")
    up = upsample_displacement(d8, 2)
    h, w = f1_4.data.shape[:2]
    up = DisplacementField(up.data[:h, :w], up.mode, valid=up.valid[:h, :w], scale=4)

    warped, warp_valid = warp_features(f2_4.data, up)
    if use_transformer:
        enh_cfg = EnhancementConfig(num_blocks=num_blocks, windows_per_side=config.fine_windows)
        e1, e2 = enhance(add_positional_encoding(f1_4),
                         add_positional_encoding(FeatureMap(warped, 4)),
                         weights, enh_cfg)
        ref, tgt = e1.data, e2.data
    else:
        ref, tgt = f1_4.data, warped
    residual = local_match(ref, tgt, radius=config.local_radius, mode=d8.mode,
                           temperature=temperature, scaled=corr_scaled)
    return DisplacementField(up.data + residual.data, d8.mode,
                             valid=up.valid & warp_valid, scale=4)


def _local_cost(f1: np.ndarray, f2: np.ndarray, d: DisplacementField,
                radius: int, scaled: bool) -> np.ndarray:
    """Correlation between f1 and f2 sampled around the current match position.

    One channel per offset: the full (2r+1)^2 neighborhood for flow, the
    horizontal 2r+1 strip for disparity. Out-of-bounds samples score 0.
    """
    h, w, dim = f1.shape
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    if d.mode == FLOW:
        cx = xs + d.data[..., 0]
        cy = ys + d.data[..., 1]
        offsets = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    else:
        cx = xs - d.data
        cy = ys
        offsets = [(0, dx) for dx in range(-radius, radius + 1)]
    cost = np.empty((h, w, len(offsets)), dtype=f1.dtype)
    norm = np.sqrt(dim) if scaled else 1.0
    for n, (dy, dx) in enumerate(offsets):
        coords = np.stack([cx + dx, cy + dy], axis=-1)
        sampled, _ = bilinear_sample(f2, coords)
        cost[..., n] = np.einsum("ijh,ijh->ij", f1, sampled) / norm
    return cost


def gru_refine(d: DisplacementField, f1: FeatureMap, f2: FeatureMap,
               weights: ModelWeights, config: RefineConfig, n: int,
               corr_scaled: bool = True) -> list[DisplacementField]:
    """n recurrent residual updates; returns every intermediate field.

    Each step samples local matching costs at the current displacement,
    feeds (cost, displacement, context) through a conv GRU, and adds the
    predicted residual. Disparity updates are horizontal-only and the
    final output is clamped non-negative.
    """
    if n < 1:
        raise ValueError(f"need at least one iteration, got {n}")
    if f1.data.shape != f2.data.shape:
        raise ShapeError(f"feature shapes differ: {f1.data.shape} vs {f2.data.shape}")
    task = "flow" if d.mode == FLOW else "disp"
    p = f"gru.{task}"
    ctx = relu(conv2d(f1.data, weights[f"{p}.context.w"], bias=weights[f"{p}.context.b"]))
    hidden = np.tanh(conv2d(f1.data, weights[f"{p}.hidden.w"], bias=weights[f"{p}.hidden.b"]))

    cur = d.data.astype(np.float32)
    outs: list[DisplacementField] = []
    for _ in range(n):
        field = DisplacementField(cur, d.mode, valid=d.valid, scale=d.scale)
        cost = _local_cost(f1.data, f2.data, field, config.lookup_radius, corr_scaled)
        cur_ch = cur if d.mode == FLOW else cur[..., None]
        x = np.concatenate([cost, cur_ch.astype(np.float32), ctx], axis=-1)
        hx = np.concatenate([hidden, x], axis=-1)
        z = sigmoid(conv2d(hx, weights[f"{p}.wz"], padding=1, bias=weights[f"{p}.zb"]))
        r = sigmoid(conv2d(hx, weights[f"{p}.wr"], padding=1, bias=weights[f"{p}.rb"]))
        rhx = np.concatenate([r * hidden, x], axis=-1)
        q = np.tanh(conv2d(rhx, weights[f"{p}.wq"], padding=1, bias=weights[f"{p}.qb"]))
        hidden = (1.0 - z) * hidden + z * q
        head = relu(conv2d(hidden, weights[f"{p}.head1.w"], padding=1, bias=weights[f"{p}.head1.b"]))
        delta = conv2d(head, weights[f"{p}.head2.w"], padding=1, bias=weights[f"{p}.head2.b"])
        cur = cur + (delta if d.mode == FLOW else delta[..., 0])
        outs.append(DisplacementField(cur.copy(), d.mode, valid=d.valid.copy(), scale=d.scale))
    if d.mode == DISPARITY:
        last = outs[-1]
        outs[-1] = DisplacementField(np.maximum(last.data, 0.0), DISPARITY,
                                     valid=last.valid, scale=last.scale)
    return outs

"""Parameter-free similarity matching between dense feature maps.

Correlation volumes hold all-pairs (flow) or per-scanline (disparity)
dot products. A temperature softmax over the candidate axis turns a
volume into a matching distribution; the displacement field is the
distribution's expected candidate coordinate minus the reference
coordinate (flow), or reference column minus expected column for
disparity, which keeps disparity non-negative when right-view content
sits left of the left view.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .kernels import ShapeError, softmax_lastdim

FLOW = "flow"
DISPARITY = "disparity"

# full all-pairs volumes get large quickly; desk-scale guard at 1/8 features
MAX_FLOW_TOKENS = 96 * 96


@dataclass
class CorrelationVolume:
    """Dot-product similarities: (H, W, H, W) for flow, (H, W, W) for disparity."""

    data: np.ndarray
    mode: str

    def __post_init__(self) -> None:
        if self.mode == FLOW and self.data.ndim != 4:
            raise ShapeError(f"flow volume must be 4-d, got {self.data.shape}")
        if self.mode == DISPARITY and self.data.ndim != 3:
            raise ShapeError(f"disparity volume must be 3-d, got {self.data.shape}")


@dataclass
class MatchingDistribution:
    """Softmax-normalized correlation volume; candidate axes sum to one."""

    data: np.ndarray
    mode: str


@dataclass
class DisplacementField:
    """Per-pixel correspondence offsets.

    data is (H, W, 2) with (u, v) = (x, y) components for flow, (H, W)
    for disparity. scale tags the grid the field lives on (1 = full
    resolution); values are in cells of that grid.
    """

    data: np.ndarray
    mode: str
    valid: np.ndarray = field(default=None)
    scale: int = 1

    def __post_init__(self) -> None:
        if self.mode == FLOW and (self.data.ndim != 3 or self.data.shape[-1] != 2):
            raise ShapeError(f"flow field must be (H, W, 2), got {self.data.shape}")
        if self.mode == DISPARITY and self.data.ndim != 2:
            raise ShapeError(f"disparity field must be (H, W), got {self.data.shape}")
        if self.valid is None:
            self.valid = np.ones(self.data.shape[:2], dtype=bool)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]


def correlation_flow(f1: np.ndarray, f2: np.ndarray, scaled: bool = True) -> CorrelationVolume:
    """All-pairs dot products C(i,j,k,l) = sum_h F1(i,j,h) F2(k,l,h).

    scaled divides by sqrt(d) (default on, matching the attention scaling).
    """
    if f1.shape != f2.shape:
        raise ShapeError(f"feature shapes differ: {f1.shape} vs {f2.shape}")
    h, w, d = f1.shape
    if h * w > MAX_FLOW_TOKENS:
        raise ShapeError(f"flow volume for {h}x{w} features exceeds the {MAX_FLOW_TOKENS}-token cap")
    c = f1.reshape(h * w, d) @ f2.reshape(h * w, d).T
    if scaled:
        c = c / np.sqrt(d)
    return CorrelationVolume(c.reshape(h, w, h, w), FLOW)


def correlation_disparity(f_left: np.ndarray, f_right: np.ndarray, scaled: bool = True) -> CorrelationVolume:
    """Per-scanline dot products C(i,j,k) = sum_h FL(i,j,h) FR(i,k,h)."""
    if f_left.shape != f_right.shape:
        raise ShapeError(f"feature shapes differ: {f_left.shape} vs {f_right.shape}")
    h, w, d = f_left.shape
    c = np.einsum("ijh,ikh->ijk", f_left, f_right, optimize=True)
    if scaled:
        c = c / np.sqrt(d)
    return CorrelationVolume(np.ascontiguousarray(c), DISPARITY)


def match(volume: CorrelationVolume, temperature: float = 1.0) -> tuple[MatchingDistribution, DisplacementField]:
    """Softmax the candidate axis and take the expected candidate coordinate.

    Flow: D = G_expected - G_reference (2-vector per pixel).
    Disparity: D = reference column - expected column, so D >= 0 when the
    matched right-view column lies left of the reference. A convention
    warning fires if more than 1% of pixels come out below -0.5 px.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    c = volume.data
    if volume.mode == FLOW:
        h, w = c.shape[:2]
        m = softmax_lastdim(c.reshape(h, w, h * w), scale=1.0 / temperature)
        ky, kx = np.meshgrid(np.arange(h, dtype=c.dtype), np.arange(w, dtype=c.dtype), indexing="ij")
        gx = m @ kx.ravel()
        gy = m @ ky.ravel()
        jx, iy = np.meshgrid(np.arange(w, dtype=c.dtype), np.arange(h, dtype=c.dtype), indexing="xy")
        disp = np.stack([gx - jx, gy - iy], axis=-1)
        return (MatchingDistribution(m.reshape(h, w, h, w), FLOW),
                DisplacementField(disp, FLOW))
    if volume.mode == DISPARITY:
        h, w = c.shape[:2]
        m = softmax_lastdim(c, scale=1.0 / temperature)
        g = m @ np.arange(w, dtype=c.dtype)
        disp = np.arange(w, dtype=c.dtype)[None, :] - g
        frac_negative = float((disp < -0.5).mean())
        if frac_negative > 0.01:
            warnings.warn(
                f"{frac_negative:.1%} of pixels have disparity below -0.5 px; "
                "check the stereo pair ordering (left stream must be the reference)",
                stacklevel=2)
        return MatchingDistribution(m, DISPARITY), DisplacementField(disp, DISPARITY)
    raise ValueError(f"unknown mode {volume.mode!r}")


def match_gradient(volume: CorrelationVolume, temperature: float, upstream: np.ndarray) -> np.ndarray:
    """Analytic gradient of match()'s displacement w.r.t. the volume entries.

    upstream is dL/dD with D as returned by match(). For a softmax
    expectation G over candidates c, dG/dC(c) = M(c) (coord(c) - G) / T;
    the disparity branch carries the extra -1 from D = ref - G.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    c = volume.data
    if volume.mode == FLOW:
        h, w = c.shape[:2]
        if upstream.shape != (h, w, 2):
            raise ShapeError(f"upstream must be {(h, w, 2)}, got {upstream.shape}")
        m = softmax_lastdim(c.reshape(h, w, h * w), scale=1.0 / temperature)
        ky, kx = np.meshgrid(np.arange(h, dtype=c.dtype), np.arange(w, dtype=c.dtype), indexing="ij")
        gx = (m @ kx.ravel())[..., None]
        gy = (m @ ky.ravel())[..., None]
        term = (upstream[..., 0:1] * (kx.ravel()[None, None, :] - gx)
                + upstream[..., 1:2] * (ky.ravel()[None, None, :] - gy))
        grad = m * term / temperature
        return grad.reshape(h, w, h, w)
    if volume.mode == DISPARITY:
        h, w = c.shape[:2]
        if upstream.shape != (h, w):
            raise ShapeError(f"upstream must be {(h, w)}, got {upstream.shape}")
        m = softmax_lastdim(c, scale=1.0 / temperature)
        cols = np.arange(w, dtype=c.dtype)
        g = (m @ cols)[..., None]
        grad = m * (cols[None, None, :] - g) * (-upstream[..., None]) / temperature
        return grad
    raise ValueError(f"unknown mode {volume.mode!r}")


def local_match(f1: np.ndarray, f2_warped: np.ndarray, radius: int = 4,
                mode: str = FLOW, temperature: float = 1.0,
                scaled: bool = True) -> DisplacementField:
    """Residual displacement from matching within a local candidate window.

    f2_warped must already be aligned to f1 by the current estimate; the
    result is the leftover offset, bounded by the radius per axis. Flow
    uses the full (2r+1)^2 window, disparity the horizontal 2r+1 strip.
    Candidates falling outside the map are excluded from the softmax.
    """
    if f1.shape != f2_warped.shape:
        raise ShapeError(f"feature shapes differ: {f1.shape} vs {f2_warped.shape}")
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    h, w, d = f1.shape
    offsets = np.arange(-radius, radius + 1)
    if mode == FLOW:
        grid = [(dy, dx) for dy in offsets for dx in offsets]
    elif mode == DISPARITY:
        grid = [(0, dx) for dx in offsets]
    else:
        raise ValueError(f"unknown mode {mode!r}")

    logits = np.full((h, w, len(grid)), -np.inf, dtype=f1.dtype)
    for n, (dy, dx) in enumerate(grid):
        ys0, ys1 = max(0, -dy), min(h, h - dy)
        xs0, xs1 = max(0, -dx), min(w, w - dx)
        if ys0 >= ys1 or xs0 >= xs1:
            continue
        dots = np.einsum(
            "ijh,ijh->ij",
            f1[ys0:ys1, xs0:xs1],
            f2_warped[ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx])
        logits[ys0:ys1, xs0:xs1, n] = dots / np.sqrt(d) if scaled else dots

    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    m = e / e.sum(axis=-1, keepdims=True)
    off = np.asarray(grid, dtype=f1.dtype)
    if mode == FLOW:
        res = np.stack([m @ off[:, 1], m @ off[:, 0]], axis=-1)
        return DisplacementField(res, FLOW)
    return DisplacementField(m @ off[:, 1], DISPARITY)

"""End-to-end estimation pipeline, supervision loss, and metrics.

Stage order: extract multi-scale features, add positional encoding,
enhance at 1/8, global match, propagate, multi-scale residual refine at
1/4, recurrent refinement, bilinear upsample to full resolution. Every
stage can be toggled off independently; all intermediate predictions
are retained (upsampled to full resolution) for the weighted
supervision loss, whose weights decay geometrically away from the
final prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .enhancement import EnhancementConfig, enhance
from .events import VoxelGrid
from .features import (FeatureMap, ModelConfig, ModelWeights,
                       add_positional_encoding, extract_features)
from .kernels import ShapeError
from .matching import (DISPARITY, FLOW, DisplacementField,
                       correlation_disparity, correlation_flow, match)
from .optimize import RefineConfig, gru_refine, multi_scale_refine, propagate, upsample_displacement


@dataclass(frozen=True)
class PipelineConfig:
    task: str = FLOW
    bins: int = 5
    dim: int = 128
    temperature: float = 1.0
    corr_scaled: bool = True
    enhancement: EnhancementConfig = EnhancementConfig()
    refine: RefineConfig = RefineConfig()
    use_transformer: bool = True
    use_multiscale: bool = True
    use_propagation: bool = True
    use_refinement: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.task not in (FLOW, DISPARITY):
            raise ValueError(f"task must be '{FLOW}' or '{DISPARITY}', got {self.task!r}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            bins=self.bins, dim=self.dim, blocks=self.enhancement.num_blocks,
            gru_hidden=self.refine.gru_hidden, lookup_radius=self.refine.lookup_radius)


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 0.7
    beta: float = 1.0  # smooth-l1 transition, disparity only

    def __post_init__(self) -> None:
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")


@dataclass
class MetricsReport:
    valid_count: int
    epe: float | None = None
    ae: float | None = None
    npe: dict[int, float] = field(default_factory=dict)
    mae: float | None = None
    rmse: float | None = None


@dataclass
class PipelineResult:
    final: DisplacementField
    stages: dict[str, DisplacementField]
    intermediates: list[DisplacementField]  # full resolution, ordered for the loss


def _retag(d: DisplacementField, scale: int) -> DisplacementField:
    return DisplacementField(d.data, d.mode, valid=d.valid, scale=scale)


def _to_full(d: DisplacementField, height: int, width: int) -> DisplacementField:
    if d.scale == 1:
        out = d
    else:
        out = upsample_displacement(d, d.scale)
    return DisplacementField(np.ascontiguousarray(out.data[:height, :width]), d.mode,
                             valid=np.ascontiguousarray(out.valid[:height, :width]), scale=1)


def run(task: str, v1: VoxelGrid, v2: VoxelGrid, weights: ModelWeights,
        config: PipelineConfig) -> PipelineResult:
    """Estimate flow (v1, v2 at successive times) or disparity (left, right).

    The task argument selects the matching mode and iteration budget;
    it takes precedence over config.task.
    """
    if task not in (FLOW, DISPARITY):
        raise ValueError(f"task must be '{FLOW}' or '{DISPARITY}', got {task!r}")
    if v1.data.shape != v2.data.shape:
        raise ShapeError(f"input grids differ: {v1.data.shape} vs {v2.data.shape}")
    mode = FLOW if task == FLOW else DISPARITY
    h, w = v1.height, v1.width

    need_quarter = config.use_multiscale or config.use_refinement
    scales = (4, 8) if need_quarter else (8,)
    feats1 = extract_features(v1, weights, scales)
    feats2 = extract_features(v2, weights, scales)

    if config.use_transformer:
        e1, e2 = enhance(add_positional_encoding(feats1[8]),
                         add_positional_encoding(feats2[8]),
                         weights, config.enhancement)
    else:
        e1, e2 = feats1[8], feats2[8]

    if mode == FLOW:
        volume = correlation_flow(e1.data, e2.data, scaled=config.corr_scaled)
    else:
        volume = correlation_disparity(e1.data, e2.data, scaled=config.corr_scaled)
    _, d_global = match(volume, temperature=config.temperature)
    d_cur = _retag(d_global, 8)

    stages: dict[str, DisplacementField] = {"global": d_cur}
    preds: list[DisplacementField] = [d_cur]

    if config.use_propagation:
        d_cur = propagate(e1, d_cur)
        stages["propagated"] = d_cur
        preds.append(d_cur)

    if config.use_multiscale:
        d_cur = multi_scale_refine(feats1[4], feats2[4], d_cur, weights, config.refine,
                                   num_blocks=config.enhancement.num_blocks,
                                   temperature=config.temperature,
                                   corr_scaled=config.corr_scaled,
                                   use_transformer=config.use_transformer)
        stages["multiscale"] = d_cur
        preds.append(d_cur)

    if config.use_refinement:
        n = config.refine.flow_iters if mode == FLOW else config.refine.disp_iters
        if n > 0:
            fs = d_cur.scale
            outs = gru_refine(d_cur, feats1[fs], feats2[fs], weights, config.refine, n,
                              corr_scaled=config.corr_scaled)
            for i, o in enumerate(outs):
                stages[f"refine{i}"] = o
            preds.extend(outs)
            d_cur = outs[-1]

    final = _to_full(d_cur, h, w)
    stages["final"] = final
    return PipelineResult(final=final,
                          stages=stages,
                          intermediates=[_to_full(p, h, w) for p in preds])


def loss_weights(n: int, gamma: float) -> list[float]:
    """Geometric weights gamma^(n-i) for predictions i = 1..n (last weighs 1)."""
    return [gamma ** (n - i) for i in range(1, n + 1)]


def supervision_loss(predictions: list[DisplacementField], gt: DisplacementField,
                     mask: np.ndarray | None = None,
                     cfg: LossConfig = LossConfig()) -> float:
    """Weighted sum of per-prediction errors; later predictions weigh more.

    Flow uses the mean l1 distance (|du| + |dv|) over valid pixels,
    disparity the smooth-l1 with transition beta.
    """
    if not predictions:
        raise ValueError("need at least one prediction")
    mask = gt.valid if mask is None else mask
    if mask.sum() == 0:
        raise ValueError("empty validity mask")
    total = 0.0
    for wgt, pred in zip(loss_weights(len(predictions), cfg.gamma), predictions):
        if pred.data.shape != gt.data.shape:
            raise ShapeError(f"prediction {pred.data.shape} vs gt {gt.data.shape}; resample first")
        diff = pred.data.astype(np.float64) - gt.data.astype(np.float64)
        if gt.mode == FLOW:
            err = np.abs(diff).sum(axis=-1)[mask].mean()
        else:
            a = np.abs(diff[mask])
            err = np.where(a < cfg.beta, 0.5 * a * a / cfg.beta, a - 0.5 * cfg.beta).mean()
        total += wgt * float(err)
    return total


def flow_metrics(pred: DisplacementField, gt: DisplacementField,
                 mask: np.ndarray | None = None, thresholds: tuple[int, ...] = (1, 2, 3)) -> MetricsReport:
    """End-point error, N-pixel outlier percentages, and angular error (degrees)."""
    mask = gt.valid if mask is None else mask
    if pred.data.shape != gt.data.shape:
        raise ShapeError(f"shape mismatch: {pred.data.shape} vs {gt.data.shape}")
    if mask.sum() == 0:
        raise ValueError("empty validity mask")
    diff = pred.data.astype(np.float64) - gt.data.astype(np.float64)
    err = np.sqrt((diff ** 2).sum(axis=-1))[mask]
    npe = {n: 100.0 * float((err > n).mean()) for n in thresholds}

    pu, pv = pred.data[..., 0][mask].astype(np.float64), pred.data[..., 1][mask].astype(np.float64)
    gu, gv = gt.data[..., 0][mask].astype(np.float64), gt.data[..., 1][mask].astype(np.float64)
    dot = pu * gu + pv * gv + 1.0
    norms = np.sqrt(pu ** 2 + pv ** 2 + 1.0) * np.sqrt(gu ** 2 + gv ** 2 + 1.0)
    ang = np.degrees(np.arccos(np.clip(dot / norms, -1.0, 1.0)))
    return MetricsReport(valid_count=int(mask.sum()), epe=float(err.mean()),
                         ae=float(ang.mean()), npe=npe)


def disparity_metrics(pred: DisplacementField, gt: DisplacementField,
                      mask: np.ndarray | None = None, thresholds: tuple[int, ...] = (1, 2, 3)) -> MetricsReport:
    """Mean absolute error, RMSE, and N-pixel outlier percentages."""
    mask = gt.valid if mask is None else mask
    if pred.data.shape != gt.data.shape:
        raise ShapeError(f"shape mismatch: {pred.data.shape} vs {gt.data.shape}")
    if mask.sum() == 0:
        raise ValueError("empty validity mask")
    diff = np.abs(pred.data.astype(np.float64) - gt.data.astype(np.float64))[mask]
    npe = {n: 100.0 * float((diff > n).mean()) for n in thresholds}
    return MetricsReport(valid_count=int(mask.sum()), mae=float(diff.mean()),
                         rmse=float(np.sqrt((diff ** 2).mean())), npe=npe)

"""Dense correspondence from event streams.

Estimates optical flow from temporally separated event windows and
stereo disparity from rectified event pairs with one similarity-matching
model: voxelize events, extract shared CNN features, enhance them with
windowed cross-attention, softmax-match correlation volumes, and refine
multi-scale. Includes a synthetic stereo-event scene generator with
analytic ground truth and a self-check suite covering every stage's
invariants.
"""

from .enhancement import EnhancementConfig, attention, enhance, partition_windows, transformer_block, unpartition_windows
from .events import (Event, EventStream, VoxelGrid, build_voxel_grid, normalize_timestamps,
                     parse_events, voxel_mass, write_events)
from .features import (FeatureMap, ModelConfig, ModelWeights, add_positional_encoding,
                       extract_features, init_weights, load_weights, save_weights)
from .geometry import (CameraRig, RenderResult, ScenePoint, SyntheticScene, TexturedPoint,
                       disparity_from_depth, disparity_rate_identity, eval_matching_cost,
                       flow_from_motion, parse_scene, project, render_synthetic, stereo_flow_pair)
from .kernels import (bilinear_sample, conv2d, load_tensor, matmul, read_tensor, save_tensor,
                      softmax_lastdim, write_tensor)
from .matching import (DISPARITY, FLOW, CorrelationVolume, DisplacementField, MatchingDistribution,
                       correlation_disparity, correlation_flow, local_match, match, match_gradient)
from .optimize import RefineConfig, gru_refine, multi_scale_refine, propagate, upsample_displacement
from .pipeline import (LossConfig, MetricsReport, PipelineConfig, PipelineResult, disparity_metrics,
                       flow_metrics, loss_weights, run, supervision_loss)

__version__ = "0.1.0"

"""Quantization-aware dense matching for semi-supervised 3D detection.

The package splits into small, closed-form layers:

- voxel_geometry: lattice quantization and quarter-turn rigid transforms
- qec: the residual translation that makes transforms commute with
  quantization, plus Monte Carlo statistics over random transforms
- box_codec: the 8-component face-distance box encoding and its exact
  behavior under quarter-turn transforms
- matching: voxel-level teacher/student correspondence with confidence
  gating, and the proposal-level baseline
- training_signals: consistency and supervised losses with analytic
  gradients for a toy linear detector, plus EMA teacher updates
- sim_harness: synthetic scenes, the self-training loop, and evaluation
- report: matplotlib figures rendered from the emitted CSV files
- cli: the voxmatch command-line entry point
"""

from .box_codec import (
    BoxDeltas,
    OrientedBox,
    aabb_iou,
    axis_aligned_solid,
    decode,
    decode_axis_aligned,
    delta_transform_matrix,
    encode,
    encode_batch,
    normalize_yaw,
    transform_box,
    transform_deltas,
)
from .matching import (
    FilterConfig,
    MatchSet,
    MatchingError,
    Prediction,
    PredictionGrid,
    align_teacher,
    dense_match,
    filter_predictions,
    nms,
    nms_arrays,
    proposal_match,
)
from .qec import (
    CLAMP_EDGE,
    Compensation,
    StatReport,
    TransformSampler,
    apply_with_qec,
    compensation,
    compensation_batch,
    compensation_samples,
    qec_statistics,
)
from .sim_harness import (
    OPEN_GATE,
    TRACE_COLUMNS,
    EvalMetrics,
    GenerationError,
    Scene,
    SceneFormatError,
    SimConfig,
    TrainResult,
    UndefinedMetricError,
    evaluate,
    extract_features,
    generate_scene,
    held_out_regression_error,
    load_scene,
    mock_predict,
    predict_boxes,
    save_scene,
    self_train,
    write_trace_csv,
)
from .training_signals import (
    FEATURE_DIM,
    LossConfig,
    SceneBatch,
    Targets,
    TrainingBatch,
    assign_targets,
    batch_losses,
    centerness_loss,
    consistency_loss,
    ema_update,
    gradient,
    huber_box_loss,
    init_params,
    losses_and_gradient,
    model_forward,
    params_dim,
    semantic_loss,
    supervised_loss,
    warmup_weight,
)
from .voxel_geometry import (
    Transform,
    apply_transform_points,
    frac_points,
    map_anchor,
    map_anchors,
    quantize,
    quantize_points,
    rotate_key,
    rotate_keys,
    rotate_point,
    rotate_points,
)

__version__ = "0.1.0"

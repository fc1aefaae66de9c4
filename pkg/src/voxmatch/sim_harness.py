"""Synthetic desk-scale scenes and a minimal self-training loop.

Scenes are boxes with surface-sampled points plus uniform clutter. A mock
predictor turns ground truth into per-voxel predictions with controllable
noise; the real loop trains the toy linear detector of training_signals with
an EMA teacher, dense matching, and the closed-form quantization correction
on the student branch.

No rendering here: figures are produced from the emitted CSV by the report
layer (or any external tool).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .box_codec import OrientedBox, aabb_iou, transform_box
from .matching import (
    FilterConfig,
    PredictionGrid,
    align_teacher,
    dense_match,
    filter_predictions,
    nms_arrays,
    proposal_match,
    softmax,
)
from .qec import TransformSampler, apply_with_qec
from .training_signals import (
    LossConfig,
    SceneBatch,
    TrainingBatch,
    assign_targets,
    ema_update,
    init_params,
    losses_and_gradient,
    model_forward,
    warmup_weight,
)
from .voxel_geometry import apply_transform_points, map_anchors, quantize_points

__all__ = [
    "EvalMetrics",
    "GenerationError",
    "OPEN_GATE",
    "Scene",
    "SceneFormatError",
    "SimConfig",
    "TRACE_COLUMNS",
    "TrainResult",
    "UndefinedMetricError",
    "evaluate",
    "extract_features",
    "generate_scene",
    "held_out_regression_error",
    "load_scene",
    "mock_predict",
    "predict_boxes",
    "save_scene",
    "self_train",
    "write_trace_csv",
]

TRACE_COLUMNS = (
    "step",
    "sup_loss",
    "cons_loss",
    "warmup_weight",
    "pairs_dense",
    "pairs_proposal",
    "coverage25",
    "map25",
    "map50",
)

_NMS_IOU = 0.25

# The confidence gates belong to the consistency-matching path. Evaluation
# ranks every decoded prediction by score instead: AP is ranking-based, and
# pooled recall should see all candidates.
OPEN_GATE = FilterConfig(tau_center=0.0, tau_cls=0.0)


class GenerationError(RuntimeError):
    """Scene generation could not place the requested boxes."""


class SceneFormatError(ValueError):
    """A scene file failed validation; the message carries the location."""


class UndefinedMetricError(ValueError):
    """Metrics were requested against an empty ground-truth set."""


@dataclass(frozen=True)
class SimConfig:
    """Scene geometry, point budget, and training-side knobs.

    The arena spans [-arena_extent/2, arena_extent/2] horizontally and
    [0, arena_height] vertically. Boxes never overlap beyond max_overlap_iou.
    n_classes counts object classes; the detector gets one extra background
    logit. yawed=False keeps every box axis-aligned (the IoU-based metrics
    are only defined for such scenes).
    """

    arena_extent: float = 8.0
    arena_height: float = 3.0
    n_boxes_min: int = 2
    n_boxes_max: int = 8
    dims_min: float = 0.3
    dims_max: float = 1.5
    points_per_box: int = 256
    clutter_points: int = 128
    n_classes: int = 3
    yawed: bool = False
    voxel_size: float = 0.01
    noise_sigma: float = 0.01
    labeled_fraction: float = 0.1
    max_overlap_iou: float = 0.05
    placement_attempts: int = 100
    transform_sampler: TransformSampler = TransformSampler()

    def __post_init__(self):
        if self.n_boxes_min < 1 or self.n_boxes_max < self.n_boxes_min:
            raise ValueError("box count range must satisfy 1 <= min <= max")
        if not 0.0 < self.dims_min <= self.dims_max:
            raise ValueError("dims range must satisfy 0 < min <= max")
        if self.dims_max >= self.arena_extent / 2.0:
            raise ValueError("dims_max must fit inside the arena")
        if self.voxel_size <= 0.0:
            raise ValueError("voxel_size must be positive")
        if self.n_classes < 1:
            raise ValueError("need at least one object class")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError("labeled_fraction must lie in (0, 1]")

    @property
    def n_class_logits(self) -> int:
        return self.n_classes + 1


@dataclass(frozen=True)
class Scene:
    """A point cloud with (possibly withheld) box annotations."""

    points: np.ndarray
    boxes: list[OrientedBox]
    labeled: bool = True

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] < 1:
            raise ValueError("a scene needs at least one point")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "boxes", list(self.boxes))


def _sample_box_surface(box: OrientedBox, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform points on the box surface, area-weighted across the six faces."""
    w, l, h = box.dims
    areas = np.array([l * h, l * h, w * h, w * h, w * l, w * l])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    pts = np.empty((n, 3))
    for face in range(6):
        sel = faces == face
        axis = face // 2
        sign = 1.0 if face % 2 == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        pts[sel, axis] = sign * box.dims[axis] / 2.0
        pts[sel, others[0]] = u[sel] * box.dims[others[0]]
        pts[sel, others[1]] = v[sel] * box.dims[others[1]]
    if box.yaw != 0.0:
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        x, y = pts[:, 0].copy(), pts[:, 1].copy()
        pts[:, 0] = c * x - s * y
        pts[:, 1] = s * x + c * y
    return pts + box.center


def _hull(box: OrientedBox) -> OrientedBox:
    """Axis-aligned bounding hull used for the overlap check during placement."""
    if box.yaw == 0.0:
        return box
    c, s = abs(math.cos(box.yaw)), abs(math.sin(box.yaw))
    w, l, h = box.dims
    return OrientedBox(box.center, np.array([c * w + s * l, s * w + c * l, h]), 0.0, box.class_id)


def generate_scene(cfg: SimConfig, seed) -> Scene:
    """Place non-overlapping boxes and sample their surfaces plus clutter.

    seed may be an int or an existing numpy Generator. Raises GenerationError
    if a box cannot be placed within cfg.placement_attempts tries.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_boxes = int(rng.integers(cfg.n_boxes_min, cfg.n_boxes_max + 1))
    half = cfg.arena_extent / 2.0
    boxes: list[OrientedBox] = []
    for _ in range(n_boxes):
        placed = False
        for _ in range(cfg.placement_attempts):
            dims = rng.uniform(cfg.dims_min, cfg.dims_max, size=3)
            dims[2] = min(dims[2], cfg.arena_height * 0.8)
            yaw = float(rng.uniform(-math.pi, math.pi)) if cfg.yawed else 0.0
            margin = float(np.max(dims[:2])) * (math.sqrt(2.0) if cfg.yawed else 1.0) / 2.0
            cx, cy = rng.uniform(-half + margin, half - margin, size=2)
            cz = float(rng.uniform(dims[2] / 2.0, cfg.arena_height - dims[2] / 2.0))
            cand = OrientedBox(np.array([cx, cy, cz]), dims, yaw, int(rng.integers(0, cfg.n_classes)))
            if all(aabb_iou(_hull(cand), _hull(b)) <= cfg.max_overlap_iou for b in boxes):
                boxes.append(cand)
                placed = True
                break
        if not placed:
            raise GenerationError(
                f"could not place box {len(boxes) + 1}/{n_boxes} within {cfg.placement_attempts} attempts"
            )
    clouds = [_sample_box_surface(b, cfg.points_per_box, rng) for b in boxes]
    if cfg.clutter_points:
        clutter = np.column_stack(
            [
                rng.uniform(-half, half, size=cfg.clutter_points),
                rng.uniform(-half, half, size=cfg.clutter_points),
                rng.uniform(0.0, cfg.arena_height, size=cfg.clutter_points),
            ]
        )
        clouds.append(clutter)
    return Scene(points=np.concatenate(clouds, axis=0), boxes=boxes, labeled=True)


# ---------------------------------------------------------------------------
# Per-voxel features


def extract_features(points: np.ndarray, voxel_size: float):
    """Group points by voxel and compute the 8-dim feature vector.

    Features per occupied voxel: [1, count / max count, mean offset from the
    voxel center (3, voxel units), per-axis point spread (3, voxel units)].

    Returns:
        (keys, features): (V, 3) int64 lex-sorted unique keys and (V, 8) floats.
    """
    keys_all = quantize_points(points, voxel_size)
    keys, inverse, counts = np.unique(keys_all, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    offsets = points / voxel_size - (keys_all + 0.5)
    sums = np.zeros((keys.shape[0], 3))
    sq_sums = np.zeros((keys.shape[0], 3))
    np.add.at(sums, inverse, offsets)
    np.add.at(sq_sums, inverse, offsets**2)
    mean = sums / counts[:, None]
    var = np.maximum(sq_sums / counts[:, None] - mean**2, 0.0)
    feats = np.empty((keys.shape[0], 8))
    feats[:, 0] = 1.0
    feats[:, 1] = counts / counts.max()
    feats[:, 2:5] = mean
    feats[:, 5:8] = np.sqrt(var)
    return keys, feats


# ---------------------------------------------------------------------------
# Mock predictor


def mock_predict(scene: Scene, cfg: SimConfig, noise_sigma: float, seed) -> PredictionGrid:
    """Ground-truth-derived predictions at every assigned occupied voxel.

    Deltas are the encoded assigned box plus N(0, noise_sigma) on all eight
    components; class logits are near-one-hot on the true class. Centerness
    is heuristic: the geometric mean of the two largest per-axis opposing
    face-distance ratios. Scene points live on box surfaces, so the ratio
    along the face normal is always tiny; ignoring the smallest axis marks
    face-centered voxels as confident and edge/corner voxels as not, which
    gives the confidence gates something meaningful to cut.
    noise_sigma=0 reproduces ground truth exactly under decoding.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keys, _ = extract_features(scene.points, cfg.voxel_size)
    targets = assign_targets(scene.boxes, keys, cfg.voxel_size, cfg.n_class_logits)
    a = targets.assigned
    n = int(np.sum(a))
    clean = targets.deltas[a]
    deltas = clean + rng.normal(0.0, noise_sigma, size=(n, 8)) if noise_sigma else clean
    lo, hi = np.minimum(clean[:, 0:6:2], clean[:, 1:6:2]), np.maximum(clean[:, 0:6:2], clean[:, 1:6:2])
    ratios = np.sort(lo / hi, axis=1)
    centerness = np.sqrt(ratios[:, 1] * ratios[:, 2])
    logits = np.zeros((n, cfg.n_class_logits))
    logits[np.arange(n), targets.class_ids[a]] = 6.0
    return PredictionGrid(cfg.voxel_size, keys[a], deltas, centerness, logits)


# ---------------------------------------------------------------------------
# Box-level prediction and evaluation


def predict_boxes(
    grid: PredictionGrid, filter_cfg: FilterConfig, nms_iou: float = _NMS_IOU, top_k: int = 256
) -> list[tuple[OrientedBox, float]]:
    """Turn a prediction grid into scored boxes: gate, decode, class-wise NMS.

    The anchor of each voxel is its center. Each voxel proposes its best
    object class; the background logit only competes inside the softmax, so
    background-dominated voxels rank low instead of disappearing. Only the
    top_k candidates by score enter NMS; an untrained model passes the gate
    at every voxel, and unbounded NMS there is quadratic. Returns (box,
    score) pairs, score = centerness * softmax probability of the class.
    """
    kept = filter_predictions(grid, filter_cfg)
    if len(kept) == 0:
        return []
    probs = softmax(kept.class_scores, axis=1)
    background = kept.class_scores.shape[1] - 1
    if background == 0:
        return []
    class_ids = np.argmax(probs[:, :background], axis=1)
    scores = kept.centerness * probs[np.arange(len(kept)), class_ids]
    keys, deltas = kept.keys, kept.deltas
    if len(kept) > top_k:
        order = np.lexsort((np.arange(len(kept)), -scores))[:top_k]
        keys, deltas = keys[order], deltas[order]
        class_ids, scores = class_ids[order], scores[order]
    anchors = (keys + 0.5) * kept.voxel_size
    d = deltas
    centers = anchors + np.column_stack(
        [(d[:, 0] - d[:, 1]) / 2.0, (d[:, 2] - d[:, 3]) / 2.0, (d[:, 4] - d[:, 5]) / 2.0]
    )
    dims = np.column_stack([d[:, 0] + d[:, 1], d[:, 2] + d[:, 3], d[:, 4] + d[:, 5]])
    # Model outputs guarantee positive extents (softplus), but mock noise can
    # push a face-distance sum negative; such candidates are not boxes.
    valid = np.flatnonzero(np.all(dims > 0.0, axis=1))
    centers, dims = centers[valid], dims[valid]
    class_ids, scores = class_ids[valid], scores[valid]
    out: list[tuple[OrientedBox, float]] = []
    for cls in range(background):
        sel = np.flatnonzero(class_ids == cls)
        if sel.size == 0:
            continue
        cls_scores = scores[sel]
        for j in nms_arrays(centers[sel], dims[sel], cls_scores, nms_iou):
            i = sel[j]
            out.append((OrientedBox(centers[i], dims[i], 0.0, cls), float(cls_scores[j])))
    return out


@dataclass(frozen=True)
class EvalMetrics:
    """Pooled recall (coverage) and mean average precision per IoU threshold."""

    coverage: dict[float, float]
    mean_ap: dict[float, float]
    ap_per_class: dict[float, dict[int, float]]


def _average_precision(tp_flags: np.ndarray, n_gt: int) -> float:
    """Continuous-interpolation AP from score-ordered TP flags."""
    if n_gt == 0:
        return 0.0
    if tp_flags.size == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, envelope):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def evaluate(
    predictions: list[list[tuple[OrientedBox, float]]],
    ground_truth: list[list[OrientedBox]],
    iou_thresholds: tuple[float, ...] = (0.25, 0.5),
) -> EvalMetrics:
    """Score scene-aligned predictions against ground truth.

    Coverage is the pooled recall over all objects: the fraction of GT boxes
    matched by some same-class prediction at the threshold. AP per class uses
    greedy score-descending matching and continuous interpolation; mAP
    averages over classes that appear in the ground truth.

    Raises UndefinedMetricError when the ground truth is empty.
    """
    if len(predictions) != len(ground_truth):
        raise ValueError("predictions and ground_truth must align scene by scene")
    n_gt_total = sum(len(g) for g in ground_truth)
    if n_gt_total == 0:
        raise UndefinedMetricError("metrics are undefined without ground-truth boxes")
    classes = sorted({b.class_id for g in ground_truth for b in g})
    coverage: dict[float, float] = {}
    mean_ap: dict[float, float] = {}
    ap_per_class: dict[float, dict[int, float]] = {}
    for thr in iou_thresholds:
        matched_total = 0
        ap_by_class: dict[int, float] = {}
        for cls in classes:
            n_gt_cls = sum(1 for g in ground_truth for b in g if b.class_id == cls)
            rows = []  # (score, scene_idx, pred_idx_in_scene, box)
            for si, preds in enumerate(predictions):
                for pi, (box, score) in enumerate(preds):
                    if box.class_id == cls:
                        rows.append((score, si, pi, box))
            rows.sort(key=lambda r: (-r[0], r[1], r[2]))
            used: set[tuple[int, int]] = set()
            flags = np.zeros(len(rows), dtype=bool)
            for i, (_, si, _, box) in enumerate(rows):
                best_iou, best_gt = 0.0, -1
                for gi, gt in enumerate(ground_truth[si]):
                    if gt.class_id != cls or (si, gi) in used:
                        continue
                    iou = aabb_iou(box, gt)
                    if iou > best_iou:
                        best_iou, best_gt = iou, gi
                if best_gt >= 0 and best_iou >= thr:
                    flags[i] = True
                    used.add((si, best_gt))
            matched_total += len(used)
            ap_by_class[cls] = _average_precision(flags, n_gt_cls)
        coverage[thr] = matched_total / n_gt_total
        ap_per_class[thr] = ap_by_class
        mean_ap[thr] = float(np.mean(list(ap_by_class.values()))) if ap_by_class else 0.0
    return EvalMetrics(coverage=coverage, mean_ap=mean_ap, ap_per_class=ap_per_class)


# ---------------------------------------------------------------------------
# Self-training loop


@dataclass
class TrainResult:
    """Final parameters plus the per-step trace (TRACE_COLUMNS rows)."""

    student_params: np.ndarray
    teacher_params: np.ndarray
    trace: list[dict]
    n_class_logits: int
    student_history: np.ndarray | None = None


def write_trace_csv(trace: list[dict], path) -> None:
    """Write trace rows with 9-significant-digit floats."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for row in trace:
            out = []
            for col in TRACE_COLUMNS:
                val = row[col]
                out.append(str(val) if isinstance(val, int) else f"{val:.9g}")
            writer.writerow(out)


def _proposal_pair_count(aligned: PredictionGrid, student: PredictionGrid, filter_cfg: FilterConfig) -> int:
    """Pairs produced by the proposal-level baseline on the same two grids."""
    teacher_props = predict_boxes(aligned, filter_cfg)
    student_props = predict_boxes(student, OPEN_GATE)
    if not teacher_props or not student_props:
        return 0
    return len(proposal_match([b for b, _ in teacher_props], [b for b, _ in student_props]))


def self_train(
    labeled_scenes: list[Scene],
    unlabeled_scenes: list[Scene],
    cfg: SimConfig,
    loss_cfg: LossConfig,
    filter_cfg: FilterConfig,
    steps: int,
    seed: int,
    *,
    use_qec: bool = True,
    disable_consistency: bool = False,
    alpha: float = 0.999,
    learning_rate: float = 0.2,
    labeled_per_step: int = 2,
    unlabeled_per_step: int = 2,
    eval_every: int = 25,
    sampler: TransformSampler | None = None,
    record_history: bool = False,
) -> TrainResult:
    """EMA self-training on synthetic scenes.

    Each step draws a batch of labeled and unlabeled scenes and a random
    transform per scene; the teacher sees the original cloud, the student the
    transformed one (with the closed-form quantization correction unless
    use_qec=False). Labeled scenes also supervise against the transformed
    ground truth. The student takes a plain gradient step; the teacher tracks
    it by EMA. The lattice commutativity invariant is checked exhaustively on
    the first batch. Aborts with RuntimeError if the loss goes non-finite.

    disable_consistency skips the teacher branch entirely (supervised-only
    baseline) while drawing identical random numbers, so loss traces are
    comparable bit for bit when the consistency weights are zero.
    """
    if steps < 1:
        raise ValueError("steps must be positive")
    if not labeled_scenes:
        raise ValueError("need at least one labeled scene")
    rng = np.random.default_rng(seed)
    sampler = sampler or cfg.transform_sampler
    n_logits = cfg.n_class_logits
    student = init_params(n_logits, rng)
    teacher = student.copy()
    history = [] if record_history else None
    trace: list[dict] = []
    last_eval = {"coverage25": 0.0, "map25": 0.0, "map50": 0.0}
    eval_pool = unlabeled_scenes if unlabeled_scenes else labeled_scenes

    # Untransformed clouds are voxelized identically every step, so teacher
    # and eval features are computed once per scene. Keyed by identity; the
    # input lists keep every scene alive for the duration of the call.
    feat_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def clean_features(scene: Scene) -> tuple[np.ndarray, np.ndarray]:
        got = feat_cache.get(id(scene))
        if got is None:
            got = extract_features(scene.points, cfg.voxel_size)
            feat_cache[id(scene)] = got
        return got

    for step in range(steps):
        step_fraction = step / steps
        batch_scenes: list[tuple[Scene, bool]] = []
        idx = rng.integers(0, len(labeled_scenes), size=min(labeled_per_step, len(labeled_scenes)))
        batch_scenes.extend((labeled_scenes[i], True) for i in idx)
        if unlabeled_scenes and unlabeled_per_step:
            idx = rng.integers(0, len(unlabeled_scenes), size=unlabeled_per_step)
            batch_scenes.extend((unlabeled_scenes[i], False) for i in idx)

        items: list[SceneBatch] = []
        pairs_dense = 0
        pairs_proposal = 0
        for scene, labeled in batch_scenes:
            t = sampler.sample(rng)
            if use_qec:
                student_points = apply_with_qec(scene.points, t, cfg.voxel_size)
                if step == 0:
                    moved = quantize_points(student_points, cfg.voxel_size)
                    expected = map_anchors(quantize_points(scene.points, cfg.voxel_size), t, cfg.voxel_size)
                    if not np.array_equal(moved, expected):
                        bad = int(np.flatnonzero(np.any(moved != expected, axis=1))[0])
                        raise RuntimeError(
                            f"lattice commutativity violated for point {bad}: "
                            f"{moved[bad].tolist()} != {expected[bad].tolist()}"
                        )
            else:
                student_points = apply_transform_points(scene.points, t)
            s_keys, s_feats = extract_features(student_points, cfg.voxel_size)
            targets = None
            if labeled:
                moved_boxes = [transform_box(b, t) for b in scene.boxes]
                targets = assign_targets(moved_boxes, s_keys, cfg.voxel_size, n_logits)
            aligned = None
            if not disable_consistency:
                t_keys, t_feats = clean_features(scene)
                teacher_grid = model_forward(teacher, t_keys, t_feats, cfg.voxel_size, n_logits)
                aligned = align_teacher(teacher_grid, t)
                student_grid = model_forward(student, s_keys, s_feats, cfg.voxel_size, n_logits)
                pairs_dense += len(dense_match(aligned, student_grid, filter_cfg))
                pairs_proposal += _proposal_pair_count(aligned, student_grid, filter_cfg)
            items.append(SceneBatch(s_keys, s_feats, cfg.voxel_size, targets, aligned))

        batch = TrainingBatch(scenes=items, step_fraction=step_fraction, filter_cfg=filter_cfg)
        sup_loss, cons_loss, grad = losses_and_gradient(student, batch, loss_cfg, n_logits)
        if not (math.isfinite(sup_loss) and math.isfinite(cons_loss) and np.all(np.isfinite(grad))):
            raise RuntimeError(
                f"training diverged at step {step}: sup={sup_loss}, cons={cons_loss}, "
                f"|grad|={float(np.max(np.abs(grad))) if grad.size else 0.0}"
            )
        student = student - learning_rate * grad
        teacher = ema_update(teacher, student, alpha)
        if history is not None:
            history.append(student.copy())

        if step % eval_every == 0 or step == steps - 1:
            preds = []
            for scene in eval_pool:
                keys, feats = clean_features(scene)
                grid = model_forward(teacher, keys, feats, cfg.voxel_size, n_logits)
                preds.append(predict_boxes(grid, OPEN_GATE))
            try:
                metrics = evaluate(preds, [s.boxes for s in eval_pool])
                last_eval = {
                    "coverage25": metrics.coverage[0.25],
                    "map25": metrics.mean_ap[0.25],
                    "map50": metrics.mean_ap[0.5],
                }
            except UndefinedMetricError:
                pass
        n_scenes = max(len(batch_scenes), 1)
        trace.append(
            {
                "step": step,
                "sup_loss": sup_loss,
                "cons_loss": cons_loss,
                "warmup_weight": warmup_weight(step_fraction, loss_cfg.warmup_fraction),
                "pairs_dense": pairs_dense / n_scenes,
                "pairs_proposal": pairs_proposal / n_scenes,
                **last_eval,
            }
        )

    return TrainResult(
        student_params=student,
        teacher_params=teacher,
        trace=trace,
        n_class_logits=n_logits,
        student_history=np.stack(history) if history else None,
    )


def held_out_regression_error(params: np.ndarray, scenes: list[Scene], cfg: SimConfig) -> float:
    """Mean absolute face-distance error at assigned voxels on clean inputs."""
    errors = []
    for scene in scenes:
        keys, feats = extract_features(scene.points, cfg.voxel_size)
        grid = model_forward(params, keys, feats, cfg.voxel_size, cfg.n_class_logits)
        targets = assign_targets(scene.boxes, keys, cfg.voxel_size, cfg.n_class_logits)
        a = targets.assigned
        if np.any(a):
            errors.append(float(np.mean(np.abs(grid.deltas[a, :6] - targets.deltas[a, :6]))))
    if not errors:
        raise ValueError("no assigned voxels in any held-out scene")
    return float(np.mean(errors))


# ---------------------------------------------------------------------------
# Scene serialization


def save_scene(scene: Scene, path) -> None:
    """Write the JSON schema; floats keep full precision so loads round-trip bit-exactly."""
    data = {
        "points": [[float(v) for v in row] for row in scene.points],
        "boxes": [
            {
                "center": [float(v) for v in b.center],
                "dims": [float(v) for v in b.dims],
                "yaw": float(b.yaw),
                "class": int(b.class_id),
            }
            for b in scene.boxes
        ],
        "labeled": bool(scene.labeled),
    }
    with open(path, "w") as fh:
        json.dump(data, fh)
        fh.write("\n")


def _check_triple(value, where: str) -> list[float]:
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise SceneFormatError(f"{where} must be a list of 3 numbers")
    out = []
    for i, v in enumerate(value):
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
            raise SceneFormatError(f"{where}[{i}] is not a finite number: {v!r}")
        out.append(float(v))
    return out


def _parse_boxes(raw, where: str) -> list[OrientedBox]:
    if not isinstance(raw, list):
        raise SceneFormatError(f"{where} must be a list")
    boxes = []
    for i, entry in enumerate(raw):
        loc = f"{where}[{i}]"
        if not isinstance(entry, dict):
            raise SceneFormatError(f"{loc} must be an object")
        center = _check_triple(entry.get("center"), f"{loc}.center")
        dims = _check_triple(entry.get("dims"), f"{loc}.dims")
        if any(d <= 0 for d in dims):
            raise SceneFormatError(f"{loc}.dims must be strictly positive")
        yaw = entry.get("yaw", 0.0)
        if not isinstance(yaw, (int, float)) or isinstance(yaw, bool) or not math.isfinite(yaw):
            raise SceneFormatError(f"{loc}.yaw is not a finite number: {yaw!r}")
        cls = entry.get("class", 0)
        if not isinstance(cls, int) or isinstance(cls, bool) or cls < 0:
            raise SceneFormatError(f"{loc}.class must be a nonnegative integer")
        boxes.append(OrientedBox(np.array(center), np.array(dims), float(yaw), cls))
    return boxes


def load_scene(path) -> Scene:
    """Read a scene from JSON, or from an ASCII XYZ file with a JSON sidecar.

    XYZ files hold one "x y z" triple per line; boxes come from a sidecar
    named like the file with the extension replaced by .json (absent sidecar
    means an unlabeled scene). Any malformed value raises SceneFormatError
    naming the offending line or field.
    """
    spath = str(path)
    if spath.endswith(".xyz"):
        return _load_xyz(spath)
    with open(spath) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SceneFormatError(f"{spath}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise SceneFormatError(f"{spath}: top level must be an object")
    raw_points = data.get("points")
    if not isinstance(raw_points, list):
        raise SceneFormatError(f"{spath}: points must be a list")
    points = np.empty((len(raw_points), 3))
    for i, row in enumerate(raw_points):
        points[i] = _check_triple(row, f"points[{i}]")
    if "boxes" in data:
        boxes = _parse_boxes(data["boxes"], "boxes")
        labeled = bool(data.get("labeled", bool(boxes)))
    else:
        boxes, labeled = [], False
    return Scene(points=points, boxes=boxes, labeled=labeled)


def _load_xyz(spath: str) -> Scene:
    rows = []
    with open(spath) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            parts = stripped.split()
            if len(parts) != 3:
                raise SceneFormatError(f"{spath}:{lineno}: expected 3 values, got {len(parts)}")
            try:
                triple = [float(p) for p in parts]
            except ValueError as exc:
                raise SceneFormatError(f"{spath}:{lineno}: not a number: {exc}") from exc
            if not all(math.isfinite(v) for v in triple):
                raise SceneFormatError(f"{spath}:{lineno}: non-finite coordinate")
            rows.append(triple)
    sidecar = spath[: -len(".xyz")] + ".json"
    boxes: list[OrientedBox] = []
    labeled = False
    try:
        with open(sidecar) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        data = None
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{sidecar}: invalid JSON: {exc}") from exc
    if data is not None:
        if not isinstance(data, dict):
            raise SceneFormatError(f"{sidecar}: top level must be an object")
        boxes = _parse_boxes(data.get("boxes", []), "boxes")
        labeled = bool(data.get("labeled", bool(boxes)))
    return Scene(points=np.array(rows).reshape(-1, 3), boxes=boxes, labeled=labeled)

"""Losses, target assignment, EMA teacher update, and the toy linear detector
used to exercise the self-training loop end to end.

The detector is deliberately tiny: per-voxel linear heads over an 8-dim
feature vector, softplus-positive face distances, sigmoid centerness, raw
class logits. Small enough that the analytic gradient fits in one file and
can be checked against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .matching import FilterConfig, MatchSet, PredictionGrid, _find_rows, softmax
from .box_codec import OrientedBox, encode_batch

__all__ = [
    "FEATURE_DIM",
    "LossConfig",
    "SceneBatch",
    "Targets",
    "TrainingBatch",
    "assign_targets",
    "batch_losses",
    "centerness_loss",
    "consistency_loss",
    "ema_update",
    "gradient",
    "huber_box_loss",
    "init_params",
    "losses_and_gradient",
    "model_forward",
    "params_dim",
    "semantic_loss",
    "supervised_loss",
    "warmup_weight",
]

FEATURE_DIM = 8
_KL_EPS = 1e-8
_PROB_TINY = 1e-15


@dataclass(frozen=True)
class LossConfig:
    """Loss shape and weighting knobs.

    tau_box is the Huber corner; the lambdas weight the box / centerness /
    semantic consistency terms; warmup_fraction is the share of training over
    which the consistency weight ramps up to 1.
    """

    tau_box: float = 0.30
    lambda_box: float = 1.00
    lambda_center: float = 0.25
    lambda_semantic: float = 0.50
    warmup_fraction: float = 0.3

    def __post_init__(self):
        if self.tau_box <= 0.0:
            raise ValueError(f"tau_box must be positive, got {self.tau_box}")
        for name in ("lambda_box", "lambda_center", "lambda_semantic"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 < self.warmup_fraction <= 1.0:
            raise ValueError(f"warmup_fraction must lie in (0, 1], got {self.warmup_fraction}")


def huber_box_loss(delta_diff, tau_box: float) -> float:
    """Huber penalty averaged over the 8 delta components.

    Quadratic x^2/2 below tau_box, linear tau*(|x| - tau/2) above; value and
    slope agree at the corner.
    """
    diff = np.asarray(delta_diff, dtype=np.float64)
    if diff.shape != (8,):
        raise ValueError(f"delta_diff must have shape (8,), got {diff.shape}")
    return float(np.mean(_huber_vec(diff, tau_box)))


def _huber_vec(diff: np.ndarray, tau: float) -> np.ndarray:
    a = np.abs(diff)
    return np.where(a <= tau, 0.5 * diff * diff, tau * (a - 0.5 * tau))


def centerness_loss(c: float, c_target: float) -> float:
    """Squared error between two centerness values."""
    d = float(c) - float(c_target)
    return d * d


def semantic_loss(target_probs, pred_probs) -> float:
    """KL divergence sum t_c log(t_c / p_c), target distribution first.

    Probabilities are floored at 1e-8 inside the logs; exact-zero target
    entries contribute nothing.
    """
    t = np.asarray(target_probs, dtype=np.float64)
    p = np.asarray(pred_probs, dtype=np.float64)
    if t.shape != p.shape:
        raise ValueError("distributions must share a shape")
    logs = np.log(np.maximum(t, _KL_EPS)) - np.log(np.maximum(p, _KL_EPS))
    return float(np.sum(np.where(t > 0.0, t * logs, 0.0)))


def warmup_weight(step_fraction: float, warmup_fraction: float = 0.3) -> float:
    """Consistency ramp exp(-5 (1 - r)^2), r = min(step_fraction / warmup_fraction, 1)."""
    if step_fraction < 0.0:
        raise ValueError(f"step_fraction must be nonnegative, got {step_fraction}")
    if warmup_fraction <= 0.0:
        raise ValueError(f"warmup_fraction must be positive, got {warmup_fraction}")
    r = min(step_fraction / warmup_fraction, 1.0)
    return math.exp(-5.0 * (1.0 - r) ** 2)


def consistency_loss(matches: MatchSet, cfg: LossConfig, step_fraction: float) -> float:
    """Warmup-weighted mean over matched pairs of the three-term pair loss.

    Per pair: lambda_box * Huber(student deltas - teacher deltas)
            + lambda_center * (student centerness - teacher centerness)^2
            + lambda_semantic * KL(teacher softmax || student softmax).
    Teacher entries are targets, never penalized. Empty match set -> 0.
    """
    return warmup_weight(step_fraction, cfg.warmup_fraction) * _consistency_raw(matches, cfg)


def _consistency_raw(matches: MatchSet, cfg: LossConfig) -> float:
    n = len(matches)
    if n == 0:
        return 0.0
    diff = matches.student_deltas - matches.teacher_deltas
    box = np.mean(_huber_vec(diff, cfg.tau_box), axis=1)
    center = (matches.student_centerness - matches.teacher_centerness) ** 2
    t_probs = softmax(matches.teacher_scores, axis=1)
    s_probs = softmax(matches.student_scores, axis=1)
    logs = np.log(np.maximum(t_probs, _KL_EPS)) - np.log(np.maximum(s_probs, _KL_EPS))
    kl = np.sum(np.where(t_probs > 0.0, t_probs * logs, 0.0), axis=1)
    per_pair = cfg.lambda_box * box + cfg.lambda_center * center + cfg.lambda_semantic * kl
    return float(np.mean(per_pair))


def ema_update(teacher_params: np.ndarray, student_params: np.ndarray, alpha: float) -> np.ndarray:
    """Exponential moving average: alpha * teacher + (1 - alpha) * student."""
    t = np.asarray(teacher_params, dtype=np.float64)
    s = np.asarray(student_params, dtype=np.float64)
    if t.shape != s.shape:
        raise ValueError("parameter vectors must share a shape")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * t + (1.0 - alpha) * s


# ---------------------------------------------------------------------------
# Toy linear detector


def params_dim(n_class_logits: int) -> int:
    """Flat parameter count: one linear head row per output."""
    n_out = 9 + int(n_class_logits)
    return n_out * FEATURE_DIM + n_out


def init_params(n_class_logits: int, rng: np.random.Generator, scale: float = 0.01) -> np.ndarray:
    """Small random weights, zero biases."""
    n_out = 9 + int(n_class_logits)
    w = rng.normal(0.0, scale, size=(n_out, FEATURE_DIM))
    b = np.zeros(n_out)
    return np.concatenate([w.ravel(), b])


def _unpack(params: np.ndarray, n_class_logits: int) -> tuple[np.ndarray, np.ndarray]:
    params = np.asarray(params, dtype=np.float64)
    n_out = 9 + int(n_class_logits)
    expect = n_out * FEATURE_DIM + n_out
    if params.shape != (expect,):
        raise ValueError(f"params must have shape ({expect},) for {n_class_logits} class logits, got {params.shape}")
    w = params[: n_out * FEATURE_DIM].reshape(n_out, FEATURE_DIM)
    b = params[n_out * FEATURE_DIM :]
    return w, b


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _heads(params: np.ndarray, features: np.ndarray, n_class_logits: int):
    """Raw linear outputs split into (z_box, z_center, z_logits)."""
    w, b = _unpack(params, n_class_logits)
    z = features @ w.T + b
    return z[:, :8], z[:, 8], z[:, 9:]


def model_forward(
    params: np.ndarray, keys, features, voxel_size: float, n_class_logits: int
) -> PredictionGrid:
    """Run the linear heads over per-voxel features.

    Args:
        params: flat parameter vector (see params_dim).
        keys: (V, 3) integer voxel keys.
        features: (V, FEATURE_DIM) per-voxel features.
        voxel_size: lattice pitch in meters.
        n_class_logits: class-logit count (object classes plus background).

    Returns:
        PredictionGrid with softplus face distances, raw log-ratio pair,
        sigmoid centerness, and raw class logits.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != FEATURE_DIM:
        raise ValueError(f"features must have shape (V, {FEATURE_DIM}), got {features.shape}")
    z_box, z_center, z_logits = _heads(params, features, n_class_logits)
    deltas = np.concatenate([_softplus(z_box[:, :6]), z_box[:, 6:8]], axis=1)
    return PredictionGrid(voxel_size, keys, deltas, _sigmoid(z_center), z_logits)


# ---------------------------------------------------------------------------
# Ground-truth assignment


@dataclass(frozen=True)
class Targets:
    """Per-voxel supervision aligned with a prediction grid's key order.

    Attributes:
        deltas: (V, 8) encoded assigned box (rows meaningful where assigned).
        centerness: (V,) cube-root min/max face-distance ratio target.
        class_ids: (V,) assigned class, background id where unassigned.
        assigned: (V,) bool mask.
        n_class_logits: class-logit count; background is the last index.
    """

    deltas: np.ndarray
    centerness: np.ndarray
    class_ids: np.ndarray
    assigned: np.ndarray
    n_class_logits: int

    def __len__(self) -> int:
        return self.assigned.shape[0]


def assign_targets(boxes: list[OrientedBox], keys, voxel_size: float, n_class_logits: int) -> Targets:
    """Assign each voxel anchor to the smallest containing box and encode it.

    The anchor is the voxel center. Containment means all six encoded face
    distances are positive (the anchor lies in the box's intrinsic hull);
    ties on volume break toward the earlier box in the list. The centerness
    target is the cube root of the product over the three axes of the
    min/max ratio of the opposing face distances.
    """
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    n = keys.shape[0]
    anchors = (keys + 0.5) * float(voxel_size)
    deltas = np.zeros((n, 8))
    centerness = np.zeros(n)
    class_ids = np.full(n, int(n_class_logits) - 1, dtype=np.int64)
    assigned = np.zeros(n, dtype=bool)
    best_volume = np.full(n, np.inf)

    for box in boxes:
        if not 0 <= box.class_id < n_class_logits - 1:
            raise ValueError(
                f"box class_id {box.class_id} out of range for {n_class_logits} logits (last is background)"
            )
        enc = encode_batch(box, anchors)
        inside = np.all(enc[:, :6] > 0.0, axis=1)
        take = inside & (box.volume < best_volume)
        if not np.any(take):
            continue
        deltas[take] = enc[take]
        class_ids[take] = box.class_id
        assigned[take] = True
        best_volume[take] = box.volume
        lo = np.minimum(enc[take, 0:6:2], enc[take, 1:6:2])
        hi = np.maximum(enc[take, 0:6:2], enc[take, 1:6:2])
        centerness[take] = np.cbrt(np.prod(lo / hi, axis=1))

    return Targets(deltas, centerness, class_ids, assigned, int(n_class_logits))


# ---------------------------------------------------------------------------
# Supervised loss


def _virtual_iou_terms(d_s: np.ndarray, d_t: np.ndarray):
    """Per-voxel IoU of the two encodings' axis-aligned hulls around a shared anchor.

    Both hulls contain the anchor (positive face distances), so the overlap
    per axis is min(d_hi) + min(d_lo) and always positive.
    """
    o = np.minimum(d_s[:, 0:6:2], d_t[:, 0:6:2]) + np.minimum(d_s[:, 1:6:2], d_t[:, 1:6:2])
    inter = np.prod(o, axis=1)
    vol_s = np.prod(d_s[:, 0:6:2] + d_s[:, 1:6:2], axis=1)
    vol_t = np.prod(d_t[:, 0:6:2] + d_t[:, 1:6:2], axis=1)
    union = vol_s + vol_t - inter
    return inter, union, o, vol_s


def _binary_kl(t: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Bernoulli KL(t || p): cross entropy minus target entropy, zero iff p == t."""
    p = np.clip(p, _PROB_TINY, 1.0 - _PROB_TINY)
    term1 = np.where(t > 0.0, t * (np.log(np.maximum(t, _PROB_TINY)) - np.log(p)), 0.0)
    term0 = np.where(t < 1.0, (1.0 - t) * (np.log(np.maximum(1.0 - t, _PROB_TINY)) - np.log(1.0 - p)), 0.0)
    return term1 + term0


def _cross_entropy(logits: np.ndarray, class_ids: np.ndarray) -> np.ndarray:
    """logsumexp(z) - z[target], stable under large logit gaps."""
    zmax = logits.max(axis=1)
    lse = zmax + np.log(np.sum(np.exp(logits - zmax[:, None]), axis=1))
    return lse - logits[np.arange(logits.shape[0]), class_ids]


def supervised_loss(grid: PredictionGrid, targets: Targets, cfg: LossConfig) -> float:
    """Labeled-scene loss: IoU + centerness + classification.

    Assigned voxels contribute 1 - IoU between the predicted and target hulls
    plus a Bernoulli-KL centerness term; every voxel contributes cross entropy
    toward its class (background where unassigned). Zero iff predictions match
    targets exactly (classification saturates to zero at one-hot softmax).
    """
    if len(grid) != len(targets):
        raise ValueError(f"grid has {len(grid)} voxels but targets cover {len(targets)}")
    if grid.class_scores.shape[1] != targets.n_class_logits:
        raise ValueError("class-logit count mismatch between grid and targets")
    a = targets.assigned
    total = float(np.mean(_cross_entropy(grid.class_scores, targets.class_ids)))
    if np.any(a):
        inter, union, _, _ = _virtual_iou_terms(grid.deltas[a], targets.deltas[a])
        total += float(np.mean(1.0 - inter / union))
        total += float(np.mean(_binary_kl(targets.centerness[a], grid.centerness[a])))
    return total


# ---------------------------------------------------------------------------
# Batch gradient


@dataclass(frozen=True)
class SceneBatch:
    """One scene's prepared inputs for a training step.

    keys/features describe the student branch's occupied voxels (keys must be
    lex-sorted, as produced by the harness); targets supervise labeled scenes;
    teacher_aligned, when present, is the transform-aligned teacher grid the
    student is matched against.
    """

    keys: np.ndarray
    features: np.ndarray
    voxel_size: float
    targets: Targets | None = None
    teacher_aligned: PredictionGrid | None = None


@dataclass(frozen=True)
class TrainingBatch:
    """A step's scenes plus the training-progress fraction for warmup."""

    scenes: list[SceneBatch]
    step_fraction: float
    filter_cfg: FilterConfig = FilterConfig()


def _match_rows(teacher: PredictionGrid, student_keys: np.ndarray, cfg: FilterConfig):
    """Row indices (teacher, student) of confidence-gated shared keys."""
    s_idx = _find_rows(student_keys, teacher.keys)
    shared = s_idx >= 0
    t_idx = np.arange(len(teacher))[shared]
    s_idx = s_idx[shared]
    if len(t_idx):
        max_prob = softmax(teacher.class_scores[t_idx], axis=1).max(axis=1)
        ok = (teacher.centerness[t_idx] > cfg.tau_center) & (max_prob > cfg.tau_cls)
        t_idx, s_idx = t_idx[ok], s_idx[ok]
    return t_idx, s_idx


def _scene_forward(params, scene: SceneBatch, cfg: LossConfig, filter_cfg: FilterConfig, n_class_logits: int):
    """Forward pass plus per-scene losses and d(loss)/d(z), teacher and targets constant.

    Returns (sup_loss, cons_raw, dz_sup, dz_cons) where the dz arrays are the
    gradients of the per-scene losses with respect to the raw head outputs.
    """
    features = np.asarray(scene.features, dtype=np.float64)
    z_box, z_center, z_logits = _heads(params, features, n_class_logits)
    sp6 = _softplus(z_box[:, :6])
    sig6 = _sigmoid(z_box[:, :6])  # d softplus / dz
    deltas = np.concatenate([sp6, z_box[:, 6:8]], axis=1)
    p_ctr = _sigmoid(z_center)
    n_vox = features.shape[0]
    n_out = 9 + n_class_logits
    dz_sup = np.zeros((n_vox, n_out))
    dz_cons = np.zeros((n_vox, n_out))
    sup = 0.0
    cons = 0.0

    if scene.targets is not None:
        t = scene.targets
        if len(t) != n_vox:
            raise ValueError("targets do not cover the scene's voxels")
        probs = softmax(z_logits, axis=1)
        onehot = np.zeros_like(probs)
        onehot[np.arange(n_vox), t.class_ids] = 1.0
        sup += float(np.mean(_cross_entropy(z_logits, t.class_ids)))
        dz_sup[:, 9:] += (probs - onehot) / n_vox
        a = t.assigned
        n_a = int(np.sum(a))
        if n_a:
            d_s, d_t = deltas[a], t.deltas[a]
            inter, union, o, vol_s = _virtual_iou_terms(d_s, d_t)
            sup += float(np.mean(1.0 - inter / union))
            # d(1 - I/U)/dd = -(dI * U - I * dU) / U^2, dU = dvol_s - dI.
            other_o = inter[:, None] / o  # product of the two other axes' overlaps
            side = d_s[:, 0:6:2] + d_s[:, 1:6:2]
            other_v = vol_s[:, None] / side
            grad6 = np.zeros_like(d_s[:, :6])
            for axis in range(3):
                for half in range(2):
                    col = 2 * axis + half
                    di = np.where(d_s[:, col] <= d_t[:, col], other_o[:, axis], 0.0)
                    dv = other_v[:, axis]
                    du = dv - di
                    grad6[:, col] = -(di * union - inter * du) / union**2
            dz_sup[a, :6] += grad6 * sig6[a] / n_a
            # Bernoulli KL through the sigmoid collapses to (p - t).
            dz_sup[a, 8] += (p_ctr[a] - t.centerness[a]) / n_a
            sup += float(np.mean(_binary_kl(t.centerness[a], p_ctr[a])))

    if scene.teacher_aligned is not None:
        teacher = scene.teacher_aligned
        t_idx, s_idx = _match_rows(teacher, np.asarray(scene.keys, dtype=np.int64), filter_cfg)
        n_pairs = len(t_idx)
        if n_pairs:
            # Student rows in a match set are unique, so plain fancy-index
            # accumulation is safe.
            diff = deltas[s_idx] - teacher.deltas[t_idx]
            cons += cfg.lambda_box * float(np.mean(_huber_vec(diff, cfg.tau_box)))
            dbox = cfg.lambda_box * np.clip(diff, -cfg.tau_box, cfg.tau_box) / (8.0 * n_pairs)
            dz_cons[s_idx, :6] += dbox[:, :6] * sig6[s_idx]
            dz_cons[s_idx, 6:8] += dbox[:, 6:8]

            c_diff = p_ctr[s_idx] - teacher.centerness[t_idx]
            cons += cfg.lambda_center * float(np.mean(c_diff**2))
            dz_cons[s_idx, 8] += cfg.lambda_center * 2.0 * c_diff * p_ctr[s_idx] * (1.0 - p_ctr[s_idx]) / n_pairs

            t_probs = softmax(teacher.class_scores[t_idx], axis=1)
            s_probs = softmax(z_logits[s_idx], axis=1)
            logs = np.log(np.maximum(t_probs, _KL_EPS)) - np.log(np.maximum(s_probs, _KL_EPS))
            cons += cfg.lambda_semantic * float(np.mean(np.sum(np.where(t_probs > 0.0, t_probs * logs, 0.0), axis=1)))
            dz_cons[s_idx, 9:] += cfg.lambda_semantic * (s_probs - t_probs) / n_pairs

    return sup, cons, dz_sup, dz_cons


def _batch_pass(params, batch: TrainingBatch, cfg: LossConfig, n_class_logits: int):
    """Total supervised/consistency losses and the flat gradient of
    sup + warmup * cons with respect to params."""
    params = np.asarray(params, dtype=np.float64)
    labeled = [s for s in batch.scenes if s.targets is not None]
    n_labeled = max(len(labeled), 1)
    n_scenes = max(len(batch.scenes), 1)
    w_ramp = warmup_weight(min(batch.step_fraction, 1.0), cfg.warmup_fraction)

    n_out = 9 + n_class_logits
    grad_w = np.zeros((n_out, FEATURE_DIM))
    grad_b = np.zeros(n_out)
    sup_total = 0.0
    cons_total = 0.0
    for scene in batch.scenes:
        sup, cons, dz_sup, dz_cons = _scene_forward(params, scene, cfg, batch.filter_cfg, n_class_logits)
        sup_total += sup / n_labeled
        cons_total += cons / n_scenes
        dz = dz_sup / n_labeled + (w_ramp / n_scenes) * dz_cons
        feats = np.asarray(scene.features, dtype=np.float64)
        grad_w += dz.T @ feats
        grad_b += dz.sum(axis=0)
    return sup_total, cons_total, np.concatenate([grad_w.ravel(), grad_b])


def batch_losses(params, batch: TrainingBatch, cfg: LossConfig, n_class_logits: int) -> tuple[float, float]:
    """(supervised, raw consistency) losses for a batch; consistency is
    reported before the warmup weight is applied."""
    sup, cons, _ = _batch_pass(params, batch, cfg, n_class_logits)
    return sup, cons


def losses_and_gradient(params, batch: TrainingBatch, cfg: LossConfig, n_class_logits: int):
    """(supervised, raw consistency, gradient) in a single pass."""
    return _batch_pass(params, batch, cfg, n_class_logits)


def gradient(params, batch: TrainingBatch, cfg: LossConfig, n_class_logits: int) -> np.ndarray:
    """Analytic gradient of supervised + warmup * consistency w.r.t. params."""
    _, _, grad = _batch_pass(params, batch, cfg, n_class_logits)
    return grad

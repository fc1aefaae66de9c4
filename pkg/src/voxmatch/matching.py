"""Dense voxel-anchor matching between a teacher and a student prediction grid.

The teacher predicts on the original cloud, the student on the transformed
one. Aligning the teacher grid (keys through the lattice-level transform map,
deltas through the exact quarter-turn matrix) makes the two grids share a key
space, and every shared key yields exactly one teacher-student pair: matching
is a bijection on the key intersection, no heuristic assignment involved.
Pairs are kept only where the teacher is confident, so filtering commutes
with matching.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .box_codec import _YAW_ATOL, BoxDeltas, OrientedBox, delta_transform_matrix
from .voxel_geometry import Transform, map_anchors

__all__ = [
    "FilterConfig",
    "MatchSet",
    "MatchingError",
    "Prediction",
    "PredictionGrid",
    "align_teacher",
    "dense_match",
    "filter_predictions",
    "nms",
    "nms_arrays",
    "proposal_match",
    "softmax",
]


@dataclass(frozen=True)
class Prediction:
    """One voxel's raw head outputs: box deltas, centerness, class logits."""

    deltas: BoxDeltas
    centerness: float
    class_scores: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.class_scores, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "class_scores", scores)
        object.__setattr__(self, "centerness", float(self.centerness))


class MatchingError(ValueError):
    """Raised for structurally invalid matching inputs."""


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max subtracted before exponentiation)."""
    arr = np.asarray(logits, dtype=np.float64)
    shifted = arr - np.max(arr, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=axis, keepdims=True)


@dataclass(frozen=True)
class FilterConfig:
    """Teacher-side confidence gate for pseudo-label pairs.

    A pair survives iff the teacher's centerness exceeds tau_center and its
    max softmax class probability exceeds tau_cls. Student-side confidence is
    never consulted.
    """

    tau_center: float = 0.40
    tau_cls: float = 0.20

    def __post_init__(self):
        for name, value in (("tau_center", self.tau_center), ("tau_cls", self.tau_cls)):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")


def _lex_order(keys: np.ndarray) -> np.ndarray:
    return np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))


class PredictionGrid:
    """Sparse per-voxel predictions, keyed by integer voxel keys.

    Stored as parallel arrays sorted lexicographically by key, so iteration
    order is deterministic regardless of construction order.
    """

    def __init__(self, voxel_size, keys, deltas, centerness, class_scores):
        self.voxel_size = float(voxel_size)
        if self.voxel_size <= 0.0:
            raise ValueError(f"voxel_size must be positive, got {voxel_size}")
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
        deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 8)
        centerness = np.asarray(centerness, dtype=np.float64).reshape(-1)
        class_scores = np.asarray(class_scores, dtype=np.float64)
        if class_scores.ndim != 2:
            raise ValueError(f"class_scores must be 2D, got shape {class_scores.shape}")
        n = keys.shape[0]
        if not (deltas.shape[0] == centerness.shape[0] == class_scores.shape[0] == n):
            raise ValueError("grid arrays disagree on entry count")
        order = _lex_order(keys)
        keys = keys[order]
        if n > 1 and np.any(np.all(keys[1:] == keys[:-1], axis=1)):
            raise ValueError("duplicate voxel keys in grid")
        self.keys = keys
        self.deltas = deltas[order]
        self.centerness = centerness[order]
        self.class_scores = class_scores[order]

    @classmethod
    def from_entries(cls, voxel_size: float, entries) -> "PredictionGrid":
        """Build from a mapping of key tuple -> Prediction."""
        items = list(entries.items())
        n_classes = len(items[0][1].class_scores) if items else 0
        keys = np.array([k for k, _ in items], dtype=np.int64).reshape(-1, 3)
        deltas = np.array([p.deltas.values for _, p in items], dtype=np.float64).reshape(-1, 8)
        centerness = np.array([p.centerness for _, p in items], dtype=np.float64)
        scores = np.array([p.class_scores for _, p in items], dtype=np.float64).reshape(-1, n_classes)
        return cls(voxel_size, keys, deltas, centerness, scores)

    def __len__(self) -> int:
        return self.keys.shape[0]

    def key_tuples(self) -> list[tuple[int, int, int]]:
        return [tuple(int(v) for v in row) for row in self.keys]

    def get(self, key) -> Prediction | None:
        row = np.asarray(key, dtype=np.int64).reshape(1, 3)
        idx = _find_rows(self.keys, row)[0]
        if idx < 0:
            return None
        return Prediction(
            deltas=BoxDeltas(self.deltas[idx].copy()),
            centerness=float(self.centerness[idx]),
            class_scores=self.class_scores[idx].copy(),
        )

    def items(self):
        for i in range(len(self)):
            yield (
                tuple(int(v) for v in self.keys[i]),
                Prediction(
                    deltas=BoxDeltas(self.deltas[i].copy()),
                    centerness=float(self.centerness[i]),
                    class_scores=self.class_scores[i].copy(),
                ),
            )


def _pack_keys(keys: np.ndarray) -> np.ndarray:
    """View (N, 3) int64 rows as void scalars for set operations."""
    arr = np.ascontiguousarray(keys, dtype=np.int64)
    return arr.view([("", np.int64)] * 3).reshape(-1)


def _find_rows(haystack: np.ndarray, needles: np.ndarray) -> np.ndarray:
    """Index of each needle row in lex-sorted haystack, -1 if absent."""
    if haystack.shape[0] == 0:
        return np.full(needles.shape[0], -1, dtype=np.int64)
    hs = _pack_keys(haystack)
    nd = _pack_keys(needles)
    pos = np.searchsorted(hs, nd)
    pos = np.minimum(pos, hs.shape[0] - 1)
    found = hs[pos] == nd
    return np.where(found, pos, -1)


def align_teacher(grid: PredictionGrid, t: Transform) -> PredictionGrid:
    """Carry a teacher grid through a transform.

    Keys move by the lattice-level map; deltas move by the exact quarter-turn
    matrix; centerness and class scores are copied bit-identically (confidence
    is transform-invariant). Key collisions after mapping are impossible (the
    lattice map is a bijection), so a collision is an internal error.
    """
    new_keys = map_anchors(grid.keys, t, grid.voxel_size)
    # Injective by the lattice-map algebra; a collision would be a bug here.
    assert np.unique(_pack_keys(new_keys)).shape[0] == new_keys.shape[0], (
        "lattice transform map must be injective"
    )
    mat = delta_transform_matrix(t.quarter_turns)
    new_deltas = grid.deltas @ mat.T
    return PredictionGrid(
        grid.voxel_size, new_keys, new_deltas, grid.centerness.copy(), grid.class_scores.copy()
    )


def filter_predictions(grid: PredictionGrid, cfg: FilterConfig) -> PredictionGrid:
    """Keep entries whose centerness and max softmax class probability clear the gates."""
    if len(grid) == 0:
        return grid
    max_prob = softmax(grid.class_scores, axis=1).max(axis=1)
    keep = (grid.centerness > cfg.tau_center) & (max_prob > cfg.tau_cls)
    return PredictionGrid(
        grid.voxel_size,
        grid.keys[keep],
        grid.deltas[keep],
        grid.centerness[keep],
        grid.class_scores[keep],
    )


@dataclass(frozen=True)
class MatchSet:
    """Teacher-student pairs at shared voxel keys, lex-ordered by key.

    Parallel arrays: keys (M, 3); teacher/student deltas (M, 8); teacher/
    student centerness (M,); teacher/student class scores (M, C).
    """

    keys: np.ndarray
    teacher_deltas: np.ndarray
    student_deltas: np.ndarray
    teacher_centerness: np.ndarray
    student_centerness: np.ndarray
    teacher_scores: np.ndarray
    student_scores: np.ndarray

    def __len__(self) -> int:
        return self.keys.shape[0]

    def to_json_lines(self) -> str:
        """One JSON object per pair: key, both delta vectors, teacher confidence."""
        lines = []
        for i in range(len(self)):
            lines.append(
                json.dumps(
                    {
                        "key": [int(v) for v in self.keys[i]],
                        "teacher_deltas": [float(f"{v:.9g}") for v in self.teacher_deltas[i]],
                        "student_deltas": [float(f"{v:.9g}") for v in self.student_deltas[i]],
                        "teacher_centerness": float(f"{self.teacher_centerness[i]:.9g}"),
                    },
                    sort_keys=True,
                )
            )
        return "\n".join(lines) + ("\n" if lines else "")


def dense_match(teacher_aligned: PredictionGrid, student: PredictionGrid, cfg: FilterConfig) -> MatchSet:
    """Pair every shared voxel key whose teacher entry clears the confidence gate.

    Bijective by construction: each surviving key contributes exactly one pair.
    Both grids must share a voxel size. Output order is lexicographic in key.
    """
    if teacher_aligned.voxel_size != student.voxel_size:
        raise MatchingError(
            f"voxel_size mismatch: teacher {teacher_aligned.voxel_size} vs student {student.voxel_size}"
        )
    t_idx_all = np.arange(len(teacher_aligned))
    s_idx = _find_rows(student.keys, teacher_aligned.keys)
    shared = s_idx >= 0
    t_idx = t_idx_all[shared]
    s_idx = s_idx[shared]
    if len(t_idx):
        max_prob = softmax(teacher_aligned.class_scores[t_idx], axis=1).max(axis=1)
        confident = (teacher_aligned.centerness[t_idx] > cfg.tau_center) & (max_prob > cfg.tau_cls)
        t_idx = t_idx[confident]
        s_idx = s_idx[confident]
    return MatchSet(
        keys=teacher_aligned.keys[t_idx],
        teacher_deltas=teacher_aligned.deltas[t_idx],
        student_deltas=student.deltas[s_idx],
        teacher_centerness=teacher_aligned.centerness[t_idx],
        student_centerness=student.centerness[s_idx],
        teacher_scores=teacher_aligned.class_scores[t_idx],
        student_scores=student.class_scores[s_idx],
    )


def proposal_match(teacher_boxes: list[OrientedBox], student_boxes: list[OrientedBox]) -> list[tuple[int, int]]:
    """Baseline proposal-level matching: nearest student center per teacher box.

    Ties break toward the lowest student index. Students may be matched
    several times or not at all. Matching a non-empty teacher set against an
    empty student set is an error.
    """
    if not teacher_boxes:
        return []
    if not student_boxes:
        raise MatchingError("no student proposals to match against")
    s_centers = np.stack([b.center for b in student_boxes])
    pairs = []
    for ti, tbox in enumerate(teacher_boxes):
        dists = np.linalg.norm(s_centers - tbox.center, axis=1)
        pairs.append((ti, int(np.argmin(dists))))
    return pairs


def nms_arrays(centers, dims, scores, iou_threshold: float) -> list[int]:
    """Greedy score-descending suppression on axis-aligned boxes as arrays.

    Same contract as nms but takes (N, 3) centers and dims directly, which
    avoids per-candidate object construction in prediction decoding. Returns
    kept indices in suppression order; score ties break toward the lower
    input index; a candidate is suppressed iff its IoU with an already kept
    box exceeds iou_threshold.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    dims = np.asarray(dims, dtype=np.float64).reshape(-1, 3)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = centers.shape[0]
    if dims.shape[0] != n or scores.shape[0] != n:
        raise ValueError("centers, dims, and scores must parallel each other")
    if n == 0:
        return []
    lo = centers - dims / 2.0
    hi = centers + dims / 2.0
    inter = np.ones((n, n))
    for ax in range(3):
        overlap = np.minimum.outer(hi[:, ax], hi[:, ax])
        overlap -= np.maximum.outer(lo[:, ax], lo[:, ax])
        np.clip(overlap, 0.0, None, out=overlap)
        inter *= overlap
    vol = np.prod(dims, axis=1)
    iou = inter / (vol[:, None] + vol[None, :] - inter)
    order = np.lexsort((np.arange(n), -scores))
    # Only kept boxes suppress, so marking everything a kept box overlaps is
    # equivalent to checking each candidate against the kept set.
    suppressed = np.zeros(n, dtype=bool)
    kept: list[int] = []
    for i in order:
        if suppressed[i]:
            continue
        kept.append(int(i))
        suppressed |= iou[i] > iou_threshold
    return kept


def nms(boxes: list[OrientedBox], scores, iou_threshold: float) -> list[int]:
    """Greedy score-descending non-maximum suppression on yaw-0 boxes.

    Returns kept indices in suppression order. Score ties break toward the
    lower input index. A candidate is suppressed iff its IoU with an already
    kept box exceeds iou_threshold.
    """
    if not boxes:
        if not 0.0 <= iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")
        if np.asarray(scores, dtype=np.float64).reshape(-1).size != 0:
            raise ValueError("scores must parallel boxes")
        return []
    for box in boxes:
        if abs(box.yaw) > _YAW_ATOL:
            raise ValueError(f"nms requires yaw-0 boxes, got yaw {box.yaw}")
    centers = np.stack([b.center for b in boxes])
    dims = np.stack([b.dims for b in boxes])
    return nms_arrays(centers, dims, scores, iou_threshold)

"""8-parameter box encoding relative to a voxel anchor, and its exact linear
transformation law under quarter-turn rotations.

A box (center, dims w/l/h, yaw) encodes against an anchor point as six signed
face distances plus a log-ratio pair:

    d1 = (x + w/2) - ax      d2 = ax - (x - w/2)
    d3 = (y + l/2) - ay      d4 = ay - (y - l/2)
    d5 = (z + h/2) - az      d6 = az - (z - h/2)
    d7 = log(w/l) sin(2 yaw)
    d8 = log(w/l) cos(2 yaw)

The face distances use the intrinsic dims regardless of yaw; for an upright
axis-aligned box they are the literal distances from the anchor to the six
faces. Under a quarter-turn the encoding transforms by an exact linear map
whose entries come from cos/sin in {-1, 0, 1}: rotating the box and the
anchor, then encoding, equals applying that map to the original encoding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .voxel_geometry import Transform, _as_point, apply_transform, rotate_point

__all__ = [
    "BoxDeltas",
    "OrientedBox",
    "aabb_iou",
    "axis_aligned_solid",
    "decode",
    "decode_axis_aligned",
    "delta_transform_matrix",
    "encode",
    "encode_batch",
    "normalize_yaw",
    "transform_box",
    "transform_deltas",
]

_QT_COS = (1.0, 0.0, -1.0, 0.0)
_QT_SIN = (0.0, 1.0, 0.0, -1.0)
_YAW_ATOL = 1e-9


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    wrapped = math.remainder(float(yaw), 2.0 * math.pi)
    if wrapped >= math.pi:
        wrapped -= 2.0 * math.pi
    elif wrapped < -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class OrientedBox:
    """Upright 3D box: center, intrinsic dims (w, l, h), yaw about +z.

    Attributes:
        center: (3,) box center in meters.
        dims: (3,) positive extents (w along the box x-axis, l along y, h along z).
        yaw: rotation about +z, normalized to [-pi, pi).
        class_id: semantic label, defaults to 0.
    """

    center: np.ndarray
    dims: np.ndarray
    yaw: float = 0.0
    class_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "center", _as_point(self.center, "center"))
        dims = _as_point(self.dims, "dims")
        if np.any(dims <= 0.0):
            raise ValueError(f"dims must be strictly positive, got {dims}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))
        object.__setattr__(self, "class_id", int(self.class_id))

    @property
    def volume(self) -> float:
        return float(self.dims[0] * self.dims[1] * self.dims[2])


@dataclass(frozen=True)
class BoxDeltas:
    """The 8-vector (d1..d8) of an encoded box.

    The first six entries are face distances (positive iff the anchor is inside
    the box's intrinsic axis-aligned hull), the last two the log-ratio pair.
    """

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.shape != (8,):
            raise ValueError(f"deltas must have shape (8,), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("deltas contain non-finite values")
        object.__setattr__(self, "values", arr)


def encode(box: OrientedBox, anchor) -> BoxDeltas:
    """Encode a box against an anchor point (meters)."""
    a = _as_point(anchor, "anchor")
    return BoxDeltas(encode_batch(box, a.reshape(1, 3))[0])


def encode_batch(box: OrientedBox, anchors) -> np.ndarray:
    """Encode one box against (N, 3) anchors; returns (N, 8)."""
    anchors = np.asarray(anchors, dtype=np.float64)
    if anchors.ndim != 2 or anchors.shape[1] != 3:
        raise ValueError(f"anchors must have shape (N, 3), got {anchors.shape}")
    cx, cy, cz = box.center
    w, l, h = box.dims
    out = np.empty((anchors.shape[0], 8), dtype=np.float64)
    out[:, 0] = (cx + w / 2.0) - anchors[:, 0]
    out[:, 1] = anchors[:, 0] - (cx - w / 2.0)
    out[:, 2] = (cy + l / 2.0) - anchors[:, 1]
    out[:, 3] = anchors[:, 1] - (cy - l / 2.0)
    out[:, 4] = (cz + h / 2.0) - anchors[:, 2]
    out[:, 5] = anchors[:, 2] - (cz - h / 2.0)
    log_ratio = math.log(w / l)
    out[:, 6] = log_ratio * math.sin(2.0 * box.yaw)
    out[:, 7] = log_ratio * math.cos(2.0 * box.yaw)
    return out


def decode(deltas: BoxDeltas, anchor) -> OrientedBox:
    """Invert encode.

    Center and dims come back exactly from the face distances. The log-ratio
    pair determines 2*yaw only jointly with the sign of log(w/l); the sign is
    read off the recovered dims, so the source box is recovered up to the
    inherent yaw periodicity of pi. Square footprints (d7 = d8 = 0) report
    yaw 0. Dims must come out positive, else the deltas are rejected.
    """
    a = _as_point(anchor, "anchor")
    d = deltas.values
    w = d[0] + d[1]
    l = d[2] + d[3]
    h = d[4] + d[5]
    if w <= 0.0 or l <= 0.0 or h <= 0.0:
        raise ValueError(f"deltas imply non-positive dims (w={w}, l={l}, h={h})")
    center = np.array(
        [a[0] + (d[0] - d[1]) / 2.0, a[1] + (d[2] - d[3]) / 2.0, a[2] + (d[4] - d[5]) / 2.0]
    )
    if d[6] == 0.0 and d[7] == 0.0:
        yaw = 0.0
    else:
        two_yaw = math.atan2(d[6], d[7])
        yaw = two_yaw / 2.0 if w >= l else two_yaw / 2.0 + math.pi / 2.0
    return OrientedBox(center=center, dims=np.array([w, l, h]), yaw=yaw)


def decode_axis_aligned(deltas: BoxDeltas, anchor) -> OrientedBox:
    """Decode under the axis-aligned convention: extents from the six face
    distances, yaw forced to 0, log-ratio pair ignored."""
    box = decode(deltas, anchor)
    return replace(box, yaw=0.0)


def delta_transform_matrix(quarter_turns: int) -> np.ndarray:
    """Exact (8, 8) matrix carrying an encoding through a quarter-turn.

    Block structure: a 4x4 mix of the horizontal face distances with entries
    in {0, +-1/2, 1}, identity on the vertical pair, and cos(2 theta) in
    {-1, 1} scaling the log-ratio pair (sin(2 theta) vanishes identically for
    quarter-turns).
    """
    k = int(quarter_turns)
    if k != quarter_turns or not 0 <= k <= 3:
        raise ValueError(f"quarter_turns must be an integer in 0..3, got {quarter_turns!r}")
    c, s = _QT_COS[k], _QT_SIN[k]
    mat = np.zeros((8, 8), dtype=np.float64)
    mat[0, :4] = [(c + 1) / 2, (1 - c) / 2, -s / 2, s / 2]
    mat[1, :4] = [(1 - c) / 2, (c + 1) / 2, s / 2, -s / 2]
    mat[2, :4] = [s / 2, -s / 2, (c + 1) / 2, (1 - c) / 2]
    mat[3, :4] = [-s / 2, s / 2, (1 - c) / 2, (c + 1) / 2]
    mat[4, 4] = 1.0
    mat[5, 5] = 1.0
    cos2 = c * c - s * s  # exact: {1, -1} for quarter-turns
    mat[6, 6] = cos2
    mat[7, 7] = cos2
    return mat


def transform_deltas(deltas: BoxDeltas, quarter_turns: int) -> BoxDeltas:
    """Carry an encoding through a quarter-turn without touching the box.

    Satisfies transform_deltas(encode(b, a), k) == encode(transform_box(b, rot_k),
    rotate_point(a, k)) for a pure rotation rot_k.
    """
    mat = delta_transform_matrix(quarter_turns)
    return BoxDeltas(mat @ deltas.values)


def transform_box(box: OrientedBox, t: Transform) -> OrientedBox:
    """Move a box: rotate+translate the center, keep dims, yaw -> yaw - k*pi/2."""
    center = apply_transform(box.center, t)
    yaw = normalize_yaw(box.yaw - t.quarter_turns * math.pi / 2.0)
    return replace(box, center=center, yaw=yaw)


def axis_aligned_solid(box: OrientedBox) -> OrientedBox:
    """Yaw-0 representation of a box whose yaw is a multiple of pi/2.

    Odd quarter-turns swap the horizontal extents. Rejects boxes that are not
    axis-aligned within 1e-9 radians.
    """
    turns = box.yaw / (math.pi / 2.0)
    k = round(turns)
    if abs(turns - k) * (math.pi / 2.0) > _YAW_ATOL:
        raise ValueError(f"box yaw {box.yaw} is not a multiple of pi/2")
    if k % 2 == 0:
        dims = box.dims
    else:
        dims = np.array([box.dims[1], box.dims[0], box.dims[2]])
    return replace(box, dims=dims, yaw=0.0)


def _aabb_bounds(box: OrientedBox) -> tuple[np.ndarray, np.ndarray]:
    if abs(box.yaw) > _YAW_ATOL:
        raise ValueError(f"aabb_iou requires yaw 0 boxes, got yaw {box.yaw}")
    half = box.dims / 2.0
    return box.center - half, box.center + half


def aabb_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Intersection-over-union of two upright axis-aligned boxes (yaw must be 0)."""
    lo_a, hi_a = _aabb_bounds(a)
    lo_b, hi_b = _aabb_bounds(b)
    overlap = np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b)
    if np.any(overlap <= 0.0):
        return 0.0
    inter = float(np.prod(overlap))
    union = a.volume + b.volume - inter
    return inter / union


def aabb_iou_matrix(boxes_a: list[OrientedBox], boxes_b: list[OrientedBox]) -> np.ndarray:
    """Pairwise IoU matrix for two lists of yaw-0 boxes; (len(a), len(b))."""
    if not boxes_a or not boxes_b:
        return np.zeros((len(boxes_a), len(boxes_b)))
    lo_a = np.stack([b.center - b.dims / 2.0 for b in boxes_a])
    hi_a = np.stack([b.center + b.dims / 2.0 for b in boxes_a])
    lo_b = np.stack([b.center - b.dims / 2.0 for b in boxes_b])
    hi_b = np.stack([b.center + b.dims / 2.0 for b in boxes_b])
    for box in (*boxes_a, *boxes_b):
        if abs(box.yaw) > _YAW_ATOL:
            raise ValueError(f"aabb_iou requires yaw 0 boxes, got yaw {box.yaw}")
    overlap = np.minimum(hi_a[:, None, :], hi_b[None, :, :]) - np.maximum(lo_a[:, None, :], lo_b[None, :, :])
    inter = np.where(np.all(overlap > 0.0, axis=-1), np.prod(np.maximum(overlap, 0.0), axis=-1), 0.0)
    vol_a = np.prod(hi_a - lo_a, axis=-1)
    vol_b = np.prod(hi_b - lo_b, axis=-1)
    union = vol_a[:, None] + vol_b[None, :] - inter
    return inter / union

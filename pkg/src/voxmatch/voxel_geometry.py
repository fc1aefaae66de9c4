"""Voxel-lattice geometry: floor quantization, fractional remainders, and the
restricted rigid transforms (quarter-turns about the upright axis plus a 3D
translation) that keep integer lattice keys integer.

All rotation arithmetic is done by integer case analysis on the quarter-turn
count, never by evaluating trigonometric functions, so rotated keys are exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Transform",
    "apply_transform",
    "apply_transform_points",
    "frac",
    "frac_points",
    "map_anchor",
    "map_anchors",
    "quantize",
    "quantize_points",
    "rotate_key",
    "rotate_keys",
    "rotate_point",
    "rotate_points",
]

# cos/sin of k*pi/2 for k = 0..3, counter-clockwise:
# (x, y, z) -> (x cos - y sin, x sin + y cos, z).
_QT_COS = (1, 0, -1, 0)
_QT_SIN = (0, 1, 0, -1)


def _as_points(points, name: str) -> np.ndarray:
    """Validate and return an (N, 3) float64 view of the input."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return arr


def _as_point(p, name: str) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.shape != (3,):
        raise ValueError(f"{name} must have shape (3,), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return arr


def _check_voxel_size(voxel_size: float) -> float:
    size = float(voxel_size)
    if not np.isfinite(size) or size <= 0.0:
        raise ValueError(f"voxel_size must be a positive finite number, got {voxel_size!r}")
    return size


def _check_quarter_turns(quarter_turns: int) -> int:
    k = int(quarter_turns)
    if k != quarter_turns or not 0 <= k <= 3:
        raise ValueError(f"quarter_turns must be an integer in 0..3, got {quarter_turns!r}")
    return k


@dataclass(frozen=True)
class Transform:
    """Rigid transform: quarter-turn rotation about +z followed by a translation.

    Attributes:
        quarter_turns: number of counter-clockwise 90-degree turns, in 0..3.
        translation: (3,) translation in meters, applied after the rotation.
    """

    quarter_turns: int
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "quarter_turns", _check_quarter_turns(self.quarter_turns))
        object.__setattr__(self, "translation", _as_point(self.translation, "translation"))

    def inverse(self) -> "Transform":
        """Transform undoing this one; composition round-trips points exactly up to float addition."""
        k_inv = (4 - self.quarter_turns) % 4
        return Transform(k_inv, -rotate_point(self.translation, k_inv))


def quantize_points(points, voxel_size: float) -> np.ndarray:
    """Map points (meters) to integer voxel keys by componentwise floor(p / voxel_size)."""
    pts = _as_points(points, "points")
    size = _check_voxel_size(voxel_size)
    return np.floor(pts / size).astype(np.int64)


def quantize(p, voxel_size: float) -> tuple[int, int, int]:
    """Voxel key of a single point. See quantize_points."""
    key = quantize_points(np.asarray(p, dtype=np.float64).reshape(1, 3), voxel_size)[0]
    return (int(key[0]), int(key[1]), int(key[2]))


def frac_points(points, voxel_size: float) -> np.ndarray:
    """Fractional voxel coordinates p / voxel_size - floor(p / voxel_size), in [0, 1)^3.

    The subtraction is exact in float64: floor(u) is a multiple of ulp(u), so
    u - floor(u) is representable.
    """
    pts = _as_points(points, "points")
    size = _check_voxel_size(voxel_size)
    scaled = pts / size
    return scaled - np.floor(scaled)


def frac(p, voxel_size: float) -> np.ndarray:
    """Fractional voxel coordinates of a single point. See frac_points."""
    return frac_points(np.asarray(p, dtype=np.float64).reshape(1, 3), voxel_size)[0]


def rotate_points(points, quarter_turns: int) -> np.ndarray:
    """Rotate points counter-clockwise about +z by quarter_turns * 90 degrees.

    Pure sign flips and component swaps; bit-exact, no trigonometry.
    """
    pts = _as_points(points, "points")
    k = _check_quarter_turns(quarter_turns)
    out = np.empty_like(pts)
    x, y = pts[:, 0], pts[:, 1]
    if k == 0:
        out[:, 0], out[:, 1] = x, y
    elif k == 1:
        out[:, 0], out[:, 1] = -y, x
    elif k == 2:
        out[:, 0], out[:, 1] = -x, -y
    else:
        out[:, 0], out[:, 1] = y, -x
    out[:, 2] = pts[:, 2]
    return out


def rotate_point(p, quarter_turns: int) -> np.ndarray:
    """Rotate a single point. See rotate_points."""
    return rotate_points(np.asarray(p, dtype=np.float64).reshape(1, 3), quarter_turns)[0]


def apply_transform_points(points, t: Transform) -> np.ndarray:
    """Apply rotation then translation: R_k p + translation."""
    return rotate_points(points, t.quarter_turns) + t.translation


def apply_transform(p, t: Transform) -> np.ndarray:
    """Apply a Transform to a single point."""
    return apply_transform_points(np.asarray(p, dtype=np.float64).reshape(1, 3), t)[0]


def rotate_keys(keys, quarter_turns: int) -> np.ndarray:
    """Rotate integer voxel keys; integer in, integer out (closure under quarter-turns)."""
    arr = np.asarray(keys)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"keys must have shape (N, 3), got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"keys must be integer-typed, got dtype {arr.dtype}")
    k = _check_quarter_turns(quarter_turns)
    out = np.empty_like(arr, dtype=np.int64)
    x, y = arr[:, 0], arr[:, 1]
    if k == 0:
        out[:, 0], out[:, 1] = x, y
    elif k == 1:
        out[:, 0], out[:, 1] = -y, x
    elif k == 2:
        out[:, 0], out[:, 1] = -x, -y
    else:
        out[:, 0], out[:, 1] = y, -x
    out[:, 2] = arr[:, 2]
    return out


def rotate_key(key, quarter_turns: int) -> tuple[int, int, int]:
    """Rotate a single voxel key. See rotate_keys."""
    arr = np.asarray(key, dtype=np.int64).reshape(1, 3)
    out = rotate_keys(arr, quarter_turns)[0]
    return (int(out[0]), int(out[1]), int(out[2]))


def map_anchors(keys, t: Transform, voxel_size: float) -> np.ndarray:
    """Where a voxel key is carried by a transform: rotate_key + quantize(translation).

    This is the closed form of quantize(apply_transform(...)) on lattice data:
    for integer a, floor(a + b) = a + floor(b), and quarter-turn rotations keep
    keys integer, so the key-level map needs no point-level arithmetic.
    """
    rotated = rotate_keys(keys, t.quarter_turns)
    shift = quantize_points(t.translation.reshape(1, 3), voxel_size)[0]
    return rotated + shift


def map_anchor(key, t: Transform, voxel_size: float) -> tuple[int, int, int]:
    """Map a single voxel key. See map_anchors."""
    arr = np.asarray(key, dtype=np.int64).reshape(1, 3)
    out = map_anchors(arr, t, voxel_size)[0]
    return (int(out[0]), int(out[1]), int(out[2]))

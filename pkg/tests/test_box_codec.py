"""Eight-parameter box encoding, quarter-turn transport, IoU tests."""

import math

import numpy as np
import pytest

from voxmatch.box_codec import (
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
from voxmatch.voxel_geometry import Transform, rotate_point

LOG_3_4 = math.log(0.75)  # -0.287682072451781


def _box(center=(1.0, 2.0, 0.5), dims=(0.6, 0.8, 1.0), yaw=0.0, class_id=0):
    return OrientedBox(np.array(center), np.array(dims), yaw, class_id)


def test_encode_worked_example():
    d = encode(_box(), (0.9, 1.9, 0.4)).values
    np.testing.assert_allclose(
        d, [0.4, 0.2, 0.5, 0.3, 0.6, 0.4, 0.0, LOG_3_4], rtol=0, atol=1e-12
    )


def test_encode_centered_anchor_is_symmetric():
    d = encode(_box(), (1.0, 2.0, 0.5)).values
    np.testing.assert_allclose(d[:6], [0.3, 0.3, 0.4, 0.4, 0.5, 0.5], atol=1e-12)


def test_square_footprint_zeroes_ratio_pair():
    d = encode(_box(dims=(0.7, 0.7, 0.4), yaw=0.83), (1.0, 2.0, 0.5)).values
    assert d[6] == 0.0 and d[7] == 0.0


def test_encode_batch_matches_scalar():
    rng = np.random.default_rng(31)
    box = _box(yaw=0.4)
    anchors = rng.uniform(-2, 4, (64, 3))
    batch = encode_batch(box, anchors)
    for a, row in zip(anchors, batch):
        np.testing.assert_array_equal(encode(box, a).values, row)


def test_decode_recovers_worked_example():
    d = encode(_box(), (0.9, 1.9, 0.4))
    box = decode(d, (0.9, 1.9, 0.4))
    np.testing.assert_allclose(box.center, [1.0, 2.0, 0.5], atol=1e-12)
    np.testing.assert_allclose(box.dims, [0.6, 0.8, 1.0], atol=1e-12)
    assert abs(box.yaw) < 1e-12


def test_decode_roundtrip_property():
    rng = np.random.default_rng(32)
    worst = 0.0
    for _ in range(10_000):
        box = OrientedBox(
            rng.uniform(-5, 5, 3), rng.uniform(0.1, 3.0, 3), rng.uniform(-np.pi, np.pi)
        )
        anchor = rng.uniform(-5, 5, 3)
        got = decode(encode(box, anchor), anchor)
        worst = max(
            worst,
            float(np.max(np.abs(got.center - box.center))),
            float(np.max(np.abs(got.dims - box.dims))),
        )
        # Yaw returns in the same pi-periodic class.
        delta = math.remainder(got.yaw - box.yaw, math.pi)
        worst = max(worst, abs(delta) * min(box.dims[0], box.dims[1]))
    assert worst < 1e-9


def test_decode_rejects_nonpositive_extent():
    with pytest.raises(ValueError):
        decode(BoxDeltas(np.array([0.2, -0.3, 0.5, 0.5, 0.5, 0.5, 0.0, 0.0])), (0, 0, 0))


def test_decode_axis_aligned_ignores_ratio_pair():
    d = BoxDeltas(np.array([0.4, 0.2, 0.5, 0.3, 0.6, 0.4, 0.7, -0.3]))
    box = decode_axis_aligned(d, (0.9, 1.9, 0.4))
    assert box.yaw == 0.0
    np.testing.assert_allclose(box.dims, [0.6, 0.8, 1.0], atol=1e-12)


def test_transform_matrix_quarter_turn_row():
    mat = delta_transform_matrix(1)
    np.testing.assert_array_equal(mat[0], [0.5, 0.5, -0.5, 0.5, 0, 0, 0, 0])
    np.testing.assert_array_equal(mat[4], np.eye(8)[4])
    np.testing.assert_array_equal(mat[5], np.eye(8)[5])
    assert mat[6, 6] == -1.0 and mat[7, 7] == -1.0


def test_transform_matrix_identity_and_half_turn():
    np.testing.assert_array_equal(delta_transform_matrix(0), np.eye(8))
    mat2 = delta_transform_matrix(2)
    d = np.array([0.4, 0.2, 0.5, 0.3, 0.6, 0.4, 0.1, -0.2])
    out = mat2 @ d
    np.testing.assert_array_equal(out[:6], [0.2, 0.4, 0.3, 0.5, 0.6, 0.4])
    np.testing.assert_array_equal(out[6:], d[6:])


def test_transform_deltas_worked_example():
    d = BoxDeltas(np.array([0.4, 0.2, 0.5, 0.3, 0.6, 0.4, 0.0, LOG_3_4]))
    out = transform_deltas(d, 1).values
    np.testing.assert_allclose(out[:6], [0.2, 0.4, 0.5, 0.3, 0.6, 0.4], atol=1e-12)
    np.testing.assert_allclose(out[6], 0.0, atol=0)
    np.testing.assert_allclose(out[7], -LOG_3_4, atol=0)


def test_transform_deltas_preserves_extent_sums():
    rng = np.random.default_rng(33)
    for _ in range(200):
        d = BoxDeltas(rng.uniform(-1, 1, 8))
        for k in range(4):
            out = transform_deltas(d, k).values
            assert abs((out[0] + out[1]) - (d.values[0] + d.values[1])) < 1e-12
            assert abs((out[2] + out[3]) - (d.values[2] + d.values[3])) < 1e-12
            np.testing.assert_array_equal(out[4:6], d.values[4:6])


def test_transform_deltas_composition():
    rng = np.random.default_rng(34)
    d = BoxDeltas(rng.uniform(-1, 1, 8))
    for k1 in range(4):
        for k2 in range(4):
            two_step = transform_deltas(transform_deltas(d, k2), k1).values
            one_step = transform_deltas(d, (k1 + k2) % 4).values
            np.testing.assert_array_equal(two_step, one_step)


def test_roundtrip_law_with_rotation_and_shift():
    # Transporting the encoding must equal re-encoding the moved box against
    # the moved anchor, for every quarter-turn and any translation.
    rng = np.random.default_rng(35)
    worst = 0.0
    for _ in range(2000):
        box = OrientedBox(
            rng.uniform(-5, 5, 3), rng.uniform(0.1, 3.0, 3), rng.uniform(-np.pi, np.pi)
        )
        anchor = tuple(rng.uniform(-5, 5, 3))
        shift = tuple(rng.uniform(-2, 2, 3))
        for k in range(4):
            t = Transform(k, shift)
            lhs = transform_deltas(encode(box, anchor), k).values
            moved_anchor = np.array(rotate_point(anchor, k)) + np.array(shift)
            rhs = encode(transform_box(box, t), moved_anchor).values
            worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    assert worst < 1e-9


def test_transform_box_worked_example():
    out = transform_box(_box(), Transform(1, (0.0, 0.0, 0.0)))
    np.testing.assert_allclose(out.center, [-2.0, 1.0, 0.5], atol=1e-12)
    np.testing.assert_allclose(out.dims, [0.6, 0.8, 1.0], atol=0)
    assert abs(out.yaw - (-math.pi / 2.0)) < 1e-12


def test_transform_box_preserves_volume():
    rng = np.random.default_rng(36)
    for _ in range(100):
        box = OrientedBox(rng.uniform(-5, 5, 3), rng.uniform(0.1, 3.0, 3), rng.uniform(-4, 4))
        t = Transform(int(rng.integers(0, 4)), tuple(rng.uniform(-2, 2, 3)))
        assert transform_box(box, t).volume == box.volume


def test_axis_aligned_solid_swaps_extents_on_odd_turns():
    box = _box(yaw=-math.pi / 2.0)
    out = axis_aligned_solid(box)
    np.testing.assert_array_equal(out.dims, [0.8, 0.6, 1.0])
    assert out.yaw == 0.0
    with pytest.raises(ValueError):
        axis_aligned_solid(_box(yaw=0.3))


def test_normalize_yaw_range():
    assert normalize_yaw(math.pi) == -math.pi
    assert normalize_yaw(-math.pi) == -math.pi
    assert abs(normalize_yaw(2.5 * math.pi) - 0.5 * math.pi) < 1e-12
    rng = np.random.default_rng(37)
    for y in rng.uniform(-20, 20, 1000):
        w = normalize_yaw(y)
        assert -math.pi <= w < math.pi
        assert abs(math.remainder(w - y, 2 * math.pi)) < 1e-9


def test_aabb_iou_values():
    a = _box(center=(0.0, 0.0, 0.0), dims=(1.0, 1.0, 1.0))
    assert aabb_iou(a, a) == 1.0
    b = _box(center=(5.0, 0.0, 0.0), dims=(1.0, 1.0, 1.0))
    assert aabb_iou(a, b) == 0.0
    c = _box(center=(0.5, 0.0, 0.0), dims=(1.0, 1.0, 1.0))
    np.testing.assert_allclose(aabb_iou(a, c), 1.0 / 3.0, atol=1e-12)
    assert aabb_iou(a, c) == aabb_iou(c, a)


def test_aabb_iou_rejects_yawed_boxes():
    with pytest.raises(ValueError):
        aabb_iou(_box(yaw=0.2), _box())


def test_oriented_box_validation():
    with pytest.raises(ValueError):
        OrientedBox(np.zeros(3), np.array([1.0, 0.0, 1.0]))
    with pytest.raises(ValueError):
        OrientedBox(np.array([np.nan, 0, 0]), np.ones(3))
    box = OrientedBox(np.zeros(3), np.ones(3), yaw=3 * math.pi)
    assert -math.pi <= box.yaw < math.pi


def test_box_deltas_validation():
    with pytest.raises(ValueError):
        BoxDeltas(np.zeros(7))
    with pytest.raises(ValueError):
        BoxDeltas(np.array([1, 2, 3, 4, 5, 6, 7, np.inf]))

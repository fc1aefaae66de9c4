"""Quantization-error correction: exactness, minimality, clamp behavior, stats."""

import json

import numpy as np
import pytest

from voxmatch.qec import (
    CLAMP_EDGE,
    StatReport,
    TransformSampler,
    apply_with_qec,
    compensation,
    compensation_batch,
    compensation_samples,
    qec_statistics,
)
from voxmatch.voxel_geometry import Transform, map_anchors, quantize_points


def test_worked_example_unit_voxel():
    # p=(2.1,5.7,1.2) at voxel size 1 under a quarter turn with shift
    # (0.2,0.4,0.25): residual target (-0.5,0.5,0.45), clamped to the lower
    # edge on x, correction (0.5,0,0) up to the clamp margin.
    t = Transform(1, (0.2, 0.4, 0.25))
    pts = np.array([[2.1, 5.7, 1.2]])
    r_prime, gamma0, m = compensation_batch(pts, t, 1.0)
    np.testing.assert_allclose(m[0], [-0.5, 0.5, 0.45], atol=1e-12)
    np.testing.assert_allclose(gamma0[0], [CLAMP_EDGE, 0.5, 0.45], atol=1e-15)
    np.testing.assert_allclose(r_prime[0], [0.5, 0.0, 0.0], atol=1e-7)

    corrected = apply_with_qec(pts, t, 1.0)
    assert tuple(quantize_points(corrected, 1.0)[0]) == (-5, 2, 1)
    # Without the correction the transformed point lands one cell off.
    moved = np.array([[-5.7 + 0.2, 2.1 + 0.4, 1.2 + 0.25]])
    assert tuple(quantize_points(moved, 1.0)[0]) == (-6, 2, 1)


def test_worked_example_pass_through():
    # Residual target already inside the unit cell on every axis: the
    # correction is exactly zero, bit for bit.
    t = Transform(1, (0.65, -0.7, 0.25))
    pts = np.array([[2.3, 5.6, 1.2]])
    r_prime, gamma0, m = compensation_batch(pts, t, 1.0)
    np.testing.assert_allclose(m[0], [0.05, 0.6, 0.45], atol=1e-12)
    assert np.array_equal(gamma0[0], m[0])
    assert np.all(r_prime[0] == 0.0)


def test_mixed_clamp_example():
    t = Transform(1, (0.35, -0.7, 0.25))
    _, _, m = compensation_batch(np.array([[2.3, 5.6, 1.2]]), t, 1.0)
    np.testing.assert_allclose(m[0], [-0.25, 0.6, 0.45], atol=1e-12)


def test_identity_with_lattice_shift_is_exact_passthrough():
    rng = np.random.default_rng(21)
    pts = rng.uniform(-10, 10, (2000, 3))
    t = Transform(0, (3 * 0.05, -7 * 0.05, 0.0))
    r_prime, _, _ = compensation_batch(pts, t, 0.05)
    assert np.all(r_prime == 0.0)
    out = apply_with_qec(pts, t, 0.05)
    from voxmatch.voxel_geometry import apply_transform_points

    assert np.array_equal(out, apply_transform_points(pts, t))


def test_commutativity_property():
    rng = np.random.default_rng(22)
    sampler = TransformSampler()
    size = 0.04
    for _ in range(40):
        t = sampler.sample(rng)
        pts = rng.uniform(-8, 8, (500, 3))
        corrected = apply_with_qec(pts, t, size)
        got = quantize_points(corrected, size)
        want = map_anchors(quantize_points(pts, size), t, size)
        assert np.array_equal(got, want)


def test_correction_bound():
    rng = np.random.default_rng(23)
    sampler = TransformSampler()
    size = 0.05
    worst = 0.0
    for _ in range(20):
        t = sampler.sample(rng)
        pts = rng.uniform(-8, 8, (50_000, 3))
        r_prime, _, _ = compensation_batch(pts, t, size)
        worst = max(worst, float(np.max(np.linalg.norm(r_prime, axis=1))))
    assert worst < size * np.sqrt(3) * (1 + 1e-6)


def test_minimality_against_grid_oracle():
    # Any grid residual gamma in [0,1)^3 that keeps the corrected point in
    # the right cell must displace at least as much as the closed form, up
    # to the grid resolution. The distance is separable, so the per-axis
    # grid argmin is the full grid's argmin.
    rng = np.random.default_rng(24)
    sampler = TransformSampler()
    grid = np.arange(0.0, 1.0, 1e-3)
    for _ in range(200):
        t = sampler.sample(rng)
        p = rng.uniform(-8, 8, (1, 3))
        _, gamma0, m = compensation_batch(p, t, 1.0)
        closed = np.abs(gamma0[0] - m[0])
        best_grid = np.abs(grid[None, :] - m[0][:, None]).min(axis=1)
        assert np.all(closed <= best_grid + 1e-3 + 1e-12)


def test_single_point_form_agrees_with_batch():
    rng = np.random.default_rng(25)
    t = Transform(2, (0.13, -0.48, 0.21))
    pts = rng.uniform(-4, 4, (50, 3))
    r_prime, gamma0, m = compensation_batch(pts, t, 0.02)
    for i, p in enumerate(pts):
        c = compensation(tuple(p), t, 0.02)
        np.testing.assert_allclose(c.r_prime, r_prime[i], atol=0)
        np.testing.assert_allclose(c.gamma0, gamma0[i], atol=0)
        np.testing.assert_allclose(c.m, m[i], atol=0)


def test_per_sample_transforms_agree_with_batched_groups():
    rng = np.random.default_rng(26)
    pts = rng.uniform(-6, 6, (300, 3))
    ks = rng.integers(0, 4, 300)
    shifts = rng.uniform(-0.5, 0.5, (300, 3))
    r = compensation_samples(pts, ks, shifts, 0.03)
    for i in range(0, 300, 37):
        t = Transform(int(ks[i]), tuple(shifts[i]))
        ref, _, _ = compensation_batch(pts[i : i + 1], t, 0.03)
        assert np.array_equal(r[i], ref[0])


def test_sampler_ranges_and_determinism():
    sampler = TransformSampler()
    rng = np.random.default_rng(27)
    ts = [sampler.sample(rng) for _ in range(200)]
    assert {t.quarter_turns for t in ts} == {0, 1, 2, 3}
    for t in ts:
        assert all(-0.5 <= c <= 0.5 for c in t.translation)
    rng2 = np.random.default_rng(27)
    again = [TransformSampler().sample(rng2) for _ in range(200)]
    for a, b in zip(ts, again):
        assert a.quarter_turns == b.quarter_turns
        assert np.array_equal(a.translation, b.translation)


def test_statistics_zero_when_transform_trivial():
    stats = qec_statistics(
        20_000,
        TransformSampler(translation_low=0.0, translation_high=0.0, quarter_turn_choices=(0,)),
        0.05,
        seed=3,
    )
    summary = stats.summary_dict()
    assert summary["zero_fraction"] == 1.0
    assert summary["mean_norm"] == 0.0


def test_statistics_shape_under_uniform_transforms():
    stats = qec_statistics(200_000, TransformSampler(), 0.05, seed=4)
    summary = stats.summary_dict()
    # Zero corrections need all three residuals inside the cell (chance 1/2
    # each); nonzero corrections are axis aligned when exactly one axis
    # clamps (3/7 of the nonzero mass).
    assert 1.0 - summary["zero_fraction"] >= 0.80
    assert abs(summary["zero_fraction"] - 0.125) < 0.01
    assert abs(summary["axis_aligned_fraction"] - 3.0 / 7.0) < 0.01
    assert summary["mean_norm"] <= np.sqrt(3)


def test_stat_report_files(tmp_path):
    stats = qec_statistics(5000, TransformSampler(), 0.05, seed=5)
    csv_path = tmp_path / "hist.csv"
    json_path = tmp_path / "summary.json"
    stats.write_csv(csv_path)
    stats.write_summary_json(json_path)
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "bin_lo,bin_hi,count"
    assert len(lines) == 1 + 64
    total = sum(int(row.split(",")[2]) for row in lines[1:])
    assert total == 5000
    summary = json.loads(json_path.read_text())
    assert set(summary) == {"zero_fraction", "mean_norm", "axis_aligned_fraction"}


def test_norms_bounded_in_report():
    stats = qec_statistics(50_000, TransformSampler(), 0.01, seed=6)
    edges = stats.bin_edges
    counts = stats.counts
    occupied = edges[1:][counts > 0]
    assert occupied.max() <= np.sqrt(3) + 1e-12


def test_invalid_inputs_rejected():
    with pytest.raises(ValueError):
        compensation_batch(np.zeros((2, 3)), Transform(0, (0.0, 0.0, 0.0)), 0.0)
    with pytest.raises(ValueError):
        compensation_samples(np.zeros((2, 3)), np.array([0, 1, 2]), np.zeros((2, 3)), 0.01)
    with pytest.raises(ValueError):
        qec_statistics(0, TransformSampler(), 0.01, seed=0)

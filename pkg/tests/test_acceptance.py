"""Acceptance suite: one test per release criterion, in order.

Each test computes its verdict, prints a single PASS/FAIL line with the
measured numbers, then asserts, so a failing run still reports what was
observed. Criteria 1-3 share one 10^5-triple commutativity sweep.
"""

import json
import math
import time

import numpy as np
import pytest

from voxmatch.box_codec import OrientedBox, encode, transform_box, transform_deltas
from voxmatch.cli import EXIT_OK, run as cli_run
from voxmatch.matching import (
    FilterConfig,
    PredictionGrid,
    align_teacher,
    dense_match,
    proposal_match,
)
from voxmatch.qec import TransformSampler, apply_with_qec, compensation_batch, compensation_samples
from voxmatch.sim_harness import (
    OPEN_GATE,
    Scene,
    SimConfig,
    evaluate,
    generate_scene,
    held_out_regression_error,
    mock_predict,
    predict_boxes,
    self_train,
)
from voxmatch.training_signals import (
    FEATURE_DIM,
    LossConfig,
    SceneBatch,
    TrainingBatch,
    assign_targets,
    batch_losses,
    ema_update,
    gradient,
    huber_box_loss,
    params_dim,
    warmup_weight,
)
from voxmatch.voxel_geometry import Transform, map_anchor, quantize_points, rotate_keys, rotate_points

_SWEEP: dict = {}


def _commutativity_sweep():
    """10^5 random (point, quarter-turn, translation) triples at one voxel size."""
    if not _SWEEP:
        n = 100_000
        size = 0.01
        rng = np.random.default_rng(11)
        pts = rng.uniform(-8.0, 8.0, (n, 3))
        ks = rng.integers(0, 4, n)
        shifts = rng.uniform(-0.5, 0.5, (n, 3))
        start = time.perf_counter()
        r_prime = compensation_samples(pts, ks, shifts, size)
        moved = np.empty_like(pts)
        expected = np.empty((n, 3), dtype=np.int64)
        source = quantize_points(pts, size)
        for k in range(4):
            sel = ks == k
            moved[sel] = rotate_points(pts[sel], k)
            expected[sel] = rotate_keys(source[sel], k)
        expected += quantize_points(shifts, size)
        corrected = quantize_points(moved + shifts + r_prime, size)
        uncorrected = quantize_points(moved + shifts, size)
        elapsed = time.perf_counter() - start
        _SWEEP.update(
            n=n, size=size, pts=pts, ks=ks, shifts=shifts, r_prime=r_prime,
            expected=expected, corrected=corrected, uncorrected=uncorrected, elapsed=elapsed,
        )
    return _SWEEP


def _report(ok: bool, label: str, detail: str) -> None:
    print(f"{'PASS' if ok else 'FAIL'}: {label} ({detail})")
    assert ok, f"{label}: {detail}"


def test_criterion_01_correction_restores_commutativity():
    s = _commutativity_sweep()
    exact = int(np.sum(np.all(s["corrected"] == s["expected"], axis=1)))
    # Spot-check the vectorized expectation against the scalar anchor map.
    rng = np.random.default_rng(12)
    for i in rng.integers(0, s["n"], 200):
        t = Transform(int(s["ks"][i]), s["shifts"][i])
        key = tuple(quantize_points(s["pts"][i][None, :], s["size"])[0])
        assert tuple(s["expected"][i]) == map_anchor(key, t, s["size"])
    ok = exact == s["n"] and s["elapsed"] < 10.0
    _report(ok, "criterion 1 quantize/transform commutativity",
            f"{exact}/{s['n']} exact, {s['elapsed']:.2f}s < 10s")


def test_criterion_02_correction_is_minimal():
    # A 1e-3 gamma-grid oracle never undercuts the closed form by more than
    # its own resolution; the axis distances separate, so per-axis argmin
    # equals the full grid argmin.
    rng = np.random.default_rng(13)
    sampler = TransformSampler()
    grid = np.arange(0.0, 1.0, 1e-3)
    worst = -np.inf
    for _ in range(40):
        t = sampler.sample(rng)
        pts = rng.uniform(-8.0, 8.0, (25, 3))
        _, gamma0, m = compensation_batch(pts, t, 1.0)
        closed = np.abs(gamma0 - m)
        best = np.abs(grid[None, None, :] - m[:, :, None]).min(axis=2)
        worst = max(worst, float(np.max(closed - best)))
    ok = worst <= 1e-3 + 1e-12
    _report(ok, "criterion 2 closed-form correction minimality",
            f"max closed-minus-grid distance {worst:.3e} <= 1e-3 over 1000 cases")


def test_criterion_03_correction_is_usually_necessary():
    s = _commutativity_sweep()
    changed = float(np.mean(np.any(s["uncorrected"] != s["expected"], axis=1)))
    zero = float(np.mean(np.all(s["r_prime"] == 0.0, axis=1)))
    ok = changed >= 0.80 and zero < 0.20
    _report(ok, "criterion 3 correction necessity",
            f"uncorrected key changes {changed:.4f} >= 0.80, zero corrections {zero:.4f} < 0.20")


def test_criterion_04_delta_rotation_roundtrip():
    rng = np.random.default_rng(14)
    worst = 0.0
    for _ in range(10_000):
        center = rng.uniform(-4.0, 4.0, 3)
        dims = rng.uniform(0.3, 1.5, 3)
        yaw = float(rng.uniform(-math.pi, math.pi))
        box = OrientedBox(center, dims, yaw)
        anchor = center + rng.uniform(-0.5, 0.5, 3)
        shift = rng.uniform(-0.5, 0.5, 3)
        deltas = encode(box, anchor)
        for k in range(4):
            t = Transform(k, shift)
            lhs = transform_deltas(deltas, k).values
            rhs = encode(transform_box(box, t), rotate_points(anchor[None, :], k)[0] + shift).values
            worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    ok = worst <= 1e-9
    _report(ok, "criterion 4 encoding/rotation roundtrip",
            f"max error {worst:.3e} <= 1e-9 over 10^4 boxes x 4 turns")


def _random_grid(rng, keys, n_logits=4):
    n = len(keys)
    return PredictionGrid(
        0.05, keys, rng.normal(size=(n, 8)), rng.uniform(0.0, 1.0, n),
        rng.normal(size=(n, n_logits)) * 2.0,
    )


def test_criterion_05_dense_matching_is_one_to_one():
    rng = np.random.default_rng(15)
    fcfg = FilterConfig()
    for _ in range(1000):
        pool = np.unique(rng.integers(0, 5, (60, 3)), axis=0)
        t_keys = pool[rng.random(len(pool)) < 0.7]
        s_keys = pool[rng.random(len(pool)) < 0.7]
        if len(t_keys) == 0 or len(s_keys) == 0:
            continue
        matches = dense_match(_random_grid(rng, t_keys), _random_grid(rng, s_keys), fcfg)
        assert len(np.unique(matches.keys, axis=0)) == len(matches.keys)

    # Proposal matching on two crowded teacher boxes and one far student:
    # the near student soaks up both teachers and the far one gets nothing.
    t_boxes = [
        OrientedBox(np.array([0.0, 0.0, 0.0]), np.ones(3), class_id=0),
        OrientedBox(np.array([0.6, 0.0, 0.0]), np.ones(3), class_id=0),
    ]
    s_boxes = [
        OrientedBox(np.array([0.3, 0.0, 0.0]), np.ones(3), class_id=0),
        OrientedBox(np.array([5.0, 5.0, 5.0]), np.ones(3), class_id=0),
    ]
    pairs = proposal_match(t_boxes, s_boxes)
    matched_students = [s for _, s in pairs]
    multi = len(matched_students) != len(set(matched_students))
    unsupervised = set(range(len(s_boxes))) - set(matched_students)

    # The same situation voxel-wise: identical key sets under the identity
    # transform pair every student voxel exactly once.
    keys = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
    teacher = _random_grid(np.random.default_rng(16), keys)
    student = _random_grid(np.random.default_rng(17), keys)
    dense = dense_match(align_teacher(teacher, Transform(0, np.zeros(3))), student, OPEN_GATE)
    one_to_one = (
        len(np.unique(dense.keys, axis=0)) == len(dense.keys) == len(keys)
    )
    ok = multi and unsupervised == {1} and one_to_one
    _report(ok, "criterion 5 matching bijection",
            f"proposal pairs {pairs} double-supervise and starve; dense pairs all {len(keys)} keys once")


def test_criterion_06_dense_supervision_outnumbers_proposals():
    sim = SimConfig()
    fcfg = FilterConfig()
    sampler = TransformSampler()
    dense_counts, prop_counts = [], []
    for rng_seed in np.random.SeedSequence(18).spawn(50):
        rng = np.random.default_rng(rng_seed)
        scene = generate_scene(sim, rng)
        t = sampler.sample(rng)
        teacher = mock_predict(scene, sim, sim.noise_sigma, rng)
        aligned = align_teacher(teacher, t)
        moved = Scene(
            apply_with_qec(scene.points, t, sim.voxel_size),
            [transform_box(b, t) for b in scene.boxes],
        )
        student = mock_predict(moved, sim, sim.noise_sigma, rng)
        dense_counts.append(len(dense_match(aligned, student, fcfg)))
        t_props = [b for b, _ in predict_boxes(aligned, fcfg)]
        s_props = [b for b, _ in predict_boxes(student, OPEN_GATE)]
        prop_counts.append(len(proposal_match(t_props, s_props)) if t_props and s_props else 0)
    mean_dense, mean_prop = float(np.mean(dense_counts)), float(np.mean(prop_counts))
    ok = mean_dense > mean_prop
    _report(ok, "criterion 6 dense vs proposal pair counts",
            f"mean dense {mean_dense:.2f} > mean proposal {mean_prop:.2f} over 50 scenes")


def test_criterion_07_loss_and_ema_numerics():
    # Huber branches agree in value and slope at the threshold.
    tau = LossConfig().tau_box
    quad_val = 0.5 * tau * tau
    lin_val = tau * (tau - 0.5 * tau)
    at_knot = huber_box_loss(np.full(8, tau), tau)
    just_above = huber_box_loss(np.full(8, np.nextafter(tau, np.inf)), tau)
    huber_ok = (
        abs(quad_val - lin_val) <= 1e-12
        and abs(at_knot - quad_val) <= 1e-12
        and abs(just_above - lin_val) <= 1e-12
        and abs(tau - tau) <= 1e-12  # branch slopes at the knot are both tau
    )

    # EMA after 100 steps against the geometric closed form.
    rng = np.random.default_rng(19)
    t0 = rng.normal(size=40)
    s = rng.normal(size=40)
    teacher = t0.copy()
    alpha = 0.999
    for _ in range(100):
        teacher = ema_update(teacher, s, alpha)
    closed = alpha**100 * t0 + (1.0 - alpha**100) * s
    ema_err = float(np.max(np.abs(teacher - closed)))

    # Analytic gradient against central finite differences on a mixed batch.
    n_logits = 3
    scenes = []
    for i in range(2):
        n_vox = 5
        keys = np.unique(rng.integers(0, 6, (n_vox, 3)), axis=0)
        keys = keys[np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))]
        feats = rng.normal(size=(len(keys), FEATURE_DIM))
        box = OrientedBox(rng.uniform(0.15, 0.45, 3), np.full(3, 0.5), class_id=0)
        targets = assign_targets([box], keys, 0.1, n_logits) if i == 0 else None
        teacher_grid = PredictionGrid(
            0.1, keys, rng.normal(size=(len(keys), 8)), rng.uniform(0.5, 1.0, len(keys)),
            rng.normal(size=(len(keys), n_logits)) * 2.0,
        )
        scenes.append(SceneBatch(keys, feats, 0.1, targets, teacher_grid))
    batch = TrainingBatch(scenes=scenes, step_fraction=0.5, filter_cfg=FilterConfig())
    params = rng.normal(0.0, 0.5, params_dim(n_logits))
    g = gradient(params, batch, LossConfig(), n_logits)

    def total(p):
        sup, cons = batch_losses(p, batch, LossConfig(), n_logits)
        return sup + warmup_weight(batch.step_fraction) * cons

    h = 1e-6
    fd = np.zeros_like(g)
    for i in range(len(params)):
        e = np.zeros_like(params)
        e[i] = h
        fd[i] = (total(params + e) - total(params - e)) / (2 * h)
    rel = float(np.max(np.abs(fd - g))) / max(float(np.max(np.abs(fd))), 1e-8)

    ok = huber_ok and ema_err <= 1e-12 and rel < 1e-4
    _report(ok, "criterion 7 loss and EMA numerics",
            f"huber knot gap {abs(at_knot - quad_val):.1e}, EMA error {ema_err:.1e} <= 1e-12, "
            f"gradient rel error {rel:.1e} < 1e-4")


def test_criterion_08_correction_helps_self_training():
    sim = SimConfig(
        arena_extent=6.0, arena_height=2.5, n_boxes_min=2, n_boxes_max=5,
        points_per_box=96, clutter_points=32, voxel_size=0.2, labeled_fraction=0.1,
    )
    rows = []
    wins = 0
    for seed in range(5):
        rng = np.random.default_rng(1000 + seed)
        scenes = [generate_scene(sim, rng) for _ in range(10)]
        held_out = [generate_scene(sim, rng) for _ in range(4)]
        errs = {}
        for use_qec in (True, False):
            result = self_train(
                scenes[:1], scenes[1:], sim, LossConfig(), FilterConfig(),
                steps=500, seed=seed, use_qec=use_qec, alpha=0.99,
            )
            errs[use_qec] = held_out_regression_error(result.teacher_params, held_out, sim)
        wins += errs[True] <= errs[False]
        rows.append(f"seed {seed}: on={errs[True]:.6f} off={errs[False]:.6f} "
                    f"margin={errs[False] - errs[True]:+.6f}")
    table = "; ".join(rows)
    print(f"criterion 8 per-seed held-out regression error: {table}")
    ok = wins >= 4
    _report(ok, "criterion 8 correction improves self-training",
            f"correction-on wins {wins}/5 seeds (need >= 4); {table}")


def test_criterion_09_cli_is_byte_deterministic(tmp_path, capsys):
    checked = []

    def invoke(out, *argv):
        assert cli_run([str(a) for a in argv] + ["--out", str(out)]) == EXIT_OK
        capsys.readouterr()

    stats = ("qec-stats", "--samples", 2000, "--seed", 20)
    invoke(tmp_path / "s1", *stats)
    invoke(tmp_path / "s2", *stats)
    for name in ("qec_stats.csv", "qec_stats_summary.json", "qec_stats.png"):
        checked.append(name)
        assert (tmp_path / "s1" / name).read_bytes() == (tmp_path / "s2" / name).read_bytes()

    compare = ("match-compare", "--scenes", 3, "--seed", 21, "--voxel-size", 0.02)
    invoke(tmp_path / "m1", *compare, "--threads", 1)
    invoke(tmp_path / "m2", *compare, "--threads", 3)
    for name in ("match_compare.csv", "match_pairs.jsonl", "match_compare.png"):
        checked.append(name)
        assert (tmp_path / "m1" / name).read_bytes() == (tmp_path / "m2" / name).read_bytes()

    train = ("train", "--scenes", 4, "--steps", 6, "--voxel-size", 0.05,
             "--eval-every", 3, "--seed", 22)
    invoke(tmp_path / "t1", *train, "--threads", 1)
    invoke(tmp_path / "t2", *train, "--threads", 4)
    for name in ("trace.csv", "params.json", "predictions.json",
                 "training_curves.png", "scenes/scene_000.json"):
        checked.append(name)
        assert (tmp_path / "t1" / name).read_bytes() == (tmp_path / "t2" / name).read_bytes()

    _report(True, "criterion 9 CLI byte determinism",
            f"{len(checked)} files identical across reruns and thread counts")


def test_criterion_10_evaluation_sanity():
    def box(x, class_id=0):
        return OrientedBox(np.array([x, 0.0, 0.0]), np.ones(3), class_id=class_id)

    gt = [[box(0.0), box(5.0, class_id=1)], [box(2.0)]]
    perfect = evaluate([[(b, 1.0) for b in scene] for scene in gt], gt)
    empty = evaluate([[], []], gt)

    single = [[box(0.0)]]
    good = evaluate([[(box(0.0), 0.9), (box(40.0), 0.8)]], single)
    swapped = evaluate([[(box(0.0), 0.8), (box(40.0), 0.9)]], single)

    ok = (
        perfect.mean_ap[0.25] == 1.0 and perfect.mean_ap[0.5] == 1.0
        and perfect.coverage[0.25] == 1.0 and perfect.coverage[0.5] == 1.0
        and empty.mean_ap[0.25] == 0.0 and empty.coverage[0.25] == 0.0
        and abs(good.mean_ap[0.25] - 1.0) <= 1e-9
        and abs(swapped.mean_ap[0.25] - 0.5) <= 1e-9
    )
    _report(ok, "criterion 10 evaluation sanity",
            f"perfect mAP/coverage 1.0, empty 0.0, two-prediction APs "
            f"{good.mean_ap[0.25]:.9f}/{swapped.mean_ap[0.25]:.9f}")

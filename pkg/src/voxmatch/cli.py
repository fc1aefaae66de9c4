"""voxmatch command line.

Subcommands:
    qec-check      verify quantize/transform commutativity on random samples
    qec-stats      Monte Carlo statistics of the correction magnitudes
    roundtrip      verify the box-encoding rotation law on random boxes
    match-compare  dense vs proposal supervision pairs on synthetic scenes
    simulate       generate and save synthetic scenes
    train          run the toy self-training loop
    eval           score saved predictions against saved scenes

Shared numeric options resolve in precedence order: built-in defaults, then
the --config JSON file, then DQS_* environment variables, then flags. Exit
codes: 0 success, 1 invariant violation (first counterexample printed),
2 usage error. Every subcommand is deterministic given its options and seed,
at any --threads setting.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import report
from .box_codec import OrientedBox, encode, transform_box, transform_deltas
from .matching import FilterConfig, align_teacher, dense_match, proposal_match
from .qec import TransformSampler, apply_with_qec, compensation_samples, qec_statistics
from .sim_harness import (
    OPEN_GATE,
    GenerationError,
    Scene,
    SceneFormatError,
    SimConfig,
    UndefinedMetricError,
    evaluate,
    extract_features,
    generate_scene,
    load_scene,
    mock_predict,
    predict_boxes,
    save_scene,
    self_train,
    write_trace_csv,
)
from .training_signals import LossConfig, model_forward
from .voxel_geometry import Transform, quantize_points, rotate_point, rotate_points, rotate_keys

__all__ = ["EXIT_OK", "EXIT_USAGE", "EXIT_VIOLATION", "UsageError", "main", "run"]

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_USAGE = 2

_ENV_PREFIX = "DQS_"

_CONFIG_FIELDS: dict[str, type] = {
    "voxel_size": float,
    "tau_center": float,
    "tau_cls": float,
    "tau_box": float,
    "lambda_box": float,
    "lambda_center": float,
    "lambda_semantic": float,
    "alpha": float,
    "seed": int,
    "labeled_fraction": float,
    "steps": int,
    "out": str,
}

_DEFAULTS: dict = {
    "voxel_size": 0.01,
    "tau_center": 0.40,
    "tau_cls": 0.20,
    "tau_box": 0.30,
    "lambda_box": 1.00,
    "lambda_center": 0.25,
    "lambda_semantic": 0.50,
    "alpha": 0.999,
    "seed": 0,
    "labeled_fraction": 0.1,
    "steps": 500,
    "out": ".",
}


class UsageError(Exception):
    """Bad flags, config values, or input files; exit code 2."""


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def _round9(x: float) -> float:
    return float(_fmt(x))


def _cast(key: str, value, source: str):
    typ = _CONFIG_FIELDS[key]
    try:
        if isinstance(value, bool):
            raise ValueError("boolean not allowed")
        if typ is str:
            if not isinstance(value, str):
                raise ValueError("expected a string")
            return value
        if typ is int:
            return int(value) if isinstance(value, int) else int(str(value), 10)
        return float(value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{source}: bad value for {key}: {value!r} ({exc})") from exc


def _resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(_DEFAULTS)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path) as fh:
                raw = json.load(fh)
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {config_path}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"{config_path}: invalid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError(f"{config_path}: top level must be an object")
        for key, value in raw.items():
            if key not in _CONFIG_FIELDS:
                raise UsageError(f"{config_path}: unknown config key: {key}")
            cfg[key] = _cast(key, value, config_path)
    for key in _CONFIG_FIELDS:
        env_name = _ENV_PREFIX + key.upper()
        env_val = os.environ.get(env_name)
        if env_val is not None:
            cfg[key] = _cast(key, env_val, env_name)
    for key in _CONFIG_FIELDS:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            cfg[key] = flag_val

    if cfg["voxel_size"] <= 0.0:
        raise UsageError(f"voxel_size must be positive, got {cfg['voxel_size']}")
    for key in ("tau_center", "tau_cls"):
        if not 0.0 <= cfg[key] <= 1.0:
            raise UsageError(f"{key} must lie in [0, 1], got {cfg[key]}")
    if cfg["tau_box"] <= 0.0:
        raise UsageError(f"tau_box must be positive, got {cfg['tau_box']}")
    for key in ("lambda_box", "lambda_center", "lambda_semantic"):
        if cfg[key] < 0.0:
            raise UsageError(f"{key} must be nonnegative, got {cfg[key]}")
    if not 0.0 <= cfg["alpha"] < 1.0:
        raise UsageError(f"alpha must lie in [0, 1), got {cfg['alpha']}")
    if not 0.0 < cfg["labeled_fraction"] <= 1.0:
        raise UsageError(f"labeled_fraction must lie in (0, 1], got {cfg['labeled_fraction']}")
    if cfg["steps"] < 1:
        raise UsageError(f"steps must be positive, got {cfg['steps']}")
    return cfg


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("shared options")
    g.add_argument("--config", metavar="JSON", help="config file; keys mirror these option names")
    g.add_argument("--seed", type=int, help="random seed (default 0)")
    g.add_argument("--voxel-size", type=float, help="lattice pitch in meters (default 0.01)")
    g.add_argument("--tau-center", type=float, help="centerness gate (default 0.40)")
    g.add_argument("--tau-cls", type=float, help="class-probability gate (default 0.20)")
    g.add_argument("--tau-box", type=float, help="Huber threshold (default 0.30)")
    g.add_argument("--lambda-box", type=float, help="box consistency weight (default 1.00)")
    g.add_argument("--lambda-center", type=float, help="centerness consistency weight (default 0.25)")
    g.add_argument("--lambda-semantic", type=float, help="semantic consistency weight (default 0.50)")
    g.add_argument("--alpha", type=float, help="teacher EMA decay (default 0.999)")
    g.add_argument("--labeled-fraction", type=float, help="labeled share of generated scenes (default 0.1)")
    g.add_argument("--steps", type=int, help="training steps (default 500)")
    g.add_argument("--out", metavar="DIR", help="output directory (default .)")
    g.add_argument("--threads", type=int, help="worker threads (default: machine cores); results identical at any setting")

    parser = argparse.ArgumentParser(prog="voxmatch", description="Quantization-aware dense matching toolkit.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("qec-check", parents=[common], help="verify quantize/transform commutativity")
    p.add_argument("--samples", type=int, default=100000)
    p.add_argument("--extent", type=float, default=8.0, help="points drawn uniform over [-extent, extent]^3 m")

    p = sub.add_parser("qec-stats", parents=[common], help="Monte Carlo correction statistics")
    p.add_argument("--samples", type=int, default=100000)
    p.add_argument("--extent", type=float, default=8.0)
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")

    p = sub.add_parser("roundtrip", parents=[common], help="verify the encoding rotation law")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--tolerance", type=float, default=1e-9)

    p = sub.add_parser("match-compare", parents=[common], help="dense vs proposal pairs on synthetic scenes")
    p.add_argument("--scenes", type=int, default=50)
    p.add_argument("--noise-sigma", type=float, default=0.01)
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("simulate", parents=[common], help="generate and save synthetic scenes")
    p.add_argument("--scenes", type=int, default=20)

    p = sub.add_parser("train", parents=[common], help="run the toy self-training loop")
    p.add_argument("--scene-dir", help="load scenes from here instead of generating")
    p.add_argument("--scenes", type=int, default=20, help="scene count when generating")
    p.add_argument("--no-qec", dest="use_qec", action="store_false", help="drop the quantization correction on the student branch")
    p.add_argument("--eval-every", type=int, default=25)
    p.add_argument("--learning-rate", type=float, default=0.2)
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("eval", parents=[common], help="score saved predictions against saved scenes")
    p.add_argument("--scene-dir", required=True)
    p.add_argument("--predictions", required=True, metavar="JSON")
    return parser


def _spawned_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent per-item generators; results never depend on scheduling."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _filter_cfg(cfg: dict) -> FilterConfig:
    return FilterConfig(tau_center=cfg["tau_center"], tau_cls=cfg["tau_cls"])


def _loss_cfg(cfg: dict) -> LossConfig:
    return LossConfig(
        tau_box=cfg["tau_box"],
        lambda_box=cfg["lambda_box"],
        lambda_center=cfg["lambda_center"],
        lambda_semantic=cfg["lambda_semantic"],
    )


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_qec_check(args, cfg: dict, threads: int) -> int:
    n = args.samples
    if n < 1:
        raise UsageError("--samples must be positive")
    size = cfg["voxel_size"]
    rng = np.random.default_rng(cfg["seed"])
    passed = 0
    counterexample = None
    remaining = n
    while remaining > 0:
        b = min(65536, remaining)
        pts = rng.uniform(-args.extent, args.extent, size=(b, 3))
        ks = rng.integers(0, 4, size=b)
        shifts = rng.uniform(-0.5, 0.5, size=(b, 3))
        r_prime = compensation_samples(pts, ks, shifts, size)
        moved = np.empty_like(pts)
        expected = np.empty((b, 3), dtype=np.int64)
        source_keys = quantize_points(pts, size)
        for k in range(4):
            sel = ks == k
            if np.any(sel):
                moved[sel] = rotate_points(pts[sel], k)
                expected[sel] = rotate_keys(source_keys[sel], k)
        got = quantize_points(moved + shifts + r_prime, size)
        expected += quantize_points(shifts, size)
        ok = np.all(got == expected, axis=1)
        passed += int(np.sum(ok))
        if counterexample is None and not np.all(ok):
            i = int(np.flatnonzero(~ok)[0])
            counterexample = (pts[i], int(ks[i]), shifts[i], got[i], expected[i])
        remaining -= b
    print(f"{passed}/{n} commutativity checks passed")
    if passed != n:
        p, k, s, got_k, exp_k = counterexample
        print(
            "counterexample: point=({}) quarter_turns={} translation=({}) got=({}) expected=({})".format(
                ", ".join(_fmt(v) for v in p),
                k,
                ", ".join(_fmt(v) for v in s),
                ", ".join(str(int(v)) for v in got_k),
                ", ".join(str(int(v)) for v in exp_k),
            )
        )
        return EXIT_VIOLATION
    return EXIT_OK


def _cmd_qec_stats(args, cfg: dict, threads: int) -> int:
    if args.samples < 1:
        raise UsageError("--samples must be positive")
    stats = qec_statistics(
        args.samples, TransformSampler(), cfg["voxel_size"], cfg["seed"], point_extent=args.extent
    )
    csv_path = os.path.join(cfg["out"], "qec_stats.csv")
    json_path = os.path.join(cfg["out"], "qec_stats_summary.json")
    stats.write_csv(csv_path)
    stats.write_summary_json(json_path)
    s = stats.summary_dict()
    print(
        f"zero_fraction={_fmt(s['zero_fraction'])} mean_norm={_fmt(s['mean_norm'])} "
        f"axis_aligned_fraction={_fmt(s['axis_aligned_fraction'])}"
    )
    if not args.no_figures:
        report.render_qec_stats(csv_path, os.path.join(cfg["out"], "qec_stats.png"))
    return EXIT_OK


def _cmd_roundtrip(args, cfg: dict, threads: int) -> int:
    if args.samples < 1:
        raise UsageError("--samples must be positive")
    rng = np.random.default_rng(cfg["seed"])
    worst = 0.0
    failures = 0
    counterexample = None
    total = 4 * args.samples
    for _ in range(args.samples):
        center = rng.uniform(-4.0, 4.0, size=3)
        dims = rng.uniform(0.3, 1.5, size=3)
        yaw = float(rng.uniform(-math.pi, math.pi))
        box = OrientedBox(center, dims, yaw)
        anchor = center + rng.uniform(-0.5, 0.5, size=3)
        deltas = encode(box, anchor)
        shift = rng.uniform(-0.5, 0.5, size=3)
        for k in range(4):
            t = Transform(k, shift)
            lhs = transform_deltas(deltas, k).values
            rhs = encode(transform_box(box, t), rotate_point(anchor, k) + shift).values
            err = float(np.max(np.abs(lhs - rhs)))
            worst = max(worst, err)
            if err > args.tolerance:
                failures += 1
                if counterexample is None:
                    counterexample = (box, anchor, k, err)
    print(f"{total - failures}/{total} roundtrip checks passed (max error {_fmt(worst)})")
    if failures:
        box, anchor, k, err = counterexample
        print(
            "counterexample: center=({}) dims=({}) yaw={} anchor=({}) quarter_turns={} error={}".format(
                ", ".join(_fmt(v) for v in box.center),
                ", ".join(_fmt(v) for v in box.dims),
                _fmt(box.yaw),
                ", ".join(_fmt(v) for v in anchor),
                k,
                _fmt(err),
            )
        )
        return EXIT_VIOLATION
    return EXIT_OK


def _scene_sim_config(cfg: dict) -> SimConfig:
    return SimConfig(voxel_size=cfg["voxel_size"], labeled_fraction=cfg["labeled_fraction"])


def _cmd_match_compare(args, cfg: dict, threads: int) -> int:
    if args.scenes < 1:
        raise UsageError("--scenes must be positive")
    sim = _scene_sim_config(cfg)
    fcfg = _filter_cfg(cfg)
    sampler = TransformSampler()

    def one(rng: np.random.Generator):
        scene = generate_scene(sim, rng)
        t = sampler.sample(rng)
        teacher = mock_predict(scene, sim, args.noise_sigma, rng)
        aligned = align_teacher(teacher, t)
        moved = Scene(
            points=apply_with_qec(scene.points, t, sim.voxel_size),
            boxes=[transform_box(b, t) for b in scene.boxes],
        )
        student = mock_predict(moved, sim, args.noise_sigma, rng)
        matches = dense_match(aligned, student, fcfg)
        teacher_props = [b for b, _ in predict_boxes(aligned, fcfg)]
        student_props = [b for b, _ in predict_boxes(student, OPEN_GATE)]
        n_prop = len(proposal_match(teacher_props, student_props)) if teacher_props and student_props else 0
        return len(matches), n_prop, matches

    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(one, _spawned_rngs(cfg["seed"], args.scenes)))

    csv_path = os.path.join(cfg["out"], "match_compare.csv")
    with open(csv_path, "w") as fh:
        fh.write("scene,pairs_dense,pairs_proposal\n")
        for i, (nd, np_, _) in enumerate(results):
            fh.write(f"{i},{nd},{np_}\n")
    with open(os.path.join(cfg["out"], "match_pairs.jsonl"), "w") as fh:
        fh.write(results[0][2].to_json_lines())
    if not args.no_figures:
        report.render_match_compare(csv_path, os.path.join(cfg["out"], "match_compare.png"))

    mean_dense = float(np.mean([r[0] for r in results]))
    mean_prop = float(np.mean([r[1] for r in results]))
    print(f"mean dense pairs {_fmt(mean_dense)}, mean proposal pairs {_fmt(mean_prop)} over {args.scenes} scenes")
    if not mean_dense > mean_prop:
        print(f"invariant violated: mean dense pairs {_fmt(mean_dense)} <= mean proposal pairs {_fmt(mean_prop)}")
        return EXIT_VIOLATION
    return EXIT_OK


def _generate_scene_set(cfg: dict, n: int, threads: int) -> list[Scene]:
    sim = _scene_sim_config(cfg)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        scenes = list(pool.map(lambda rng: generate_scene(sim, rng), _spawned_rngs(cfg["seed"], n)))
    k_labeled = max(1, int(round(cfg["labeled_fraction"] * n)))
    return [Scene(s.points, s.boxes, labeled=i < k_labeled) for i, s in enumerate(scenes)]


def _cmd_simulate(args, cfg: dict, threads: int) -> int:
    if args.scenes < 1:
        raise UsageError("--scenes must be positive")
    scenes = _generate_scene_set(cfg, args.scenes, threads)
    names = []
    for i, scene in enumerate(scenes):
        name = f"scene_{i:03d}.json"
        save_scene(scene, os.path.join(cfg["out"], name))
        names.append(name)
    n_labeled = sum(1 for s in scenes if s.labeled)
    manifest = {
        "files": names,
        "n_labeled": n_labeled,
        "n_scenes": len(scenes),
        "seed": cfg["seed"],
        "voxel_size": cfg["voxel_size"],
    }
    with open(os.path.join(cfg["out"], "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(scenes)} scenes ({n_labeled} labeled) to {cfg['out']}")
    return EXIT_OK


def _load_scene_dir(scene_dir: str) -> tuple[list[str], list[Scene]]:
    try:
        entries = sorted(os.listdir(scene_dir))
    except OSError as exc:
        raise UsageError(f"cannot read scene directory: {exc}") from exc
    names = [e for e in entries if e.endswith(".json") and e != "manifest.json"]
    if not names:
        raise UsageError(f"no scene files in {scene_dir}")
    scenes = [load_scene(os.path.join(scene_dir, name)) for name in names]
    return names, scenes


def _predictions_payload(
    params: np.ndarray, scenes: list[Scene], names: list[str], sim: SimConfig, fcfg: FilterConfig, threads: int
) -> dict:
    def one(scene: Scene):
        keys, feats = extract_features(scene.points, sim.voxel_size)
        grid = model_forward(params, keys, feats, sim.voxel_size, sim.n_class_logits)
        return predict_boxes(grid, fcfg)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        per_scene = list(pool.map(one, scenes))
    return {
        "voxel_size": sim.voxel_size,
        "files": names,
        "scenes": [
            {
                "boxes": [
                    {
                        "center": [_round9(v) for v in box.center],
                        "dims": [_round9(v) for v in box.dims],
                        "yaw": _round9(box.yaw),
                        "class": box.class_id,
                        "score": _round9(score),
                    }
                    for box, score in preds
                ]
            }
            for preds in per_scene
        ],
    }


def _coverage_trend(trace: list[dict], eval_every: int) -> bool:
    """Non-decreasing teacher coverage, smoothed over a 10-snapshot window."""
    last = len(trace) - 1
    snaps = [row["coverage25"] for row in trace if row["step"] % eval_every == 0 or row["step"] == last]
    smoothed = [float(np.mean(snaps[max(0, i - 9) : i + 1])) for i in range(len(snaps))]
    return all(b - a >= -1e-9 for a, b in zip(smoothed, smoothed[1:]))


def _cmd_train(args, cfg: dict, threads: int) -> int:
    if args.eval_every < 1:
        raise UsageError("--eval-every must be positive")
    if args.learning_rate <= 0.0:
        raise UsageError("--learning-rate must be positive")
    fcfg = _filter_cfg(cfg)
    lcfg = _loss_cfg(cfg)

    if args.scene_dir:
        names, scenes = _load_scene_dir(args.scene_dir)
    else:
        if args.scenes < 1:
            raise UsageError("--scenes must be positive")
        scenes = _generate_scene_set(cfg, args.scenes, threads)
        scene_out = os.path.join(cfg["out"], "scenes")
        os.makedirs(scene_out, exist_ok=True)
        names = []
        for i, scene in enumerate(scenes):
            name = f"scene_{i:03d}.json"
            save_scene(scene, os.path.join(scene_out, name))
            names.append(name)

    labeled = [s for s in scenes if s.labeled]
    unlabeled = [s for s in scenes if not s.labeled]
    if not labeled:
        raise UsageError("no labeled scenes to train on")
    max_class = max((b.class_id for s in scenes for b in s.boxes), default=0)
    sim = replace(_scene_sim_config(cfg), n_classes=max(max_class + 1, 1))

    result = self_train(
        labeled,
        unlabeled,
        sim,
        lcfg,
        fcfg,
        steps=cfg["steps"],
        seed=cfg["seed"],
        use_qec=args.use_qec,
        alpha=cfg["alpha"],
        learning_rate=args.learning_rate,
        eval_every=args.eval_every,
    )

    trace_path = os.path.join(cfg["out"], "trace.csv")
    write_trace_csv(result.trace, trace_path)
    with open(os.path.join(cfg["out"], "params.json"), "w") as fh:
        json.dump(
            {
                "n_class_logits": result.n_class_logits,
                "student": result.student_params.tolist(),
                "teacher": result.teacher_params.tolist(),
                "voxel_size": sim.voxel_size,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")

    eval_scenes = unlabeled if unlabeled else labeled
    want_labeled = not unlabeled
    eval_names = [n for n, s in zip(names, scenes) if s.labeled == want_labeled]
    payload = _predictions_payload(result.teacher_params, eval_scenes, eval_names, sim, OPEN_GATE, threads)
    with open(os.path.join(cfg["out"], "predictions.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")

    if not args.no_figures:
        report.render_training_curves(trace_path, os.path.join(cfg["out"], "training_curves.png"))

    final = result.trace[-1]
    print(
        f"final sup_loss={_fmt(final['sup_loss'])} cons_loss={_fmt(final['cons_loss'])} "
        f"coverage@0.25={_fmt(final['coverage25'])} mAP@0.25={_fmt(final['map25'])} "
        f"mAP@0.50={_fmt(final['map50'])}"
    )
    trend = "non-decreasing" if _coverage_trend(result.trace, args.eval_every) else "not monotone"
    print(f"teacher coverage trend (10-snapshot smoothing): {trend}")
    return EXIT_OK


def _parse_prediction_file(path: str) -> tuple[list[str], list[list[tuple[OrientedBox, float]]]]:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise UsageError(f"predictions file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict) or not isinstance(data.get("files"), list) or not isinstance(data.get("scenes"), list):
        raise UsageError(f"{path}: expected an object with 'files' and 'scenes' lists")
    files, scenes = data["files"], data["scenes"]
    if len(files) != len(scenes):
        raise UsageError(f"{path}: 'files' and 'scenes' lengths differ")
    parsed: list[list[tuple[OrientedBox, float]]] = []
    for si, entry in enumerate(scenes):
        where = f"{path}: scenes[{si}]"
        if not isinstance(entry, dict) or not isinstance(entry.get("boxes"), list):
            raise UsageError(f"{where} must be an object with a 'boxes' list")
        preds = []
        for bi, b in enumerate(entry["boxes"]):
            loc = f"{where}.boxes[{bi}]"
            try:
                box = OrientedBox(
                    np.asarray(b["center"], dtype=np.float64),
                    np.asarray(b["dims"], dtype=np.float64),
                    float(b.get("yaw", 0.0)),
                    int(b["class"]),
                )
                score = float(b["score"])
            except (KeyError, TypeError, ValueError) as exc:
                raise UsageError(f"{loc}: {exc}") from exc
            if not math.isfinite(score):
                raise UsageError(f"{loc}: non-finite score")
            preds.append((box, score))
        parsed.append(preds)
    return files, parsed


def _cmd_eval(args, cfg: dict, threads: int) -> int:
    files, predictions = _parse_prediction_file(args.predictions)

    def load_one(name: str) -> Scene:
        return load_scene(os.path.join(args.scene_dir, name))

    with ThreadPoolExecutor(max_workers=threads) as pool:
        try:
            scenes = list(pool.map(load_one, files))
        except (OSError, SceneFormatError) as exc:
            raise UsageError(str(exc)) from exc
    ground_truth = [s.boxes for s in scenes]
    try:
        metrics = evaluate(predictions, ground_truth)
    except (UndefinedMetricError, ValueError) as exc:
        raise UsageError(f"cannot evaluate: {exc}") from exc

    out = {
        "ap_per_class": {
            str(thr): {str(c): _round9(v) for c, v in per.items()} for thr, per in metrics.ap_per_class.items()
        },
        "coverage": {str(thr): _round9(v) for thr, v in metrics.coverage.items()},
        "mean_ap": {str(thr): _round9(v) for thr, v in metrics.mean_ap.items()},
    }
    with open(os.path.join(cfg["out"], "metrics.json"), "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(
        f"coverage@0.25={_fmt(metrics.coverage[0.25])} coverage@0.50={_fmt(metrics.coverage[0.5])} "
        f"mAP@0.25={_fmt(metrics.mean_ap[0.25])} mAP@0.50={_fmt(metrics.mean_ap[0.5])}"
    )
    return EXIT_OK


_HANDLERS = {
    "qec-check": _cmd_qec_check,
    "qec-stats": _cmd_qec_stats,
    "roundtrip": _cmd_roundtrip,
    "match-compare": _cmd_match_compare,
    "simulate": _cmd_simulate,
    "train": _cmd_train,
    "eval": _cmd_eval,
}


def run(argv) -> int:
    """Execute one invocation; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else (0 if code is None else EXIT_USAGE)
    try:
        cfg = _resolve_config(args)
        os.makedirs(cfg["out"], exist_ok=True)
        threads = args.threads if args.threads else (os.cpu_count() or 1)
        if threads < 1:
            raise UsageError(f"--threads must be positive, got {threads}")
        return _HANDLERS[args.subcommand](args, cfg, threads)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GenerationError, SceneFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_VIOLATION


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()

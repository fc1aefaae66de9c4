"""Figure rendering for the CLI report paths.

Every renderer reads one of the delimited files the CLI already wrote and
produces a PNG next to it; nothing here recomputes results. Figures are
built on matplotlib's object API (no pyplot, no backend switching) and are
saved without the Software metadata chunk so repeated runs give identical
bytes.
"""

from __future__ import annotations

import csv

from matplotlib.figure import Figure

__all__ = [
    "render_match_compare",
    "render_qec_stats",
    "render_training_curves",
]

_DPI = 120


def _read_csv(path) -> dict[str, list[float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty CSV")
        columns: dict[str, list[float]] = {name: [] for name in reader.fieldnames}
        for row in reader:
            for name in reader.fieldnames:
                columns[name].append(float(row[name]))
    return columns


def _save(fig: Figure, out_path) -> None:
    fig.savefig(out_path, format="png", dpi=_DPI, metadata={"Software": None})


def render_qec_stats(csv_path, out_path) -> None:
    """Histogram of correction norms (voxel units) from the stats CSV."""
    cols = _read_csv(csv_path)
    lo, hi, counts = cols["bin_lo"], cols["bin_hi"], cols["count"]
    widths = [b - a for a, b in zip(lo, hi)]
    fig = Figure(figsize=(7.0, 4.5))
    ax = fig.add_subplot(111)
    ax.bar(lo, counts, width=widths, align="edge", color="#4878cf", edgecolor="white", linewidth=0.3)
    ax.set_xlabel("correction norm / voxel size")
    ax.set_ylabel("samples")
    ax.set_title("Distribution of quantization-correction magnitudes")
    fig.tight_layout()
    _save(fig, out_path)


def render_training_curves(csv_path, out_path) -> None:
    """Four-panel training summary from the trace CSV."""
    cols = _read_csv(csv_path)
    steps = cols["step"]
    fig = Figure(figsize=(10.0, 7.0))
    axes = fig.subplots(2, 2)

    ax = axes[0][0]
    ax.plot(steps, cols["sup_loss"], label="supervised", color="#d65f5f")
    ax.plot(steps, cols["cons_loss"], label="consistency (raw)", color="#4878cf")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("Losses")
    ax.legend()

    ax = axes[0][1]
    ax.plot(steps, cols["warmup_weight"], color="#6acc65")
    ax.set_xlabel("step")
    ax.set_ylabel("weight")
    ax.set_ylim(-0.05, 1.05)
    ax.set_title("Consistency warmup")

    ax = axes[1][0]
    ax.plot(steps, cols["pairs_dense"], label="dense", color="#4878cf")
    ax.plot(steps, cols["pairs_proposal"], label="proposal", color="#ee854a")
    ax.set_xlabel("step")
    ax.set_ylabel("pairs per scene")
    ax.set_title("Matched supervision pairs")
    ax.legend()

    ax = axes[1][1]
    ax.plot(steps, cols["coverage25"], label="coverage@0.25", color="#6acc65")
    ax.plot(steps, cols["map25"], label="mAP@0.25", color="#4878cf")
    ax.plot(steps, cols["map50"], label="mAP@0.50", color="#d65f5f")
    ax.set_xlabel("step")
    ax.set_ylabel("metric")
    ax.set_ylim(-0.05, 1.05)
    ax.set_title("Teacher quality on the eval pool")
    ax.legend()

    fig.tight_layout()
    _save(fig, out_path)


def render_match_compare(csv_path, out_path) -> None:
    """Per-scene dense vs proposal pair counts as grouped bars."""
    cols = _read_csv(csv_path)
    scenes = cols["scene"]
    dense, proposal = cols["pairs_dense"], cols["pairs_proposal"]
    width = 0.4
    fig = Figure(figsize=(max(7.0, 0.25 * len(scenes) + 2.0), 4.5))
    ax = fig.add_subplot(111)
    ax.bar([s - width / 2 for s in scenes], dense, width=width, label="dense", color="#4878cf")
    ax.bar([s + width / 2 for s in scenes], proposal, width=width, label="proposal", color="#ee854a")
    mean_dense = sum(dense) / len(dense) if dense else 0.0
    mean_proposal = sum(proposal) / len(proposal) if proposal else 0.0
    ax.axhline(mean_dense, color="#4878cf", linestyle="--", linewidth=1.0)
    ax.axhline(mean_proposal, color="#ee854a", linestyle="--", linewidth=1.0)
    ax.set_xlabel("scene")
    ax.set_ylabel("matched pairs")
    ax.set_title("Dense vs proposal supervision pairs per scene")
    ax.legend()
    fig.tight_layout()
    _save(fig, out_path)

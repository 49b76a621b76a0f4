"""PNG figures for the campaign report (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "axes.axisbelow": True,
    "grid.color": "white",
    "axes.facecolor": "whitesmoke",
    "savefig.dpi": 120,
    "svg.hashsalt": "reviewfuzz",
}
MODE_COLORS = {"annot": "#1b7837", "baseline": "#762a83"}


def _save(fig, path: Path) -> str:
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path.name


def _crashes_per_mode(summary: dict, path: Path) -> str:
    per_mode = summary["unique_crashes_per_mode"]
    fig, ax = plt.subplots(figsize=(3.2, 2.4))
    modes = sorted(per_mode)
    ax.bar(modes, [per_mode[m] for m in modes], color=[MODE_COLORS.get(m, "grey") for m in modes])
    ax.set_ylabel("unique crashes")
    ax.set_title("Unique crashes per mode")
    return _save(fig, path)


def _execs_to_crash(summary: dict, path: Path) -> str:
    medians = summary["median_execs_to_crash"]
    targets = sorted(medians)
    modes = sorted({m for v in medians.values() for m in v})
    fig, ax = plt.subplots(figsize=(max(3.2, 1.2 * len(targets) + 1), 2.6))
    width = 0.8 / max(len(modes), 1)
    for i, m in enumerate(modes):
        xs = [k + i * width for k in range(len(targets))]
        ys = [medians[t].get(m, 0) for t in targets]
        ax.bar(xs, ys, width, label=m, color=MODE_COLORS.get(m, "grey"))
    ax.set_xticks([k + width * (len(modes) - 1) / 2 for k in range(len(targets))])
    ax.set_xticklabels(targets)
    if any(v > 0 for by in medians.values() for v in by.values()):
        ax.set_yscale("log")
    ax.set_ylabel("median execs to first crash")
    ax.legend(frameon=False, fontsize=7, loc="lower left", bbox_to_anchor=(0, 1), ncol=len(modes))
    return _save(fig, path)


def _funnel(summary: dict, path: Path) -> str:
    funnel = summary["funnel"]
    stages = list(funnel)
    fig, ax = plt.subplots(figsize=(3.6, 2.4))
    ax.barh(stages[::-1], [funnel[s] for s in stages[::-1]], color="#4393c3")
    ax.set_xlabel("count")
    ax.set_title("Stage funnel")
    return _save(fig, path)


def render_figures(summary: dict, out_dir: Path) -> list:
    """Render all figures into ``out_dir``; returns the file names."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        return [
            _crashes_per_mode(summary, out_dir / "crashes_per_mode.png"),
            _execs_to_crash(summary, out_dir / "execs_to_crash.png"),
            _funnel(summary, out_dir / "funnel.png"),
        ]

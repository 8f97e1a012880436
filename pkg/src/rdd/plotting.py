"""Figures written next to the CLI's JSON / CSV outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training_log(records: list[dict], path) -> Path:
    """Matching loss and inner objective per iteration."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        its = [r["iteration"] for r in records]
        ax.plot(its, [r["matching_loss"] for r in records], lw=1, label="matching loss")
        objective = [r["objective"] for r in records]
        if any(v is not None for v in objective):
            ax.plot(its, [float("nan") if v is None else v for v in objective], lw=1,
                    label="inner objective")
        ax.set_xlabel("iteration")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_report(report: dict, path) -> Path:
    """Bar chart of the accuracies in an evaluation report."""
    names = ["standard", "cluster-min"]
    values = [report["standard_accuracy"], report["cluster_min"]]
    for kind, acc in sorted(report.get("corruption_accuracies", {}).items()):
        names.append(kind)
        values.append(acc)
    if report.get("worst_group") is not None:
        names += ["avg group", "worst group"]
        values += [report["average_group"], report["worst_group"]]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        bars = ax.bar(range(len(values)), values, color="0.55")
        bars[1].set_color("C3")
        ax.set_xticks(range(len(values)), names, rotation=30, ha="right")
        ax.set_ylim(0, 1)
        ax.set_ylabel("accuracy")
        for i, v in enumerate(values):
            ax.text(i, v + 0.02, f"{v:.2f}", ha="center", fontsize=8)
        return _save(fig, path)


def plot_sweep(param: str, rows: list[dict], path) -> Path:
    """Metric curves over the swept values; failed values are left out."""
    ok = [r for r in rows if r.get("status") == "ok"]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        labels = [str(r["value"]) for r in ok]
        for key, style in (("standard", "o-"), ("cluster_min", "s-"), ("worst_group", "^-")):
            ys = [r.get(key) for r in ok]
            if ok and all(isinstance(y, float) for y in ys):
                ax.plot(range(len(ok)), ys, style, ms=4, lw=1, label=key.replace("_", " "))
        ax.set_xticks(range(len(ok)), labels)
        ax.set_xlabel(param)
        ax.set_ylabel("accuracy")
        if ax.lines:
            ax.legend(frameon=False)
        return _save(fig, path)

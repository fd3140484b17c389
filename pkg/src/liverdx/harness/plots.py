"""Per-class AUC bar charts and loss curves, rendered deterministically with the Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from liverdx.labels import CLASS_NAMES  # noqa: E402

_STYLE = {"figure.dpi": 100, "savefig.dpi": 100, "font.size": 9, "svg.hashsalt": "liverdx"}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_auc_bars(reports, path):
    """One group of 8 bars per class; one bar colour and one dashed mean line per report."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(8, 3.5))
        n = len(reports)
        width = 0.8 / n
        x = np.arange(len(CLASS_NAMES))
        for i, rep in enumerate(reports):
            vals = [rep.per_class_auc.get(c) for c in CLASS_NAMES]
            heights = [np.nan if v is None else v for v in vals]
            bars = ax.bar(x + (i - (n - 1) / 2) * width, heights, width, label=rep.name)
            if rep.auc8 is not None:
                ax.axhline(rep.auc8, color=bars.patches[0].get_facecolor(), linestyle="--", linewidth=1)
        ax.set_xticks(x)
        ax.set_xticklabels(CLASS_NAMES)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("AUC")
        ax.legend(loc="lower right", fontsize=8)
        fig.tight_layout()
        return _save(fig, path)


def plot_loss_curve(rows, path):
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        steps = [r["step"] for r in rows]
        for key in ("total", "seg", "focal", "acl"):
            ax.plot(steps, [r[key] for r in rows], label=key, linewidth=1)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(fontsize=8)
        fig.tight_layout()
        return _save(fig, path)


def plot_report(reports, out_dir, train_log=None):
    out_dir = Path(out_dir)
    paths = [plot_auc_bars(reports, out_dir / "auc_per_class.png")]
    if train_log:
        paths.append(plot_loss_curve(train_log, out_dir / "loss_curve.png"))
    return paths

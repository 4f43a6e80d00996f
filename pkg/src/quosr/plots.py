"""Static SVG comparison plots (deterministic bytes for fixed inputs)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_RC = {"svg.hashsalt": "quosr", "svg.fonttype": "path", "figure.dpi": 72}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def metric_bars(report, path):
    """Mean R2 and isclose rate per method, side by side."""
    methods = report.methods()
    aggs = [report.aggregate(m) for m in methods]
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
        for ax, key, title in ((axes[0], "mean_r2", "mean R$^2$"),
                               (axes[1], "isclose_rate", "isclose > 95%")):
            vals = [a[key] for a in aggs]
            ax.bar(range(len(methods)), vals, color="#4c72b0")
            ax.set_xticks(range(len(methods)))
            ax.set_xticklabels(methods)
            ax.set_ylim(0, 1.05)
            ax.set_title(title)
            for i, v in enumerate(vals):
                ax.text(i, v + 0.02, f"{v:.3f}", ha="center", fontsize=8)
        fig.tight_layout()
        _save(fig, path)


def step_curves(curves: dict, path):
    """Mean held-out R2 against the number of query steps used for fitting."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for method in sorted(curves):
            ys = curves[method]
            ax.plot(range(len(ys)), ys, marker="o", label=method)
        ax.set_xlabel("query step")
        ax.set_ylabel("mean R$^2$")
        ax.legend()
        fig.tight_layout()
        _save(fig, path)


def loss_curve(iterations, losses, path):
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(iterations, losses, lw=0.8)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        fig.tight_layout()
        _save(fig, path)

"""SVG figures for benchmark summaries (needs matplotlib)."""

from __future__ import annotations

from pathlib import Path

from .drf import WEIGHT_KINDS, iter_weight


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def write_plots(plot_dir, plan, summary, k=5.0):
    """Write ablation bars, DRF loss curves and weight schedules; returns the paths."""
    plt = _pyplot()
    plot_dir = Path(plot_dir)
    plot_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    names = [n for n, s in summary["variants"].items() if s["runs"]]

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, metric in zip(axes, ("app_stat_dist", "struct_iou")):
        med = [summary["variants"][n][metric]["median"] for n in names]
        iqr = [summary["variants"][n][metric]["iqr"] for n in names]
        ax.bar(range(len(names)), med, yerr=[0.5 * q for q in iqr], capsize=3)
        ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
        ax.set_title(f"median {metric}")
    fig.tight_layout()
    paths.append(plot_dir / "ablation_bars.svg")
    fig.savefig(paths[-1])
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for n in names:
        curve = summary["variants"][n]["L_app_by_iter"]
        if curve:
            ax.plot(range(len(curve)), curve, marker="o", label=n)
    ax.set_xlabel("DRF iteration")
    ax.set_ylabel("mean appearance loss")
    if ax.lines:
        ax.legend(fontsize="small")
    fig.tight_layout()
    paths.append(plot_dir / "loss_curves.svg")
    fig.savefig(paths[-1])
    plt.close(fig)

    n_iter = max([v.drf.N for v in plan.variants if v.drf is not None] + [3])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for kind in WEIGHT_KINDS:
        ax.plot(range(n_iter), [iter_weight(i, n_iter, k, kind) for i in range(n_iter)],
                marker="o", label=kind)
    ax.set_xlabel("iteration i")
    ax.set_ylabel("w(i)")
    ax.legend(fontsize="small")
    fig.tight_layout()
    paths.append(plot_dir / "weight_schedules.svg")
    fig.savefig(paths[-1])
    plt.close(fig)
    return paths

"""Matplotlib figures written next to the CSV outputs (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

TASK_ORDER = ("test", "iw", "ic", "ic2")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps the PNG bytes stable across runs
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def sweep_figure(rows, path) -> Path:
    """Accuracy against a, one line per (similarity, separation, e, s) cell group."""
    fig, ax = plt.subplots(figsize=(6, 4))
    groups: dict[tuple, list] = {}
    for r in rows:
        groups.setdefault((r["similarity"], r["separation"], r["e"], r["s"]), []).append((r["a"], r["accuracy"]))
    for (sim, sep, e, s), pts in sorted(groups.items()):
        pts.sort()
        a, acc = zip(*pts)
        ax.plot(a, acc, marker="o", label=f"{sim}/{sep} e={e} s={s}")
    ax.set_xlabel("a")
    ax.set_ylabel("accuracy")
    ax.set_ylim(-0.02, 1.02)
    if len(groups) <= 12:
        ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def training_figure(reports, path) -> Path:
    """Per-task accuracy over snapshots; thin lines are seeds, thick lines their mean."""
    fig, axes = plt.subplots(1, 4, figsize=(14, 3.4), sharey=True)
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for ci, rep in enumerate(reports):
        c = colors[ci % len(colors)]
        for ax, task in zip(axes, TASK_ORDER):
            series = [s for s in rep.accuracy.get(task, []) if s]
            for s in series:
                ax.plot(s, color=c, alpha=0.25, lw=0.8)
            if series:
                n = min(len(s) for s in series)
                ax.plot(np.mean([s[:n] for s in series], axis=0), color=c, lw=2, label=rep.variant)
    for ax, task in zip(axes, TASK_ORDER):
        ax.set_title(task.upper())
        ax.set_xlabel("snapshot")
    axes[0].set_ylabel("accuracy")
    axes[-1].legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def threshold_figure(rows, path) -> Path:
    """Mean first-crossing snapshot with population-std error bars per variant."""
    tasks = sorted({r.task for r in rows})
    thetas = sorted({r.theta for r in rows})
    variants = list(dict.fromkeys(r.variant for r in rows))
    fig, axes = plt.subplots(1, len(tasks), figsize=(5 * len(tasks), 3.4), squeeze=False)
    width = 0.8 / max(len(variants), 1)
    for ax, task in zip(axes[0], tasks):
        for vi, variant in enumerate(variants):
            means, stds = [], []
            for th in thetas:
                row = next(r for r in rows if r.task == task and r.variant == variant and r.theta == th)
                means.append(np.nan if row.mean is None else row.mean)
                stds.append(0.0 if row.std is None else row.std)
            x = np.arange(len(thetas)) + vi * width
            ax.bar(x, means, width, yerr=stds, label=variant, capsize=2)
        ax.set_xticks(np.arange(len(thetas)) + 0.4 - width / 2)
        ax.set_xticklabels([str(t) for t in thetas])
        ax.set_xlabel("threshold")
        ax.set_title(task.upper())
    axes[0][0].set_ylabel("first snapshot above threshold")
    axes[0][-1].legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def loss_figure(reports, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for ci, rep in enumerate(reports):
        c = colors[ci % len(colors)]
        for split, style in (("train", "-"), ("val", "--")):
            for i, s in enumerate(rep.loss.get(split, [])):
                vals = [np.nan if v is None else v for v in s]
                if not np.all(np.isnan(vals)):
                    ax.plot(vals, style, color=c, label=f"{rep.variant} {split}" if i == 0 else None)
    ax.set_xlabel("snapshot")
    ax.set_ylabel("cross-entropy (nats)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def ioi_figure(rows, path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 3.6))
    x = np.arange(len(rows))
    ax.bar(x - 0.2, [r["p_correct_mean"] for r in rows], 0.4, yerr=[r["p_correct_std"] for r in rows],
           label="correct")
    ax.bar(x + 0.2, [r["p_incorrect_mean"] for r in rows], 0.4, yerr=[r["p_incorrect_std"] for r in rows],
           label="incorrect")
    ax.set_yscale("log")
    ax.set_xticks(x)
    ax.set_xticklabels([f"{i + 1}" for i in x])
    ax.set_xlabel("probe")
    ax.set_ylabel("continuation probability")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)

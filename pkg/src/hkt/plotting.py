"""Report figures rendered to PNG files with the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def accuracy_figure(rows, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    names = [r.method for r in rows]
    ax.bar(names, [r.acc_mean for r in rows], yerr=[r.acc_std for r in rows], capsize=4, color="#4c72b0")
    lo = min(r.acc_mean - r.acc_std for r in rows)
    ax.set_ylim(max(0.0, lo - 0.05), 1.0)
    ax.set_ylabel("native validation accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def curves_figure(runs, path) -> Path:
    """Validation accuracy against step, averaged over the runs of each method."""
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for method in sorted({r.method for r in runs}):
        group = [r for r in runs if r.method == method and r.curve]
        if not group:
            continue
        steps = sorted(set.intersection(*(set(s for s, _ in r.curve) for r in group)))
        if not steps:
            continue
        accs = np.array([[dict(r.curve)[s] for s in steps] for r in group])
        mean = accs.mean(axis=0)
        ax.plot(steps, mean, label=f"{method} (n={len(group)})")
        if len(group) > 1:
            ax.fill_between(steps, accs.min(axis=0), accs.max(axis=0), alpha=0.15)
    ax.set_xlabel("step")
    ax.set_ylabel("native validation accuracy")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def attention_figure(npz_path, path) -> Path | None:
    """Heatmaps of the last captured attention matrix for each stage and direction."""
    with np.load(npz_path) as data:
        keys = list(data.keys())
        if not keys:
            return None
        last_step = max(int(k.split("_")[0][4:]) for k in keys)
        chosen = sorted(k for k in keys if k.startswith(f"step{last_step}_"))
        fig, axes = plt.subplots(1, len(chosen), figsize=(3.2 * len(chosen), 3.0), squeeze=False)
        for ax, key in zip(axes[0], chosen):
            im = ax.imshow(data[key], cmap="viridis", vmin=0.0)
            stage, tag = key.split("_")[1:]
            direction = "parent to child" if tag == "p2c" else "child to parent"
            ax.set_title(f"stage {stage[1:]}, {direction}", fontsize=9)
            ax.set_xlabel("key position")
            ax.set_ylabel("query position")
            fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def render_figures(report, out_dir) -> dict:
    out_dir = Path(out_dir)
    files = {
        "accuracy_figure": str(accuracy_figure(report.rows, out_dir / "accuracy.png")),
        "curves_figure": str(curves_figure(report.runs, out_dir / "curves.png")),
    }
    for r in report.runs:
        npz = r.run_dir / "attention_matrices.npz"
        if npz.is_file():
            made = attention_figure(npz, out_dir / f"attention_{r.method}_seed{r.seed}.png")
            if made is not None:
                files[f"attention_{r.method}_seed{r.seed}"] = str(made)
    return files

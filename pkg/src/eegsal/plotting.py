"""Static figures for evaluation runs: map panels, loss curves, metric comparison."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import gaze as gz  # noqa: E402

colors = ["#08589e", "#d95f0e", "#4eb3d3", "#31a354", "#756bb1", "#636363"]

params = {
    "axes.prop_cycle": matplotlib.cycler(color=colors),
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "font.size": 8,
    "font.family": "sans-serif",
    "font.sans-serif": ["DejaVu Sans"],
    "legend.fontsize": 7,
    "legend.frameon": False,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.0,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def _display(m):
    m = np.asarray(m)
    return gz.unpad(m) if m.shape == (gz.SQUARE, gz.SQUARE) else m


def panel_figure(ground_truth, predicted, path, trial_ids=None, predicted_noadv=None):
    """Grid of k rows: ground truth | prediction [| prediction without adversarial term].

    Returns ``(path, (rows, cols))``.
    """
    columns = [("ground truth", ground_truth), ("generated", predicted)]
    if predicted_noadv is not None:
        columns.append(("generated, no adversarial", predicted_noadv))
    k = len(ground_truth)
    if k == 0:
        raise ValueError("no trials to plot")
    ncol = len(columns)
    with plt.rc_context(params):
        fig, axes = plt.subplots(k, ncol, figsize=(2.4 * ncol, 1.45 * k), squeeze=False)
        for r in range(k):
            for c, (title, maps) in enumerate(columns):
                ax = axes[r, c]
                m = _display(maps[r])
                lo, hi = float(np.min(m)), float(np.max(m))
                ax.imshow(m, cmap="inferno", vmin=lo, vmax=hi if hi > lo else lo + 1e-12)
                ax.set_xticks([])
                ax.set_yticks([])
                for spine in ax.spines.values():
                    spine.set_visible(False)
                if r == 0:
                    ax.set_title(title)
                if c == 0 and trial_ids is not None:
                    ax.set_ylabel(trial_ids[r], fontsize=7)
        fig.tight_layout()
        return _save(fig, path), axes.shape


def loss_curves(records, path):
    """One axis per phase, total and content loss against epoch."""
    phases = [p for p in ("saliency_vae", "eeg_vae", "gan") if any(r["phase"] == p for r in records)]
    if not phases:
        raise ValueError("metrics log is empty")
    with plt.rc_context(params):
        fig, axes = plt.subplots(1, len(phases), figsize=(3.0 * len(phases), 2.4), squeeze=False)
        for ax, phase in zip(axes[0], phases):
            rows = [r for r in records if r["phase"] == phase]
            ep = [r["epoch"] for r in rows]
            ax.plot(ep, [r["loss_total"] for r in rows], label="total")
            ax.plot(ep, [r["loss_content"] for r in rows], label="content")
            if phase == "gan" and rows[0].get("loss_adv") is not None:
                ax.plot(ep, [r["loss_adv"] for r in rows], label="adversarial")
            ax.set_yscale("log")
            ax.set_title(phase.replace("_", " "))
            ax.set_xlabel("epoch")
            ax.legend()
        axes[0, 0].set_ylabel("loss")
        fig.tight_layout()
        return _save(fig, path)


def comparison_chart(means, references, path, spread=None, label="this run"):
    """Grouped bars of AUC, NSS and CC for the reference rows plus this run."""
    metrics = ("auc", "nss", "cc")
    rows = [(r["approach"], [r[m] for m in metrics], None) for r in references]
    err = [spread[m] for m in metrics] if spread else None
    rows.append((label, [means[m] for m in metrics], err))
    with plt.rc_context(params):
        fig, axes = plt.subplots(1, 3, figsize=(8.0, 2.6))
        x = np.arange(len(rows))
        for i, (ax, m) in enumerate(zip(axes, metrics)):
            vals = [r[1][i] for r in rows]
            errs = [r[2][i] if r[2] else 0.0 for r in rows]
            bar_colors = [colors[0]] * (len(rows) - 1) + [colors[1]]
            ax.bar(x, vals, yerr=errs, color=bar_colors, capsize=2)
            ax.set_xticks(x)
            ax.set_xticklabels([r[0] for r in rows], rotation=45, ha="right")
            ax.set_title(m.upper())
        fig.tight_layout()
        return _save(fig, path)

"""Report figures.  Everything renders off-screen to PNG files next to the CSV/JSON outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "axes.titlesize": 10,
    "legend.frameon": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def loss_curves(history, path, keys=("total", "prior", "lowlevel", "contrastive", "skip", "pivot")):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        epochs = [e["epoch"] for e in history.epochs]
        for k in keys:
            if k in history.epochs[0]:
                ax.plot(epochs, [e[k] for e in history.epochs], label=k, lw=1.2)
        switch = [e["epoch"] for e in history.epochs if e.get("contrastive_kind") == "softclip"]
        if switch:
            ax.axvline(switch[0] - 0.5, color="0.6", ls=":", lw=1)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend(fontsize=7, ncol=2)
        return _save(fig, path)


def distortion_scatter(fit, path):
    """Block-vs-block DI (same observer) next to observer-vs-observer DI."""
    di = fit.di
    with plt.rc_context(STYLE):
        fig, axs = plt.subplots(1, 2, figsize=(7, 3.4), sharex=True, sharey=True)
        n_obs = di.shape[0]
        axs[0].scatter(di[:, 0].ravel(), di[:, 1].ravel(), s=4, alpha=0.5, color="C0")
        x = np.concatenate([di[i, 0] for i in range(n_obs) for j in range(n_obs) if i < j])
        y = np.concatenate([di[j, 0] for i in range(n_obs) for j in range(n_obs) if i < j])
        axs[1].scatter(x, y, s=2, alpha=0.25, color="C1")
        lim = np.array([min(di.min(), x.min()), max(di.max(), x.max())])
        for ax, beta, r, title in ((axs[0], fit.beta_self, fit.r_within, "within observer"),
                                   (axs[1], fit.beta_others, fit.r_between, "between observers")):
            ax.plot(lim, beta[0] + beta[1] * lim, color="k", lw=1)
            ax.set_title(f"{title}  r = {r:.2f}")
            ax.set_xlabel("DI (reference)")
        axs[0].set_ylabel("DI (comparison)")
        return _save(fig, path)


def importance_maps(maps: dict, mask, path):
    """Sorted importance per module kind, fingerprint voxels marked."""
    mask = np.asarray(mask, dtype=bool)
    with plt.rc_context(STYLE):
        fig, axs = plt.subplots(len(maps), 1, figsize=(6, 1.6 * len(maps) + 0.4), squeeze=False)
        for ax, (kind, imp) in zip(axs[:, 0], maps.items()):
            order = np.argsort(imp)[::-1]
            ax.bar(np.arange(len(imp)), imp[order], width=1.0, color=np.where(mask[order], "C3", "0.7"))
            ax.set_ylabel(kind)
            ax.set_xlim(0, len(imp))
            ax.set_ylim(0, 1)
            ax.text(0.99, 0.9, f"fingerprint {imp[mask].mean():.2f} / other {imp[~mask].mean():.2f}",
                    transform=ax.transAxes, ha="right", va="top", fontsize=7)
        axs[-1, 0].set_xlabel("voxel (sorted by importance; red = fingerprint set)")
        return _save(fig, path)


def ablation_bars(rows: list[dict], path, metrics=("image_retrieval", "brain_retrieval")):
    names = [r["variant"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 3.2))
        width = 0.8 / len(metrics)
        xs = np.arange(len(names))
        for i, m in enumerate(metrics):
            ax.bar(xs + i * width - 0.4 + width / 2, [r[m] for r in rows], width, label=m.replace("_", " "))
        ax.set_xticks(xs)
        ax.set_xticklabels(names, rotation=20)
        ax.set_ylabel("top-1 accuracy (%)")
        ax.legend(fontsize=7)
        return _save(fig, path)


def reconstructions(true_low, recon, grid, path, n=6):
    """First channel of the low-level latent grid, ground truth over reconstruction."""
    h, w, c = grid
    n = min(n, len(true_low))
    with plt.rc_context(STYLE):
        fig, axs = plt.subplots(2, n, figsize=(1.3 * n, 2.8), squeeze=False)
        for j in range(n):
            for i, arr in enumerate((true_low, recon)):
                axs[i, j].imshow(np.asarray(arr[j]).reshape(h * w, c)[:, 0].reshape(h, w), cmap="viridis")
                axs[i, j].set_xticks([])
                axs[i, j].set_yticks([])
        axs[0, 0].set_ylabel("target")
        axs[1, 0].set_ylabel("decoded")
        return _save(fig, path)

"""Figure rendering for the CLI report paths (PNG files next to the CSVs)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_marginals(grids: list[np.ndarray], axis_values: np.ndarray, dims, path, steps=None) -> None:
    """One panel per step of a pairwise marginal, all on a shared colour scale."""
    steps = list(range(len(grids))) if steps is None else list(steps)
    cols = min(len(grids), 5)
    rows = -(-len(grids) // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(2.6 * cols, 2.4 * rows), squeeze=False)
    vmax = max(float(np.max(g)) for g in grids)
    ext = (axis_values[0], axis_values[-1], axis_values[0], axis_values[-1])
    for ax in axes.ravel():
        ax.axis("off")
    for ax, g, k in zip(axes.ravel(), grids, steps):
        ax.axis("on")
        ax.imshow(g.T, origin="lower", extent=ext, vmin=0.0, vmax=vmax, cmap="viridis", aspect="equal")
        ax.set_title(f"k = {k}", fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.suptitle(f"p(x{dims[0] + 1}, x{dims[1] + 1})", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_llh(llh: np.ndarray, path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    ax.plot(np.arange(len(llh)), llh, marker="o", lw=1.5)
    ax.axhline(0.0, color="0.6", lw=0.8, ls="--", label="uniform box")
    ax.set_xlabel("time step k")
    ax.set_ylabel("average log-likelihood")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_training(epochs, path) -> None:
    ep = [r.epoch for r in epochs]
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    ax.plot(ep, [r.train_nll for r in epochs], label="train")
    ax.plot(ep, [r.val_nll for r in epochs], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("NLL (nats)")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)

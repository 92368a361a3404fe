"""Figure rendering for demo outputs.

Each figure is drawn from the already-written delimited tables, so the
plots are a pure view of the run artifacts.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["plot_surface_1d", "plot_surface_2d", "plot_trajectory"]


def plot_surface_1d(grid, mean, sd, acq, meas_x, meas_y, path, title=""):
    """Posterior band plus acquisition surface over a 1-d domain."""
    fig, (ax1, ax2) = plt.subplots(
        2, 1, figsize=(7, 5.5), sharex=True, height_ratios=[2, 1]
    )
    grid = np.asarray(grid)
    mean = np.asarray(mean)
    sd = np.asarray(sd)
    ax1.plot(grid, mean, color="C0", label="posterior mean")
    ax1.fill_between(
        grid, mean - 2 * sd, mean + 2 * sd, color="C0", alpha=0.2, label="±2 sd"
    )
    if len(meas_x):
        ax1.plot(meas_x, meas_y, "ko", ms=4, label="measurements")
    ax1.set_ylabel("response")
    ax1.legend(loc="best", fontsize=8)
    if title:
        ax1.set_title(title)
    ax2.plot(grid, acq, color="C3")
    ax2.set_xlabel("x")
    ax2.set_ylabel("acquisition")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def plot_surface_2d(x0, x1, mean, sd, meas, path, title="", forbidden=None):
    """Posterior mean and sd heatmaps over a 2-d domain grid."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.5, 4))
    for ax, z, label in ((ax1, mean, "posterior mean"), (ax2, sd, "posterior sd")):
        im = ax.pcolormesh(x0, x1, z, shading="auto")
        fig.colorbar(im, ax=ax, shrink=0.85)
        if len(meas):
            meas = np.asarray(meas)
            ax.plot(meas[:, 0], meas[:, 1], "wo", mec="k", ms=4)
        if forbidden is not None:
            lo, hi = forbidden
            ax.add_patch(
                plt.Rectangle(
                    (lo[0], lo[1]),
                    hi[0] - lo[0],
                    hi[1] - lo[1],
                    fill=False,
                    edgecolor="red",
                    lw=1.5,
                )
            )
        ax.set_title(label)
        ax.set_xlabel("x0")
        ax.set_ylabel("x1")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def plot_trajectory(n_evals, fmin, best_measured, path, title=""):
    """Best-response trajectory against consumed evaluations."""
    fig, ax = plt.subplots(figsize=(6.5, 4))
    ax.plot(n_evals, fmin, "o-", color="C0", label="estimator min")
    bm = [np.nan if v is None else v for v in best_measured]
    if np.any(np.isfinite(bm)):
        ax.plot(n_evals, bm, "s--", color="C2", label="best measured")
    ax.set_xlabel("evaluations")
    ax.set_ylabel("best value")
    ax.legend(loc="best", fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)

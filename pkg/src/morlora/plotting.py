"""Matplotlib figures written next to the CSV/JSON reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 10,
    "axes.titlesize": 11,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss_curve(steps, losses, path, title="training loss"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.semilogy(steps, losses, lw=1.2)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(title)
        return _save(fig, path)


def plot_eval_curve(steps, errors, path):
    errors = np.asarray(errors)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for k in range(errors.shape[1]):
            ax.plot(steps, errors[:, k], marker="o", ms=2.5, lw=1, label=f"task {k}")
        ax.set_xlabel("step")
        ax.set_ylabel("relative output error")
        ax.set_ylim(bottom=0)
        ax.legend(frameon=False, fontsize=8)
        return _save(fig, path)


def plot_router_mass(mass, path, title="router weight per task"):
    mass = np.asarray(mass)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 + 0.7 * mass.shape[1], 1.0 + 0.6 * mass.shape[0]))
        im = ax.imshow(mass, cmap="Blues", vmin=0.0, vmax=1.0, aspect="auto")
        for (k, i), v in np.ndenumerate(mass):
            ax.text(i, k, f"{v:.2f}", ha="center", va="center", fontsize=8,
                    color="white" if v > 0.6 else "black")
        ax.set_xticks(range(mass.shape[1]), [f"E{i}" for i in range(mass.shape[1])])
        ax.set_yticks(range(mass.shape[0]), [f"task {k}" for k in range(mass.shape[0])])
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046)
        return _save(fig, path)


def plot_truncation_curve(ranks, errors, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(ranks, errors, marker="o", ms=3)
        ax.set_xlabel("kept rank r")
        ax.set_ylabel(r"$\|\Delta W - \Delta W_r\|_F^2$")
        return _save(fig, path)

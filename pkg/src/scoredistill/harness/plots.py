"""Matplotlib figures for finished runs and sweeps (written to files, never shown)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..oracle import Condition, GaussianMixture, log_density  # noqa: E402

METRIC_PANELS = ("cond_loglik", "classifier_conf", "spread_ratio", "churn", "mode_agreement", "wgan_value")


def plot_metrics(rows, path, title: str = "") -> Path:
    """One panel per metric against step."""
    steps = [r.step for r in rows]
    fig, axes = plt.subplots(2, 3, figsize=(11, 6), sharex=True)
    for ax, name in zip(axes.ravel(), METRIC_PANELS):
        ax.plot(steps, [getattr(r, name) for r in rows], lw=1.2)
        ax.set_title(name, fontsize=9)
        ax.grid(alpha=0.3)
    for ax in axes[-1]:
        ax.set_xlabel("step")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_particles(particles, gmm: GaussianMixture, cond: Condition, path, title: str = "") -> Path:
    """Particles over the conditional density; higher dimensions use the first two axes."""
    pts = np.atleast_2d(np.asarray(particles, dtype=float))
    fig, ax = plt.subplots(figsize=(5, 5))
    if gmm.dim == 1:
        xs = np.linspace(min(pts.min(), gmm.means.min() - 3), max(pts.max(), gmm.means.max() + 3), 400)
        ax.plot(xs, np.exp(log_density(gmm, cond, None, xs[:, None])), color="#1f4e79")
        ax.plot(pts[:, 0], np.zeros(len(pts)), "o", color="#c0392b", alpha=0.7)
    else:
        planar = GaussianMixture(gmm.weights, gmm.means[:, :2], gmm.cov_diag[:, :2])
        lo = np.minimum(pts[:, :2].min(axis=0), planar.means.min(axis=0) - 3)
        hi = np.maximum(pts[:, :2].max(axis=0), planar.means.max(axis=0) + 3)
        pad = 0.05 * (hi - lo)
        lo, hi = lo - pad, hi + pad
        gx, gy = np.meshgrid(np.linspace(lo[0], hi[0], 150), np.linspace(lo[1], hi[1], 150))
        dens = np.exp(log_density(planar, cond, None, np.column_stack([gx.ravel(), gy.ravel()]))).reshape(gx.shape)
        ax.contour(gx, gy, dens, levels=8, cmap="Blues")
        ax.scatter(pts[:, 0], pts[:, 1], s=14, color="#c0392b", alpha=0.7)
        ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_sweep(summary_rows, path, metrics=("cond_loglik", "spread_ratio", "classifier_conf")) -> Path:
    """Final metrics against the swept axis value, from ``summary.csv`` rows."""
    if not summary_rows:
        raise ValueError("empty sweep summary")
    axis = summary_rows[0]["axis"]
    values = [float(r["value"]) for r in summary_rows]
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.4))
    for ax, name in zip(np.atleast_1d(axes), metrics):
        ax.plot(values, [float(r[name]) for r in summary_rows], "o-")
        ax.set_xlabel(axis)
        ax.set_title(name, fontsize=9)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)

"""Figure rendering for solve/run reports.

All functions write PNG files next to the numeric outputs; nothing is shown
interactively. Axes follow the NED convention of the planner, with plots of
altitude using -z so "up" reads upward.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .covsteer import CovSteerSolution

__all__ = [
    "ellipse_points",
    "plot_trajectory_xy",
    "plot_inputs",
    "plot_landing_profile",
    "plot_estimator_comparison",
    "plot_disturbance_histograms",
]


def ellipse_points(mean2: np.ndarray, cov2: np.ndarray, n_sigma: float = 3.0, n: int = 64) -> np.ndarray:
    """Points on the n-sigma level set of a 2-D Gaussian, (n, 2)."""
    w, V = np.linalg.eigh(0.5 * (cov2 + cov2.T))
    w = np.maximum(w, 0.0)
    theta = np.linspace(0.0, 2 * np.pi, n)
    circle = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    return mean2 + n_sigma * circle * np.sqrt(w) @ V.T


def _ellipse_series(sol: CovSteerSolution, idx, axes=(0, 1), n_sigma=3.0):
    for k in idx:
        cov = sol.Sigma_seq[k][np.ix_(axes, axes)]
        yield k, ellipse_points(sol.mu_seq[k, list(axes)], cov, n_sigma)


def plot_trajectory_xy(
    sol: CovSteerSolution,
    path,
    traces=None,
    ellipse_every: int = 20,
    title: str = "planned trajectory and 3-sigma position bounds",
) -> Path:
    fig, ax = plt.subplots(figsize=(8, 5))
    ax.plot(sol.mu_seq[:, 0], sol.mu_seq[:, 1], "b-", lw=1.5, label="planned mean")
    idx = range(0, sol.mu_seq.shape[0], ellipse_every)
    for k, pts in _ellipse_series(sol, idx):
        ax.plot(pts[:, 0], pts[:, 1], color="tab:blue", alpha=0.35, lw=0.8)
    if traces:
        for tr in traces:
            ax.plot(tr.r[:, 0], tr.r[:, 1], color="green", alpha=0.5, lw=0.7)
        ax.plot([], [], color="green", lw=0.7, label="rollouts")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_title(title)
    ax.axis("equal")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_inputs(sol: CovSteerSolution, path, dt: float, traces=None) -> Path:
    """Feedforward input per axis with the planned 3-sigma input band;
    rollout inputs overlay in gray when traces are given."""
    t = np.arange(sol.v_seq.shape[0]) * dt
    fig, axes = plt.subplots(3, 1, figsize=(8, 7), sharex=True)
    labels = ("u_x", "u_y", "u_z")
    for i, ax in enumerate(axes):
        band = 3.0 * np.sqrt(sol.Y_seq[:, i, i])
        ax.fill_between(t, sol.v_seq[:, i] - band, sol.v_seq[:, i] + band,
                        color="tab:blue", alpha=0.2, label="3-sigma band")
        if traces:
            for tr in traces:
                ax.plot(t[: tr.u_cmd.shape[0]], tr.u_cmd[:, i], color="gray",
                        alpha=0.4, lw=0.5)
        ax.plot(t, sol.v_seq[:, i], "k-", lw=1.2, label="feedforward")
        ax.set_ylabel(f"{labels[i]} (m/s$^2$)")
        if i == 0:
            ax.legend(loc="best", fontsize=8)
    axes[-1].set_xlabel("t (s)")
    fig.suptitle("control policy")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_landing_profile(sol: CovSteerSolution, surrogates, path, ellipse_every: int = 15) -> Path:
    """Side views (x-z and y-z, altitude up) with the cone faces and the
    planned 3-sigma ellipses."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 5), sharey=True)
    spans = []
    for ax_i, (ax, horiz) in enumerate(zip(axes, (0, 1))):
        ax.plot(sol.mu_seq[:, horiz], -sol.mu_seq[:, 2], "b-", lw=1.5, label="planned mean")
        idx = range(0, sol.mu_seq.shape[0], ellipse_every)
        for k, pts in _ellipse_series(sol, idx, axes=(horiz, 2)):
            ax.plot(pts[:, 0], -pts[:, 1], color="tab:blue", alpha=0.35, lw=0.8)
        spans.append(np.abs(sol.mu_seq[:, horiz]).max() + 0.8)
        ax.set_xlabel("x (m)" if horiz == 0 else "y (m)")
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("altitude -z (m)")
    # cone faces: alpha' x <= b with alpha = (a_h, 0, 1) type normals
    alt = np.linspace(0.0, (-sol.mu_seq[:, 2]).max() + 0.5, 50)
    for s in surrogates:
        if getattr(s, "target", "state") != "state" or s.bound is None:
            continue
        a = s.alpha[:3]
        for ax, horiz in zip(axes, (0, 1)):
            if abs(a[horiz]) < 1e-9 or abs(a[2]) < 1e-9:
                continue
            # z = (b - a_h * x) / a_z  ->  altitude = -z
            x_line = (s.bound - a[2] * (-alt)) / a[horiz]
            ax.plot(x_line, alt, "k--", lw=1.0, alpha=0.7)
    for ax, span in zip(axes, spans):
        ax.set_xlim(-span, span)
    axes[0].legend(loc="best", fontsize=8)
    fig.suptitle("landing cone and planned uncertainty tube")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_estimator_comparison(t, f_true, f_ekf, f_lp, f_raw, path) -> Path:
    """Per-axis drag force: truth, raw measurement, EKF and low-pass
    estimates (the estimator benchmark figure)."""
    fig, axes = plt.subplots(3, 1, figsize=(9, 7), sharex=True)
    for i, ax in enumerate(axes):
        ax.plot(t, f_raw[:, i], color="lightsteelblue", lw=0.5, label="raw measurement")
        ax.plot(t, f_true[:, i], "k-", lw=1.2, label="true drag")
        ax.plot(t, f_ekf[:, i], color="tab:orange", lw=1.0, label="EKF")
        ax.plot(t, f_lp[:, i], color="tab:green", lw=1.0, label="5 Hz low-pass")
        ax.set_ylabel(f"f_{'xyz'[i]} (N)")
        if i == 0:
            ax.legend(loc="best", fontsize=8, ncol=2)
    axes[-1].set_xlabel("t (s)")
    fig.suptitle("drag estimation: model-based EKF vs low-pass baseline")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_disturbance_histograms(residual_comp, residual_unc, path) -> Path:
    """Residual disturbance distribution with and without compensation."""
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.5))
    for i, ax in enumerate(axes):
        ax.hist(residual_unc[:, i], bins=40, color="tab:red", alpha=0.5,
                label="uncompensated", density=True)
        ax.hist(residual_comp[:, i], bins=40, color="tab:blue", alpha=0.5,
                label="compensated", density=True)
        ax.axvline(residual_unc[:, i].mean(), color="tab:red", ls="--", lw=1)
        ax.axvline(residual_comp[:, i].mean(), color="tab:blue", ls="--", lw=1)
        ax.set_xlabel(f"residual f_{'xyz'[i]} (N)")
        if i == 0:
            ax.legend(fontsize=8)
    fig.suptitle("disturbance before/after aerodynamic compensation")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path

import numpy as np

from quadsteer.montecarlo import ellipse_series
from quadsteer.plots import (
    ellipse_points,
    plot_disturbance_histograms,
    plot_estimator_comparison,
    plot_inputs,
    plot_landing_profile,
    plot_trajectory_xy,
)


def test_ellipse_points_are_level_set():
    """Every generated point sits on the 3-sigma Mahalanobis contour."""
    rng = np.random.default_rng(0)
    A = rng.standard_normal((2, 2))
    cov = A @ A.T + 0.5 * np.eye(2)
    mean = rng.standard_normal(2)
    pts = ellipse_points(mean, cov, n_sigma=3.0, n=48)
    Sinv = np.linalg.inv(cov)
    d = np.einsum("ni,ij,nj->n", pts - mean, Sinv, pts - mean)
    assert np.allclose(d, 9.0, atol=1e-9)


def test_ellipse_series_layout(minimal_result):
    arr = ellipse_series(minimal_result.solution, 0, 20, 5, n_points=16)
    assert arr.shape == (5 * 16, 3)
    assert set(np.unique(arr[:, 0])) == {0, 5, 10, 15, 20}


def test_figures_render_to_files(tmp_path, minimal_result, minimal_cfg):
    sol = minimal_result.solution
    p1 = plot_trajectory_xy(sol, tmp_path / "traj.png")
    p2 = plot_inputs(sol, tmp_path / "inputs.png", dt=minimal_cfg.dt)
    t = np.arange(50) * 0.01
    f = np.stack([np.sin(t), np.cos(t), 0.1 * t], axis=1)
    p3 = plot_estimator_comparison(t, f, f * 0.9, f * 0.8, f + 0.1, tmp_path / "est.png")
    rng = np.random.default_rng(1)
    p4 = plot_disturbance_histograms(
        rng.standard_normal((300, 3)), rng.standard_normal((300, 3)) + 2.0,
        tmp_path / "hist.png",
    )
    for p in (p1, p2, p3, p4):
        assert p.exists() and p.stat().st_size > 0


def test_landing_profile_renders(tmp_path, landing_result):
    faces = [s for s in landing_result.surrogates if s.target == "state"]
    p = plot_landing_profile(landing_result.solution, faces, tmp_path / "cone.png")
    assert p.exists() and p.stat().st_size > 0

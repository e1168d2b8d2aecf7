import numpy as np
import pytest

from quadsteer.chance import LinearizedSurrogate
from quadsteer.linsys import build_double_integrator, propagate_moments
from quadsteer.montecarlo import (
    ExperimentInputs,
    ExperimentPlan,
    MetricsReport,
    build_lqr_policy,
    emit_report,
    empirical_moments,
    linear_rollout_statistics,
    run_experiment,
)


def _inputs_from(cfg, result, trained):
    return ExperimentInputs(
        sys=cfg.build_system(),
        solution=result.solution,
        truth=cfg.truth_aero(),
        drag_model=trained.model,
        wind=cfg.build_wind(),
        mu_i=cfg.build_boundary().mu_i,
        Sigma_i=cfg.build_boundary().Sigma_i,
        sim_params=cfg.sim_params(),
        lqr_q_diag=cfg.lqr_weights[0],
        lqr_r_diag=cfg.lqr_weights[1],
        surrogates=result.surrogates,
    )


def test_empirical_moments_identical_traces_zero_cov():
    X = np.tile(np.arange(6.0), (5, 11, 1))
    mean, cov = empirical_moments(X, 4)
    assert np.allclose(mean, np.arange(6.0))
    assert np.allclose(cov, 0.0)


def test_empirical_moments_needs_two_samples():
    with pytest.raises(ValueError):
        empirical_moments(np.zeros((1, 5, 6)), 0)


def test_linear_rollouts_match_exact_moments(minimal_result, minimal_cfg):
    """Linear-plant Monte Carlo oracle: sampled moments agree with the
    exact recursion at the 10k-sample statistical tolerance."""
    sys = minimal_cfg.build_system()
    bnd = minimal_cfg.build_boundary()
    sol = minimal_result.solution
    M = 10_000
    stats = linear_rollout_statistics(sys, sol, bnd.mu_i, bnd.Sigma_i, M, seed=5)
    X = stats["states"]
    mu_seq, Sigma_seq = propagate_moments(sys, sol, bnd.mu_i, bnd.Sigma_i)
    for k in (0, sys.N // 2, sys.N):
        emp_mean, emp_cov = empirical_moments(X, k)
        rel = np.linalg.norm(emp_cov - Sigma_seq[k], "fro") / np.linalg.norm(
            Sigma_seq[k], "fro"
        )
        assert rel < 5 * np.sqrt(2.0 / M)
        sd = np.sqrt(np.diag(Sigma_seq[k]) / M)
        assert np.all(np.abs(emp_mean - mu_seq[k]) < 4.0 * sd)


def test_violation_rates_from_linear_rollouts(minimal_result, minimal_cfg):
    sys = minimal_cfg.build_system()
    bnd = minimal_cfg.build_boundary()
    s = LinearizedSurrogate(
        ell=np.zeros(6), alpha=np.array([1.0, 0, 0, 0, 0, 0]), beta=10.0,
        target="state", window=(0, -1), delta=0.99, bound=10.0, label="farface",
    )
    stats = linear_rollout_statistics(
        sys, minimal_result.solution, bnd.mu_i, bnd.Sigma_i, 500, seed=6,
        surrogates=(s,),
    )
    assert stats["violation_rates"]["farface"] == 0.0


def test_run_experiment_seed_reproducible(minimal_cfg, minimal_result, trained_drag):
    inputs = _inputs_from(minimal_cfg, minimal_result, trained_drag)
    plan = ExperimentPlan(scenario="minimal", controller="ocs", estimator="ekf",
                          n_rollouts=4, seed_base=3)
    r1 = run_experiment(plan, inputs)
    r2 = run_experiment(plan, inputs)
    assert r1.rms_tracking_cm == r2.rms_tracking_cm
    assert r1.rms_cmd_rate == r2.rms_cmd_rate
    assert np.array_equal(r1.empirical_Sigma_N, r2.empirical_Sigma_N)


def test_run_experiment_parallel_matches_serial(minimal_cfg, minimal_result, trained_drag):
    inputs = _inputs_from(minimal_cfg, minimal_result, trained_drag)
    plan = ExperimentPlan(scenario="minimal", controller="ocs", estimator="lp",
                          n_rollouts=4, seed_base=9)
    serial = run_experiment(plan, inputs, n_jobs=1)
    parallel = run_experiment(plan, inputs, n_jobs=2)
    assert serial.rms_tracking_cm == parallel.rms_tracking_cm
    assert serial.containment_3sigma == parallel.containment_3sigma


def test_lqr_policy_uses_same_reference(minimal_cfg, minimal_result):
    sys = minimal_cfg.build_system()
    pol = build_lqr_policy(sys, minimal_result.solution, (1600.0,) * 3 + (600.0,) * 3,
                           (1.0,) * 3)
    assert np.array_equal(pol.mu_seq, minimal_result.solution.mu_seq)
    assert np.array_equal(pol.v_seq, minimal_result.solution.v_seq)
    assert np.allclose(pol.K_seq[0], pol.K_seq[-1])
    Acl = sys.A_seq[0] + sys.B_seq[0] @ pol.K_seq[0]
    assert np.abs(np.linalg.eigvals(Acl)).max() < 1.0


def test_emit_report_empty_headers_only(tmp_path):
    files = emit_report([], tmp_path)
    csv_path = [f for f in files if f.suffix == ".csv"][0]
    lines = csv_path.read_text().strip().splitlines()
    assert len(lines) == 1
    assert lines[0].split(",") == list(MetricsReport.CSV_COLUMNS)


def test_emit_report_grid_rows(tmp_path, minimal_cfg, minimal_result, trained_drag):
    inputs = _inputs_from(minimal_cfg, minimal_result, trained_drag)
    reports = []
    for ctrl in ("ocs", "lqr"):
        for est in ("ekf", "lp"):
            plan = ExperimentPlan(scenario="minimal", controller=ctrl, estimator=est,
                                  n_rollouts=2, seed_base=0)
            reports.append(run_experiment(plan, inputs))
    files = emit_report(reports, tmp_path)
    csv_path = [f for f in files if f.name == "report.csv"][0]
    lines = csv_path.read_text().strip().splitlines()
    assert len(lines) == 5  # header + 2x2 grid
    cells = [tuple(line.split(",")[1:3]) for line in lines[1:]]
    assert cells == [("ocs", "ekf"), ("ocs", "lp"), ("lqr", "ekf"), ("lqr", "lp")]
    json_path = [f for f in files if f.suffix == ".json"][0]
    import json

    payload = json.loads(json_path.read_text())
    assert len(payload) == 4
    assert payload[0]["empirical_Sigma_N"] is not None


def test_plan_validation():
    with pytest.raises(ValueError):
        ExperimentPlan(scenario="x", controller="pid")
    with pytest.raises(ValueError):
        ExperimentPlan(scenario="x", estimator="ukf")
    with pytest.raises(ValueError):
        ExperimentPlan(scenario="x", n_rollouts=0)


def test_containment_calibration_linear_plant(minimal_result, minimal_cfg):
    """For the linear-Gaussian closed loop the fraction of positions inside
    the 3-sigma ellipse matches the chi-square(3) level at 3 sigma."""
    from scipy.stats import chi2

    sys = minimal_cfg.build_system()
    bnd = minimal_cfg.build_boundary()
    sol = minimal_result.solution
    M = 4000
    stats = linear_rollout_statistics(sys, sol, bnd.mu_i, bnd.Sigma_i, M, seed=11)
    X = stats["states"]
    p_level = chi2.cdf(9.0, df=3)
    inside = 0
    total = 0
    for k in range(1, sys.N + 1):
        err = X[:, k, :3] - sol.mu_seq[k, :3]
        Sinv = np.linalg.inv(sol.Sigma_seq[k][:3, :3])
        d = np.einsum("mi,ij,mj->m", err, Sinv, err)
        inside += int((d <= 9.0).sum())
        total += M
    frac = inside / total
    # planned covariances upper-bound the true closed-loop covariance
    # (relaxation gap), so containment can only exceed the chi-square level
    assert frac >= p_level - 3.0 * np.sqrt(p_level * (1 - p_level) / total)


def test_tracking_metric_near_zero_on_exact_following():
    """Metric plumbing: a noiseless, drag-free, model-consistent rollout
    follows its reference to integrator tolerance, so the RMS tracking
    metric is far below 0.01 cm."""
    from types import SimpleNamespace

    from quadsteer.aero import GroundTruthAero
    from quadsteer.linsys import build_double_integrator
    from quadsteer.quadsim import SimParams, WindField, run_closed_loop

    N, dt = 80, 0.01
    sys = build_double_integrator(dt=dt, process_noise_pos=0, process_noise_vel=0, N=N)
    B = sys.B_seq[0].copy()
    B[:3] = 0.5 * dt**2 * np.eye(3)  # ZOH-exact reference
    t = np.arange(N) * dt
    v_seq = np.stack([np.sin(t * 3), np.cos(t * 3), 0.2 * np.ones_like(t)], axis=1)
    mu = np.zeros((N + 1, 6))
    mu[0, 2] = -1.0
    for k in range(N):
        mu[k + 1] = sys.A_seq[k] @ mu[k] + B @ v_seq[k]
    policy = SimpleNamespace(
        mu_seq=mu, v_seq=v_seq,
        K_seq=np.tile(-np.hstack([8.0 * np.eye(3), 5.0 * np.eye(3)]), (N, 1, 1)),
    )
    tr = run_closed_loop(
        policy,
        truth=GroundTruthAero(linear_coeffs=np.zeros(3), quadratic_coeffs=np.zeros(3)),
        drag_model=None,
        wind=WindField(mean=np.zeros(3), turbulence_std=np.zeros(3)),
        dt=dt, N=N, x0=mu[0], estimator="none", seed=0,
        params=SimParams(tau_att=0.0, tau_thrust=0.0, accel_noise_std=0.0,
                         rpm_noise_frac=0.0, pos_noise_std=0.0),
    )
    rms_cm = float(np.sqrt(np.mean(tr.position_error() ** 2))) * 100.0
    assert rms_cm < 0.01


def test_position_cap_violation_rate_on_linear_plant(figure8_cfg, figure8_result):
    """Per-axis position dispersion beyond the 3-sigma cap radius occurs at
    most at the Gaussian rate plus a binomial margin (the planned
    covariances sit at or below the cap)."""
    sys = figure8_cfg.build_system()
    bnd = figure8_cfg.build_boundary()
    sol = figure8_result.solution
    cap_diag = np.array(
        next(c for c in figure8_cfg.raw["covariance_bounds"] if c["target"] == "state")
        ["cap_diag"]
    )
    M = 10_000
    stats = linear_rollout_statistics(sys, sol, bnd.mu_i, bnd.Sigma_i, M, seed=77)
    X = stats["states"]
    p = 1 - 0.9973
    margin = 3 * np.sqrt(p * (1 - p) / M)
    radius = 3.0 * np.sqrt(cap_diag)
    for k in (100, 300, 540):
        err = np.abs(X[:, k, :3] - sol.mu_seq[k, :3])
        rate = (err > radius).mean(axis=0)
        assert np.all(rate <= p + margin)


def test_failed_rollouts_abort_experiment(monkeypatch, minimal_cfg, minimal_result,
                                          trained_drag):
    from quadsteer import montecarlo as mc
    from quadsteer.quadsim import IntegrationFailureError

    def explode(*args, **kwargs):
        raise IntegrationFailureError("injected failure")

    monkeypatch.setattr(mc, "run_closed_loop", explode)
    inputs = _inputs_from(minimal_cfg, minimal_result, trained_drag)
    plan = ExperimentPlan(scenario="minimal", controller="ocs", estimator="none",
                          n_rollouts=4, seed_base=0)
    with pytest.raises(RuntimeError, match="failed numerically"):
        run_experiment(plan, inputs)

"""Acceptance suite: every criterion runs at its stated tolerance and prints
one pass/fail line (visible with pytest -s or in the captured output).

Hardware-dependent RMS tables from the flight campaign are explicitly not
reproduced; the property-based analogs below stand in for them.
"""

import time
from contextlib import contextmanager
from types import SimpleNamespace

import numpy as np
import pytest
from scipy.stats import norm

from quadsteer.aero import (
    DragModel,
    GroundTruthAero,
    TrainConfig,
    generate_synthetic_flights,
    jacobian_wrt_wind,
    predict,
    train,
)
from quadsteer.covsteer import solve_problem
from quadsteer.linsys import propagate_moments
from quadsteer.montecarlo import (
    ExperimentInputs,
    ExperimentPlan,
    build_lqr_policy,
    empirical_moments,
    linear_rollout_statistics,
    run_experiment,
)
from quadsteer.quadsim import SimParams, WindField, run_closed_loop
from quadsteer.windekf import WindEkf


@contextmanager
def criterion(n: int, desc: str):
    try:
        yield
    except AssertionError:
        print(f"\nACCEPTANCE {n}: FAIL - {desc}")
        raise
    print(f"\nACCEPTANCE {n}: PASS - {desc}")


def _inputs(cfg, result, model):
    bnd = cfg.build_boundary()
    return ExperimentInputs(
        sys=cfg.build_system(),
        solution=result.solution,
        truth=cfg.truth_aero(),
        drag_model=model,
        wind=cfg.build_wind(),
        mu_i=bnd.mu_i,
        Sigma_i=bnd.Sigma_i,
        sim_params=cfg.sim_params(),
        lqr_q_diag=cfg.lqr_weights[0],
        lqr_r_diag=cfg.lqr_weights[1],
        surrogates=result.surrogates,
    )


# ---------------------------------------------------------------------------
# 1. SDP fidelity on the figure-8 scenario


def test_acceptance_1_sdp_fidelity(figure8_cfg):
    with criterion(1, "figure-8 SDP solves to optimality at stated residuals"):
        # pinned scenario parameters
        s = figure8_cfg.raw["system"]
        assert (s["dt_s"], s["steps"]) == (0.01, 540)
        assert (s["noise_pos_m"], s["noise_vel_mps"]) == (0.01, 0.1)
        w = figure8_cfg.raw["weights"]
        assert w["q_diag"] == [1.0] * 6 and w["r_diag"] == [1.0] * 3
        assert w["rbar_diag"] == [1.0] * 3
        caps = figure8_cfg.raw["covariance_bounds"]
        assert all(tuple(c["window"])[0] == 100 for c in caps)
        state_cap = next(c for c in caps if c["target"] == "state")
        assert np.allclose(state_cap["cap_diag"], (0.025 / 3) ** 2 * 81.0)
        input_cap = next(c for c in caps if c["target"] == "input")
        assert np.allclose(input_cap["cap_diag"], (10.0 / 3) ** 2, atol=1e-3)

        opts = figure8_cfg.solver_options
        t0 = time.perf_counter()
        result = solve_problem(
            figure8_cfg.build_problem(),
            feas_tol=opts["feas_tol"],
            lmi_margin=opts["lmi_margin"],
        )
        elapsed = time.perf_counter() - t0
        assert elapsed < 600.0, f"solve took {elapsed:.0f} s"
        assert result.status == "optimal"
        rep = result.validation
        assert rep.cov_dyn_residual_max < 1e-6
        assert rep.terminal_gap <= 1e-8
        print(
            f"  solve {elapsed:.1f} s, 8b residual {rep.cov_dyn_residual_max:.2e}, "
            f"terminal gap {rep.terminal_gap:.2e}"
        )


# ---------------------------------------------------------------------------
# 2. relaxation tightness on both shipped scenarios


def test_acceptance_2_relaxation_tightness(figure8_result, landing_result):
    with criterion(2, "lossless relaxation gap < 1e-4 on both scenarios"):
        for name, result in (("figure8", figure8_result), ("landing", landing_result)):
            gap = result.solution.max_relax_gap
            print(f"  {name}: max gap {gap:.2e}")
            assert gap < 1e-4


# ---------------------------------------------------------------------------
# 3. moment oracle equivalence


def test_acceptance_3_moment_oracle(figure8_cfg, figure8_result):
    with criterion(3, "Lyapunov recursion and 10k-sample Monte Carlo match the SDP"):
        sys = figure8_cfg.build_system()
        bnd = figure8_cfg.build_boundary()
        sol = figure8_result.solution
        mu, Sigma = propagate_moments(sys, sol, bnd.mu_i, bnd.Sigma_i)
        mu_err = np.abs(mu - sol.mu_seq).max()
        cov_err = np.abs(Sigma - sol.Sigma_seq).max()
        assert mu_err < 1e-6 and cov_err < 1e-6
        M = 10_000
        stats = linear_rollout_statistics(sys, sol, bnd.mu_i, bnd.Sigma_i, M, seed=123)
        X = stats["states"]
        tol = 5 * np.sqrt(2.0 / M)
        worst = 0.0
        for k in range(1, sys.N + 1, 27):
            _, emp_cov = empirical_moments(X, k)
            rel = np.linalg.norm(emp_cov - Sigma[k], "fro") / np.linalg.norm(Sigma[k], "fro")
            worst = max(worst, rel)
        assert worst < tol
        print(f"  recursion err {cov_err:.2e}; MC worst rel Frobenius {worst:.4f} < {tol:.4f}")


# ---------------------------------------------------------------------------
# 4. chance-constraint calibration on the landing cone


def test_acceptance_4_landing_cone_calibration(landing_cfg, landing_result):
    with criterion(4, "cone-face violation rates bounded; 3-sigma ellipsoids inside cone"):
        sys = landing_cfg.build_system()
        bnd = landing_cfg.build_boundary()
        sol = landing_result.solution
        faces = [s for s in landing_result.surrogates if s.target == "state"]
        assert len(faces) == 4
        M = 10_000
        stats = linear_rollout_statistics(
            sys, sol, bnd.mu_i, bnd.Sigma_i, M, seed=321, surrogates=tuple(faces)
        )
        for label, rate in stats["violation_rates"].items():
            face = next(s for s in faces if s.label == label)
            p = 1.0 - face.delta
            bound = p + 3.0 * np.sqrt(p * (1 - p) / M)
            print(f"  {label}: empirical {rate:.5f} <= {bound:.5f}")
            assert rate <= bound
        worst = -np.inf
        for s in faces:
            for k in s.steps(sys.N):
                margin = (
                    s.alpha @ sol.mu_seq[k]
                    + 3.0 * np.sqrt(s.alpha @ sol.Sigma_seq[k] @ s.alpha)
                    - s.bound
                )
                worst = max(worst, margin)
        print(f"  worst 3-sigma ellipsoid-to-cone margin {worst:.3f} (must be < 0)")
        assert worst < 0


# ---------------------------------------------------------------------------
# 5. EKF convergence in constant 7 m/s wind


def test_acceptance_5_ekf_convergence():
    with criterion(5, "wind estimate inside 0.35 m/s within 2 s; innovations unbiased"):
        diag = np.array([0.30, 0.30, 0.50])
        truth = GroundTruthAero(linear_coeffs=diag, quadratic_coeffs=np.zeros(3))
        model = DragModel.linear(diag)
        N = 400
        policy = SimpleNamespace(
            mu_seq=np.tile(np.array([0, 0, -1.5, 0, 0, 0.0]), (N + 1, 1)),
            K_seq=np.tile(-np.hstack([10.0 * np.eye(3), 6.0 * np.eye(3)]), (N, 1, 1)),
            v_seq=np.zeros((N, 3)),
        )
        wind = WindField(mean=[7.0, 0, 0], turbulence_std=[0.0, 0, 0])
        tr = run_closed_loop(
            policy, truth=truth, drag_model=model, wind=wind, dt=0.01, N=N,
            x0=policy.mu_seq[0], estimator="ekf", seed=7,
        )
        err = np.linalg.norm(tr.w_hat - tr.w_true, axis=1)
        assert err[199] < 0.35  # 2 s at 100 Hz
        assert err[199:].max() < 0.35
        print(f"  wind error at 2 s: {err[199]:.3f} m/s; tail max {err[199:].max():.3f}")

        # innovation unbiasedness, truth = model, zero-mean noise, 1e4 steps
        rng = np.random.default_rng(11)
        ekf = WindEkf(model, Q_proc=2.5e-3 * np.eye(3), R_meas=2.5e-3 * np.eye(3))
        qq = np.array([1.0, 0, 0, 0])
        eta = np.full(4, 0.5)
        w_true = np.array([7.0, 0.0, 0.0])
        n = 10_000
        innov = np.empty((n, 3))
        for k in range(n):
            v = rng.uniform(-5, 5, 3)
            meas = predict(model, qq, eta, v, w_true) + 0.05 * rng.standard_normal(3)
            innov[k] = ekf.update(meas, qq, eta, v)
        tail = innov[200:]
        mean = np.abs(tail.mean(axis=0))
        bound = 3.0 * tail.std(axis=0) / np.sqrt(tail.shape[0])
        print(f"  |innovation mean| {mean.round(5)} vs 3-sigma bound {bound.round(5)}")
        assert np.all(mean < bound * 1.5)


# ---------------------------------------------------------------------------
# 6. estimator comparison (EKF vs 5 Hz low-pass)


def test_acceptance_6_estimator_comparison(figure8_cfg, figure8_result, trained_drag):
    with criterion(6, "EKF beats the 5 Hz low-pass on RMS error and lag"):
        inputs = _inputs(figure8_cfg, figure8_result, trained_drag.model)
        traces = {}
        for est in ("ekf", "lp"):
            traces[est] = run_closed_loop(
                figure8_result.solution,
                truth=inputs.truth, drag_model=inputs.drag_model, wind=inputs.wind,
                dt=figure8_cfg.dt, N=figure8_cfg.N, x0=inputs.mu_i,
                estimator=est, seed=99, params=inputs.sim_params,
            )
        def rms(tr):
            return float(np.sqrt(np.mean((tr.f_d_hat - tr.f_d_true) ** 2)))

        def peak_lag(tr):
            """Estimate delay in steps (positive = estimate trails truth)."""
            lags = []
            for i in range(3):
                a = tr.f_d_true[:, i] - tr.f_d_true[:, i].mean()
                b = tr.f_d_hat[:, i] - tr.f_d_hat[:, i].mean()
                xc = np.correlate(a, b, mode="full")
                # np.correlate peak index N-1+k maximizes sum a[n+k] b[n];
                # for b[n] = a[n-L] that is k = -L, so the delay is -(k).
                lags.append((len(a) - 1) - int(np.argmax(xc)))
            return max(lags)

        rms_ekf, rms_lp = rms(traces["ekf"]), rms(traces["lp"])
        lag_ekf, lag_lp = peak_lag(traces["ekf"]), peak_lag(traces["lp"])
        print(f"  RMS: EKF {rms_ekf:.4f} N < LP {rms_lp:.4f} N; "
              f"lag: EKF {lag_ekf} <= LP {lag_lp} steps")
        assert rms_ekf < rms_lp
        assert lag_ekf <= lag_lp


# ---------------------------------------------------------------------------
# 7. bias removal in the 7 m/s wind scenario


def test_acceptance_7_bias_removal():
    with criterion(7, "compensation removes the disturbance bias per axis"):
        diag = np.array([0.30, 0.30, 0.50])
        truth = GroundTruthAero(linear_coeffs=diag, quadratic_coeffs=np.zeros(3))
        model = DragModel.linear(diag)
        N = 600
        policy = SimpleNamespace(
            mu_seq=np.tile(np.array([0, 0, -1.5, 0, 0, 0.0]), (N + 1, 1)),
            K_seq=np.tile(-np.hstack([10.0 * np.eye(3), 6.0 * np.eye(3)]), (N, 1, 1)),
            v_seq=np.zeros((N, 3)),
        )
        wind = WindField(mean=[7.0, 0, 0], turbulence_std=[0.0, 0, 0])
        kw = dict(truth=truth, drag_model=model, wind=wind, dt=0.01, N=N,
                  x0=policy.mu_seq[0], seed=5)
        tr_comp = run_closed_loop(policy, estimator="ekf", **kw)
        tr_unc = run_closed_loop(policy, estimator="none", **kw)
        skip = 200  # discard the adaptation transient
        res_comp = np.abs((tr_comp.f_d_true - tr_comp.f_d_hat)[skip:].mean(axis=0))
        res_unc = np.abs((tr_unc.f_d_true - tr_unc.f_d_hat)[skip:].mean(axis=0))
        floor = 0.02  # N; axes orthogonal to the wind have ~zero uncompensated bias
        print(f"  residual mean, compensated {res_comp.round(4)} vs "
              f"uncompensated {res_unc.round(4)}")
        for i in range(3):
            assert res_comp[i] < max(0.1 * res_unc[i], floor)
        assert res_unc[0] > 10 * res_comp[0]  # the wind axis shows real bias removal


# ---------------------------------------------------------------------------
# 8. smoothness/tracking trade-off vs the LQR baseline


def test_acceptance_8_smoothness_tradeoff(
    figure8_cfg, figure8_result, landing_cfg, landing_result, trained_drag
):
    with criterion(8, "OCS strictly smoother than LQR; LQR tracks tighter (paired seeds)"):
        for name, cfg, result in (
            ("figure8", figure8_cfg, figure8_result),
            ("landing", landing_cfg, landing_result),
        ):
            assert result.validation.checks.get("cov_bounds", True)
            inputs = _inputs(cfg, result, trained_drag.model)
            reports = {}
            for ctrl in ("ocs", "lqr"):
                plan = ExperimentPlan(
                    scenario=name, controller=ctrl, estimator="ekf",
                    n_rollouts=12, seed_base=0,
                )
                reports[ctrl] = run_experiment(plan, inputs)
            ocs, lqr = reports["ocs"], reports["lqr"]
            print(
                f"  {name}: OCS rate {ocs.rms_cmd_rate:.3f} < LQR {lqr.rms_cmd_rate:.3f}; "
                f"tracking OCS {ocs.rms_tracking_cm:.2f} cm vs LQR {lqr.rms_tracking_cm:.2f} cm"
            )
            assert ocs.rms_cmd_rate < lqr.rms_cmd_rate
            assert lqr.rms_tracking_cm < ocs.rms_tracking_cm


# ---------------------------------------------------------------------------
# 9. drag-model training


def test_acceptance_9_drag_training(trained_drag):
    with criterion(9, "hybrid beats linear; exact Jacobian; seed-deterministic"):
        assert trained_drag.hybrid_val_mse < trained_drag.linear_val_mse
        print(
            f"  validation MSE: hybrid {trained_drag.hybrid_val_mse:.5f} < "
            f"linear {trained_drag.linear_val_mse:.5f}"
        )
        model = trained_drag.model
        rng = np.random.default_rng(17)
        worst = 0.0
        for _ in range(25):
            q = rng.standard_normal(4)
            q /= np.linalg.norm(q)
            eta = rng.uniform(0, 1, 4)
            v = rng.uniform(-10, 10, 3)
            w = rng.uniform(-5, 5, 3)
            H = jacobian_wrt_wind(model, q, eta)
            eps = 1e-6
            Hfd = np.column_stack(
                [(predict(model, q, eta, v, w + eps * e) - predict(model, q, eta, v, w - eps * e))
                 / (2 * eps) for e in np.eye(3)]
            )
            denom = max(1.0, np.abs(H).max())
            worst = max(worst, np.abs(H - Hfd).max() / denom)
        assert worst < 1e-4
        # determinism under an identical seed/config on a reduced run
        truth = GroundTruthAero(linear_coeffs=[0.3, 0.3, 0.5],
                                quadratic_coeffs=[0.02, 0.02, 0.03],
                                attitude_gain=0.15, rpm_gain=0.1)
        ds = generate_synthetic_flights(truth, noise_std=0.02, seed=4)
        cfg = TrainConfig(epochs=60, seed=8)
        t1 = train(ds, cfg)
        t2 = train(ds, cfg)
        assert np.array_equal(t1.model.net.params_flat(), t2.model.net.params_flat())
        print(f"  Jacobian FD relative error {worst:.2e}; retrain bit-identical")


# ---------------------------------------------------------------------------
# 10. nonlinear closed loop containment


def test_acceptance_10_nonlinear_containment(figure8_cfg, figure8_result, trained_drag):
    with criterion(10, "figure-8 OCS+EKF, M=100: 99% of samples inside inflated ellipses"):
        assert np.allclose(figure8_cfg.raw["wind"]["turbulence_std_mps"], 1.0)
        inputs = _inputs(figure8_cfg, figure8_result, trained_drag.model)
        plan = ExperimentPlan(
            scenario="figure8", controller="ocs", estimator="ekf",
            n_rollouts=100, seed_base=0, containment_inflation=1.2,
        )
        rep = run_experiment(plan, inputs)
        print(
            f"  containment {rep.containment_3sigma:.4f} (inflation 1.2), "
            f"RMS tracking {rep.rms_tracking_cm:.2f} cm, failures {rep.failed_rollouts}"
        )
        assert rep.failed_rollouts == 0
        assert rep.containment_3sigma >= 0.99

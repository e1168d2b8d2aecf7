"""Batch rollout statistics: empirical moments, constraint violation rates,
tracking and smoothness metrics, and comparison tables across
controller/estimator combinations.

Smoothness metric: angular acceleration of a point-mass model is not
defined, so reports carry the RMS geodesic rate of the commanded attitude
(rad/s) instead; it grows monotonically with corrective aggressiveness and
is computed from the flatness-map commands.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .chance import LinearizedSurrogate
from .covsteer import CovSteerSolution
from .linsys import LinearGaussianSystem, lqr_gain, rollout_policy
from .quadsim import SimParams, SimTrace, WindField, run_closed_loop

__all__ = [
    "ExperimentPlan",
    "ExperimentInputs",
    "MetricsReport",
    "StaticPolicy",
    "run_experiment",
    "empirical_moments",
    "emit_report",
    "linear_rollout_statistics",
    "build_lqr_policy",
]


@dataclass(frozen=True)
class ExperimentPlan:
    """One cell of the controller x estimator comparison grid."""

    scenario: str
    controller: str = "ocs"  # 'ocs' | 'lqr'
    estimator: str = "ekf"  # 'ekf' | 'lp' | 'none'
    n_rollouts: int = 10
    seed_base: int = 0
    containment_inflation: float = 1.0  # scales the 3-sigma ellipse radius

    def __post_init__(self):
        if self.controller not in ("ocs", "lqr"):
            raise ValueError("controller must be 'ocs' or 'lqr'")
        if self.estimator not in ("ekf", "lp", "none"):
            raise ValueError("estimator must be 'ekf', 'lp' or 'none'")
        if self.n_rollouts < 1:
            raise ValueError("n_rollouts must be at least 1")


@dataclass
class StaticPolicy:
    """Time-invariant gain around a planned mean (the LQR baseline)."""

    mu_seq: np.ndarray
    K_seq: np.ndarray
    v_seq: np.ndarray


def build_lqr_policy(
    sys: LinearGaussianSystem, solution: CovSteerSolution, q_diag, r_diag
) -> StaticPolicy:
    """Infinite-horizon LQR gains tracking the same planned mean trajectory
    (identical feedforward, so comparisons isolate the feedback policy)."""
    K = lqr_gain(
        sys.A_seq[0], sys.B_seq[0], np.diag(np.asarray(q_diag, float)),
        np.diag(np.asarray(r_diag, float)),
    )
    return StaticPolicy(
        mu_seq=solution.mu_seq,
        K_seq=np.broadcast_to(K, (sys.N,) + K.shape).copy(),
        v_seq=solution.v_seq,
    )


@dataclass
class ExperimentInputs:
    """Everything a plan needs to execute (scenario materials resolved by
    the caller, typically from a scenario config)."""

    sys: LinearGaussianSystem
    solution: CovSteerSolution
    truth: object
    drag_model: object
    wind: WindField
    mu_i: np.ndarray
    Sigma_i: np.ndarray
    sim_params: SimParams = field(default_factory=SimParams)
    lqr_q_diag: tuple = (6400.0,) * 3 + (640.0,) * 3
    lqr_r_diag: tuple = (1.0, 1.0, 1.0)
    surrogates: tuple = ()  # LinearizedSurrogate entries for violation rates


@dataclass
class MetricsReport:
    """Aggregated metrics of one experiment; reproducible per seed."""

    scenario: str
    controller: str
    estimator: str
    n_rollouts: int
    seed_base: int
    rms_tracking_cm: float
    rms_cmd_rate: float
    containment_3sigma: float
    containment_inflation: float
    empirical_Sigma_N: np.ndarray | None
    violation_rates: dict[str, float]
    failed_rollouts: int = 0
    extras: dict = field(default_factory=dict)

    CSV_COLUMNS = (
        "scenario", "controller", "estimator", "n_rollouts", "seed_base",
        "rms_tracking_cm", "rms_cmd_rate_rad_s", "containment_3sigma",
        "containment_inflation", "max_violation_rate", "failed_rollouts",
    )

    def csv_row(self) -> list:
        return [
            self.scenario, self.controller, self.estimator, self.n_rollouts,
            self.seed_base,
            f"{self.rms_tracking_cm:.4f}", f"{self.rms_cmd_rate:.6f}",
            f"{self.containment_3sigma:.6f}", f"{self.containment_inflation:.3f}",
            f"{max(self.violation_rates.values(), default=0.0):.6f}",
            self.failed_rollouts,
        ]

    REPORT_FORMAT_VERSION = 1

    def to_json_dict(self) -> dict:
        return {
            "report_format_version": self.REPORT_FORMAT_VERSION,
            "scenario": self.scenario,
            "controller": self.controller,
            "estimator": self.estimator,
            "n_rollouts": self.n_rollouts,
            "seed_base": self.seed_base,
            "rms_tracking_cm": self.rms_tracking_cm,
            "rms_cmd_rate_rad_s": self.rms_cmd_rate,
            "containment_3sigma": self.containment_3sigma,
            "containment_inflation": self.containment_inflation,
            "empirical_Sigma_N": None
            if self.empirical_Sigma_N is None
            else self.empirical_Sigma_N.tolist(),
            "violation_rates": self.violation_rates,
            "failed_rollouts": self.failed_rollouts,
        }


def _policy_for(plan: ExperimentPlan, inputs: ExperimentInputs):
    if plan.controller == "ocs":
        return inputs.solution
    return build_lqr_policy(inputs.sys, inputs.solution, inputs.lqr_q_diag, inputs.lqr_r_diag)


def _one_rollout(args):
    plan, inputs, policy, seed = args
    rng = np.random.default_rng(seed)
    L = np.linalg.cholesky(inputs.Sigma_i)
    x0 = inputs.mu_i + L @ rng.standard_normal(inputs.mu_i.size)
    return run_closed_loop(
        policy,
        truth=inputs.truth,
        drag_model=inputs.drag_model,
        wind=inputs.wind,
        dt=inputs.sys.dt,
        N=inputs.sys.N,
        x0=x0,
        estimator=plan.estimator,
        seed=seed + 1,  # rollout noise stream distinct from the x0 draw
        params=inputs.sim_params,
    )


def run_experiment(
    plan: ExperimentPlan,
    inputs: ExperimentInputs,
    n_jobs: int = 1,
    keep_traces: int = 0,
) -> MetricsReport:
    """Execute M seeded rollouts and aggregate metrics.

    Seeds are seed_base + i, so serial and parallel execution produce
    identical reports. Rollouts that fail numerically are excluded and
    counted; more than 0.1% failures aborts the experiment.
    """
    from .quadsim import IntegrationFailureError

    policy = _policy_for(plan, inputs)
    jobs = [
        (plan, inputs, policy, plan.seed_base + i) for i in range(plan.n_rollouts)
    ]
    traces: list[SimTrace] = []
    failed = 0
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            for result in pool.map(_one_rollout_safe, jobs):
                if result is None:
                    failed += 1
                else:
                    traces.append(result)
    else:
        for job in jobs:
            try:
                traces.append(_one_rollout(job))
            except IntegrationFailureError:
                failed += 1
    if failed > max(1e-3 * plan.n_rollouts, 0):
        raise RuntimeError(
            f"{failed}/{plan.n_rollouts} rollouts failed numerically"
        )
    return _aggregate(plan, inputs, traces, failed, keep_traces)


def _one_rollout_safe(args):
    from .quadsim import IntegrationFailureError

    try:
        return _one_rollout(args)
    except IntegrationFailureError:
        return None


def _aggregate(
    plan: ExperimentPlan,
    inputs: ExperimentInputs,
    traces: list[SimTrace],
    failed: int,
    keep_traces: int,
) -> MetricsReport:
    sol = inputs.solution
    N = inputs.sys.N
    pos_err_sq = []
    rate_sq = []
    inside_per_step = np.zeros(N)
    inflate_sq = (3.0 * plan.containment_inflation) ** 2
    Sigma_pos_inv = np.empty((N, 3, 3))
    for k in range(N):
        Sigma_pos_inv[k] = np.linalg.inv(sol.Sigma_seq[k + 1][:3, :3])
    for tr in traces:
        err = tr.r - tr.mu_ref[:, :3]
        pos_err_sq.append(np.sum(err**2, axis=1))
        rate_sq.append(tr.attitude_cmd_rate() ** 2)
        d = np.einsum("ki,kij,kj->k", err, Sigma_pos_inv, err)
        inside_per_step += d <= inflate_sq
    inside = float(inside_per_step.sum())
    total = N * len(traces)
    rms_tracking_cm = float(np.sqrt(np.mean(np.concatenate(pos_err_sq)))) * 100.0
    rms_cmd_rate = float(np.sqrt(np.mean(np.concatenate(rate_sq))))

    Sigma_N_emp = None
    if len(traces) >= 2:
        X_N = np.array([np.concatenate([tr.r[-1], tr.v[-1]]) for tr in traces])
        Sigma_N_emp = np.cov(X_N.T, bias=False)

    violations: dict[str, float] = {}
    for i, s in enumerate(inputs.surrogates):
        if s.target != "state" or s.bound is None:
            continue
        alpha_pos = s.alpha
        count = 0
        n_samples = 0
        for tr in traces:
            X = np.hstack([tr.r, tr.v])
            ks = [k - 1 for k in s.steps(N) if 1 <= k <= N]
            vals = X[ks] @ alpha_pos
            count += int(np.sum(vals > s.bound))
            n_samples += len(ks)
        violations[s.label or f"constraint_{i}"] = count / max(n_samples, 1)

    extras: dict = {"containment_per_step": inside_per_step / max(len(traces), 1)}
    if keep_traces:
        for i, tr in enumerate(traces[:keep_traces]):
            extras[f"trace_{i}_position"] = tr.r.copy()
        extras["mean_position"] = sol.mu_seq[:, :3].copy()
        extras["ellipses_xy"] = ellipse_series(sol, start=0, stop=N, step=max(N // 25, 1))
    return MetricsReport(
        scenario=plan.scenario,
        controller=plan.controller,
        estimator=plan.estimator,
        n_rollouts=plan.n_rollouts,
        seed_base=plan.seed_base,
        rms_tracking_cm=rms_tracking_cm,
        rms_cmd_rate=rms_cmd_rate,
        containment_3sigma=inside / max(total, 1),
        containment_inflation=plan.containment_inflation,
        empirical_Sigma_N=Sigma_N_emp,
        violation_rates=violations,
        failed_rollouts=failed,
        extras=extras,
    )


def ellipse_series(sol: CovSteerSolution, start: int, stop: int, step: int,
                   n_sigma: float = 3.0, n_points: int = 32) -> np.ndarray:
    """Plot-ready samples of the n-sigma level sets of the planned position
    covariance in the xy plane: rows of (k, x, y)."""
    from .plots import ellipse_points

    rows = []
    for k in range(start, stop + 1, step):
        pts = ellipse_points(sol.mu_seq[k, :2], sol.Sigma_seq[k][:2, :2],
                             n_sigma=n_sigma, n=n_points)
        rows.append(np.column_stack([np.full(len(pts), k), pts]))
    return np.vstack(rows)


# ---------------------------------------------------------------------------
# Moment estimation and linear-plant statistics


def empirical_moments(samples, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Unbiased sample mean and covariance of the state at step k.

    ``samples`` is either an (M, N+1, n) state array (as produced by
    :func:`quadsteer.linsys.rollout_policy`) or a list of SimTrace objects.
    """
    if isinstance(samples, np.ndarray):
        X = samples[:, k, :]
    else:
        X = np.array([np.concatenate([tr.r[k], tr.v[k]]) for tr in samples])
    if X.shape[0] < 2:
        raise ValueError("need at least two samples for a covariance estimate")
    mean = X.mean(axis=0)
    cov = np.cov(X.T, bias=False)
    return mean, np.atleast_2d(cov)


def linear_rollout_statistics(
    sys: LinearGaussianSystem,
    policy,
    mu_i,
    Sigma_i,
    n_rollouts: int,
    seed: int,
    surrogates: tuple = (),
) -> dict:
    """Vectorized linear-plant Monte Carlo: moment agreement with the exact
    recursion and empirical chance-constraint violation rates."""
    rng = np.random.default_rng(seed)
    X, U = rollout_policy(sys, policy, mu_i, Sigma_i, n_rollouts, rng)
    out: dict = {"states": X, "inputs": U}
    violations = {}
    for i, s in enumerate(surrogates):
        if s.bound is None:
            continue
        if s.target == "state":
            ks = list(s.steps(sys.N))
            vals = X[:, ks, :] @ s.alpha
        else:
            ks = [k for k in s.steps(sys.N) if k < sys.N]
            vals = U[:, ks, :] @ s.alpha
        violations[s.label or f"constraint_{i}"] = float(np.mean(vals > s.bound))
    out["violation_rates"] = violations
    return out


# ---------------------------------------------------------------------------
# Report emission


def emit_report(reports, outdir, basename: str = "report") -> list[Path]:
    """Write the comparison table (CSV + JSON) and any plot-ready series.

    ``reports`` may be one MetricsReport or a list (e.g. the 2x2
    controller x estimator grid); an empty list yields a headers-only CSV.
    """
    if isinstance(reports, MetricsReport):
        reports = [reports]
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    csv_path = outdir / f"{basename}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MetricsReport.CSV_COLUMNS)
        for rep in reports:
            writer.writerow(rep.csv_row())
    written.append(csv_path)

    json_path = outdir / f"{basename}.json"
    with open(json_path, "w") as fh:
        json.dump([rep.to_json_dict() for rep in reports], fh, indent=2)
    written.append(json_path)

    for rep in reports:
        tag = f"{rep.scenario}_{rep.controller}_{rep.estimator}"
        for key, arr in rep.extras.items():
            path = outdir / f"{basename}_{tag}_{key}.csv"
            np.savetxt(path, np.atleast_2d(arr), delimiter=",")
            written.append(path)
    return written

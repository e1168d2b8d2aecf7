"""Command-line entry point.

Subcommands: ``solve`` (plan a scenario and validate the solution),
``train`` (fit the drag model on recorded or synthetic data), ``run``
(Monte Carlo experiments with report tables and figures), and
``scenarios`` (list shipped scenario files).

Exit codes are a stable contract: 0 success, 2 configuration error,
3 infeasible problem, 4 numerical failure.
"""

from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .aero import (
    FlightDataset,
    GroundTruthAero,
    ProtocolViolationError,
    TrainConfig,
    generate_synthetic_flights,
    load_model,
    save_model,
    train as train_drag_model,
)
from .covsteer import load_solution, save_solution, solve_problem
from .montecarlo import ExperimentInputs, ExperimentPlan, emit_report, run_experiment
from .scenarios import ConfigError, ScenarioConfig, available_scenarios

EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERICAL = 4


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _finite(x: float):
    """JSON-safe float (non-finite values become strings)."""
    x = float(x)
    return x if np.isfinite(x) else repr(x)


def _load_config(config: str) -> ScenarioConfig:
    try:
        return ScenarioConfig.load(config)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))


def _aero_digest(cfg: ScenarioConfig) -> str:
    return hashlib.sha256(
        json.dumps(cfg.raw["aero"], sort_keys=True).encode()
    ).hexdigest()[:16]


def _solve_scenario(cfg: ScenarioConfig, backend, outdir: Path, reuse: bool = True):
    """Solve (or load a cached solution for) a scenario; exits on failure."""
    sol_path = outdir / "solution.npz"
    meta_path = outdir / "solution_meta.json"
    digest = hashlib.sha256(
        json.dumps(cfg.raw, sort_keys=True).encode()
    ).hexdigest()[:16]
    if reuse and sol_path.exists() and meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if meta.get("config_digest") == digest:
            click.echo(f"reusing cached solution {sol_path}")
            return load_solution(sol_path), None
    problem = cfg.build_problem()
    opts = cfg.solver_options
    result = solve_problem(
        problem,
        backend,
        feas_tol=opts["feas_tol"],
        lmi_margin=opts["lmi_margin"],
        relinearize_rounds=opts["relinearize_rounds"],
    )
    if result.status == "infeasible":
        _fail(EXIT_INFEASIBLE, f"scenario {cfg.name!r} is infeasible")
    if result.status in ("failed", "inaccurate"):
        _fail(EXIT_NUMERICAL, f"solver did not reach optimality (status {result.status})")
    outdir.mkdir(parents=True, exist_ok=True)
    save_solution(result.solution, sol_path)
    meta_path.write_text(json.dumps({"config_digest": digest, "version": __version__}))
    return result.solution, result


def _train_model_for(cfg: ScenarioConfig, outdir: Path):
    """Train (or load a cached) drag model for a scenario's ground truth."""
    model_path = outdir / "drag_model.npz"
    meta_path = outdir / "drag_model_meta.json"
    digest = _aero_digest(cfg)
    if model_path.exists() and meta_path.exists():
        if json.loads(meta_path.read_text()).get("aero_digest") == digest:
            click.echo(f"reusing cached drag model {model_path}")
            return load_model(model_path)
    truth = cfg.truth_aero()
    dataset = generate_synthetic_flights(
        truth, noise_std=cfg.train_noise_std, seed=cfg.train_config().seed,
        mass=cfg.sim_params().mass, max_thrust=cfg.sim_params().max_thrust,
    )
    result = train_drag_model(dataset, cfg.train_config())
    click.echo(
        f"trained drag model: linear val MSE {result.linear_val_mse:.5f}, "
        f"hybrid val MSE {result.hybrid_val_mse:.5f}"
    )
    outdir.mkdir(parents=True, exist_ok=True)
    save_model(result.model, model_path)
    meta_path.write_text(json.dumps({"aero_digest": digest}))
    return result.model


def _write_manifest(outdir: Path, cfg: ScenarioConfig, files: list, extra: dict | None = None):
    manifest = {
        "package_version": __version__,
        "scenario": cfg.name,
        "config": cfg.raw,
        "outputs": sorted(str(Path(f).name) for f in files),
    }
    if extra:
        manifest.update(extra)
    path = outdir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


@click.group()
@click.version_option(__version__)
def main():
    """Covariance-steering planner and stochastic quadrotor harness."""


@main.command()
def scenarios():
    """List scenario files shipped with the package."""
    for name in available_scenarios():
        cfg = ScenarioConfig.load(name)
        desc = cfg.raw.get("description", "").strip().replace("\n", " ")
        click.echo(f"{name:10s} {desc[:100]}")


@main.command()
@click.argument("config")
@click.option("-o", "--outdir", default="runs/solve", show_default=True,
              help="Output directory for the solution and report files.")
@click.option("--backend", default=None, help="Solver backend (clarabel, cvxpy, cvxpy:SCS).")
@click.option("--dump-program", type=click.Path(), default=None,
              help="Also export the assembled conic program (text interchange format).")
def solve(config, outdir, backend, dump_program):
    """Solve the covariance steering problem of CONFIG and validate it."""
    cfg = _load_config(config)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    if dump_program:
        from .covsteer import assemble
        problem = cfg.build_problem()
        pre = [c for c in problem.chance if hasattr(c, "ell")]
        raw_cc = [c for c in problem.chance if not hasattr(c, "ell")]
        if raw_cc:
            click.echo("note: exported program omits not-yet-linearized chance constraints")
        from dataclasses import replace
        prog = assemble(replace(problem, chance=tuple(pre)), surrogates=pre)
        with open(dump_program, "w") as fh:
            prog.export_text(fh)
        click.echo(f"wrote conic program to {dump_program}")

    solution, result = _solve_scenario(cfg, backend, outdir, reuse=False)
    report = result.validation
    for line in report.summary_lines():
        click.echo(line)
    click.echo(f"objective: {solution.objective:.6f}")
    click.echo(f"max relaxation gap: {solution.max_relax_gap:.3e}")

    files = [outdir / "solution.npz"]
    validation_path = outdir / "validation.json"
    validation_path.write_text(json.dumps({
        "status": result.status,
        "objective": _finite(solution.objective),
        "passed": report.passed,
        "checks": report.checks,
        "cov_dyn_residual_max": _finite(report.cov_dyn_residual_max),
        "terminal_gap": _finite(report.terminal_gap),
        "chance_slack_min": _finite(report.chance_slack_min),
        "cov_bound_violation_max": _finite(report.cov_bound_violation_max),
        "waypoint_error_max": _finite(report.waypoint_error_max),
        "relax_gap_max": _finite(report.relax_gap_max),
    }, indent=2))
    files.append(validation_path)

    moments_path = outdir / "moments.csv"
    n = solution.mu_seq.shape[1]
    header = ["step"] + [f"mu_{i}" for i in range(n)] + [f"sigma_{i}{i}" for i in range(n)]
    table = np.column_stack(
        [np.arange(solution.mu_seq.shape[0]), solution.mu_seq,
         np.stack([np.diag(S) for S in solution.Sigma_seq])]
    )
    np.savetxt(moments_path, table, delimiter=",", header=",".join(header), comments="")
    files.append(moments_path)

    from . import plots
    files.append(plots.plot_trajectory_xy(solution, outdir / "trajectory_xy.png"))
    files.append(plots.plot_inputs(solution, outdir / "inputs.png", dt=cfg.dt))
    state_faces = [s for s in result.surrogates if s.target == "state"]
    if state_faces:
        files.append(plots.plot_landing_profile(solution, state_faces,
                                                outdir / "landing_profile.png"))
    files.append(_write_manifest(outdir, cfg, files, {"status": result.status}))
    click.echo(f"wrote {len(files)} files to {outdir}")


@main.command()
@click.option("--dataset", type=click.Path(exists=True), default=None,
              help="Recorded flight dataset (.npz) to train on.")
@click.option("--synthetic", type=click.Choice(["linear", "quadratic"]), default=None,
              help="Generate synthetic training data from a ground-truth model.")
@click.option("-o", "--output", default="drag_model.npz", show_default=True)
@click.option("--epochs", default=2000, show_default=True)
@click.option("--lr", default=1e-3, show_default=True)
@click.option("--tikhonov", "lam", default=1e-4, show_default=True,
              help="Weight-squared regularization strength.")
@click.option("--seed", default=0, show_default=True)
@click.option("--noise-std", default=0.02, show_default=True,
              help="Measurement noise for synthetic data (N).")
def train(dataset, synthetic, output, epochs, lr, lam, seed, noise_std):
    """Fit the hybrid drag model; prints linear-only vs hybrid losses."""
    if (dataset is None) == (synthetic is None):
        _fail(EXIT_CONFIG, "choose exactly one of --dataset or --synthetic")
    if dataset is not None:
        try:
            ds = FlightDataset.load(dataset)
        except (ValueError, KeyError) as exc:
            _fail(EXIT_CONFIG, f"bad dataset file: {exc}")
    else:
        if synthetic == "linear":
            truth = GroundTruthAero(linear_coeffs=[0.30, 0.30, 0.50],
                                    quadratic_coeffs=np.zeros(3))
        else:
            truth = GroundTruthAero(linear_coeffs=[0.30, 0.30, 0.50],
                                    quadratic_coeffs=[0.020, 0.020, 0.030],
                                    attitude_gain=0.15, rpm_gain=0.10)
        ds = generate_synthetic_flights(truth, noise_std=noise_std, seed=seed)
        click.echo(f"generated {len(ds)} synthetic samples")
    config = TrainConfig(epochs=epochs, lr=lr, tikhonov_lambda=lam, seed=seed)
    try:
        result = train_drag_model(ds, config)
    except ProtocolViolationError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except ValueError as exc:
        _fail(EXIT_CONFIG, str(exc))
    click.echo(f"C_d diagonal: {np.diag(result.model.C_d).round(5).tolist()}")
    click.echo(f"linear-only validation MSE: {result.linear_val_mse:.6f}")
    click.echo(f"hybrid validation MSE:      {result.hybrid_val_mse:.6f}")
    save_model(result.model, output)
    click.echo(f"wrote model to {output}")


@main.command()
@click.argument("config")
@click.option("--controller", type=click.Choice(["ocs", "lqr"]), default="ocs", show_default=True)
@click.option("--estimator", type=click.Choice(["ekf", "lp", "none"]), default="ekf", show_default=True)
@click.option("-M", "--rollouts", default=10, show_default=True, help="Monte Carlo rollout count.")
@click.option("--seed", default=None, type=int, help="Seed base (default: scenario's).")
@click.option("--inflation", default=1.0, show_default=True,
              help="Scale factor on the 3-sigma containment ellipses.")
@click.option("--compare", is_flag=True,
              help="Run the full {ocs,lqr} x {ekf,lp} comparison grid.")
@click.option("--jobs", default=1, show_default=True, help="Parallel rollout workers.")
@click.option("-o", "--outdir", default="runs/run", show_default=True)
@click.option("--backend", default=None)
def run(config, controller, estimator, rollouts, seed, inflation, compare, jobs, outdir, backend):
    """Run seeded Monte Carlo rollouts of CONFIG and emit report files."""
    if rollouts < 1:
        _fail(EXIT_CONFIG, "-M must be at least 1")
    cfg = _load_config(config)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    seed = cfg.experiment_seed if seed is None else seed

    solution, result = _solve_scenario(cfg, backend, outdir)
    model = _train_model_for(cfg, outdir)
    lqr_q, lqr_r = cfg.lqr_weights
    surrogates = ()
    if result is not None:
        surrogates = result.surrogates
    inputs = ExperimentInputs(
        sys=cfg.build_system(),
        solution=solution,
        truth=cfg.truth_aero(),
        drag_model=model,
        wind=cfg.build_wind(),
        mu_i=cfg.build_boundary().mu_i,
        Sigma_i=cfg.build_boundary().Sigma_i,
        sim_params=cfg.sim_params(),
        lqr_q_diag=lqr_q,
        lqr_r_diag=lqr_r,
        surrogates=surrogates,
    )
    grid = (
        [(c, e) for c in ("ocs", "lqr") for e in ("ekf", "lp")]
        if compare
        else [(controller, estimator)]
    )
    reports = []
    for ctrl, est in grid:
        plan = ExperimentPlan(
            scenario=cfg.name, controller=ctrl, estimator=est,
            n_rollouts=rollouts, seed_base=seed, containment_inflation=inflation,
        )
        click.echo(f"running {ctrl}+{est} with M={rollouts} ...")
        rep = run_experiment(plan, inputs, n_jobs=jobs, keep_traces=min(rollouts, 10))
        click.echo(
            f"  RMS tracking {rep.rms_tracking_cm:.2f} cm, "
            f"RMS cmd rate {rep.rms_cmd_rate:.3f} rad/s, "
            f"3-sigma containment {rep.containment_3sigma:.4f}"
        )
        reports.append(rep)
    files = emit_report(reports, outdir)

    # figures from a small replay of the first plan
    from .quadsim import run_closed_loop
    from . import plots
    first = reports[0]
    demo_traces = []
    rng = np.random.default_rng(seed)
    policy = solution if first.controller == "ocs" else None
    if policy is None:
        from .montecarlo import build_lqr_policy
        policy = build_lqr_policy(inputs.sys, solution, lqr_q, lqr_r)
    for i in range(min(rollouts, 10)):
        L = np.linalg.cholesky(inputs.Sigma_i)
        x0 = inputs.mu_i + L @ rng.standard_normal(6)
        demo_traces.append(run_closed_loop(
            policy, truth=inputs.truth, drag_model=model, wind=inputs.wind,
            dt=cfg.dt, N=cfg.N, x0=x0, estimator=first.estimator,
            seed=seed + 1000 + i, params=inputs.sim_params,
        ))
    files.append(plots.plot_trajectory_xy(solution, outdir / "trajectory_xy.png",
                                          traces=demo_traces))
    files.append(plots.plot_inputs(solution, outdir / "inputs.png", dt=cfg.dt,
                                   traces=demo_traces))
    state_faces = [s for s in surrogates if s.target == "state"]
    if state_faces:
        files.append(plots.plot_landing_profile(solution, state_faces,
                                                outdir / "landing_profile.png"))
    for i, tr in enumerate(demo_traces[:3]):
        p = outdir / f"trace_{i}.csv"
        tr.to_csv(p)
        files.append(p)
    files.append(_write_manifest(outdir, cfg, files, {"seed_base": seed}))
    click.echo(f"wrote {len(files)} files to {outdir}")


if __name__ == "__main__":
    main()

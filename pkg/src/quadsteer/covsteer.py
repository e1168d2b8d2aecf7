"""Covariance steering: conic assembly, solving, policy extraction, validation.

The planning problem drives a linear-Gaussian plant from an initial Gaussian
to a terminal covariance cap while minimizing

    sum_k  tr(Q_k Sigma_k) + tr(R_k Y_k) + mu_k' Qbar mu_k + v_k' Rbar v_k

over the affine policy ``u_k = K_k (x_k - mu_k) + v_k``. With the
substitution U_k = K_k Sigma_k the covariance dynamics become linear,

    Sigma_{k+1} = A Sigma_k A' + B U_k A' + A U_k' B' + B Y_k B' + D D',

and the input-covariance epigraph ``Y_k >= U_k Sigma_k^{-1} U_k'`` is imposed
as the Schur-complement LMI [[Y_k, U_k], [U_k', Sigma_k]] >= 0, which is
lossless at optimality for positive definite R_k. The feedback gain is
recovered as K_k = U_k Sigma_k^{-1}.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .chance import (
    AffineChanceConstraint,
    LinearizedSurrogate,
    PartialCovarianceBound,
    linearize,
)
from .conic import (
    ConicProgram,
    RawSolution,
    SolverBackend,
    congruence_operator,
    cross_term_operator,
    get_backend,
    svec,
    svec_dim,
)
from .linsys import CostWeights, GaussianBoundary, LinearGaussianSystem

__all__ = [
    "Waypoint",
    "CovSteerProblem",
    "CovSteerSolution",
    "ValidationReport",
    "CovSteerResult",
    "ConditioningError",
    "assemble",
    "solve_problem",
    "extract_policy",
    "validate",
    "save_solution",
    "load_solution",
]


class ConditioningError(RuntimeError):
    """A solved covariance block is numerically singular."""


@dataclass(frozen=True)
class Waypoint:
    """Equality constraint ``selector @ mu_step = target`` on the mean."""

    step: int
    selector: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        S = np.array(self.selector, dtype=float)
        t = np.array(self.target, dtype=float).ravel()
        if S.ndim != 2 or S.shape[0] != t.size:
            raise ValueError("selector rows must match target length")
        if np.linalg.matrix_rank(S) < S.shape[0]:
            raise ValueError("waypoint selector must have full row rank")
        S.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "selector", S)
        object.__setattr__(self, "target", t)


@dataclass(frozen=True)
class CovSteerProblem:
    """Full problem statement consumed by :func:`assemble`.

    ``chance`` may mix raw probabilistic constraints (linearized against a
    pilot solve inside :func:`solve_problem`) and pre-linearized surrogates
    (used verbatim, e.g. cone-face tables shipped as configuration data).
    """

    sys: LinearGaussianSystem
    boundary: GaussianBoundary
    weights: CostWeights
    chance: tuple = ()
    cov_bounds: tuple = ()
    waypoints: tuple = ()
    terminal_mean_mode: str = "free"

    def __post_init__(self):
        if self.terminal_mean_mode not in ("free", "equality"):
            raise ValueError("terminal_mean_mode must be 'free' or 'equality'")
        if self.terminal_mean_mode == "equality" and self.boundary.mu_f is None:
            raise ValueError("terminal mean equality requires boundary.mu_f")
        if self.boundary.n != self.sys.n:
            raise ValueError("boundary dimension does not match the system")
        if self.weights.Q_seq.shape[0] != self.sys.N:
            raise ValueError("weights horizon does not match the system")
        object.__setattr__(self, "chance", tuple(self.chance))
        object.__setattr__(self, "cov_bounds", tuple(self.cov_bounds))
        object.__setattr__(self, "waypoints", tuple(self.waypoints))
        N = self.sys.N
        for wp in self.waypoints:
            if not 0 <= wp.step <= N:
                raise ValueError(f"waypoint step {wp.step} outside horizon")
            if wp.selector.shape[1] != self.sys.n:
                raise ValueError("waypoint selector width must equal state dim")
        for c in self.chance:
            c.steps(N)  # validates the window
            dim = self.sys.n if c.target == "state" else self.sys.m
            if c.alpha.size != dim:
                raise ValueError(f"constraint normal has wrong dimension for {c.target}")
        for b in self.cov_bounds:
            b.steps(N)
            if b.target == "state" and b.selector(self.sys.n).shape[0] != self.sys.n:
                raise ValueError("state covariance bound selector must be (n, p)")
            if b.target == "input" and b.cap.shape[0] != self.sys.m:
                raise ValueError("input covariance cap must be m x m")


@dataclass
class CovSteerSolution:
    """Affine policy and its predicted uncertainty tube."""

    mu_seq: np.ndarray  # (N+1, n)
    Sigma_seq: np.ndarray  # (N+1, n, n)
    K_seq: np.ndarray  # (N, m, n)
    v_seq: np.ndarray  # (N, m)
    U_seq: np.ndarray  # (N, m, n)
    Y_seq: np.ndarray  # (N, m, m)
    objective: float
    solver_status: str
    relax_gaps: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def N(self) -> int:
        return self.K_seq.shape[0]

    @property
    def max_relax_gap(self) -> float:
        return float(self.relax_gaps.max()) if self.relax_gaps.size else np.nan


@dataclass
class ValidationReport:
    """Per-constraint residuals of a candidate solution; always returned,
    with boolean pass flags at the configured tolerances."""

    cov_dyn_residual_max: float
    mean_dyn_residual_max: float
    initial_mismatch: float
    terminal_gap: float
    chance_slack_min: float
    cov_bound_violation_max: float
    waypoint_error_max: float
    relax_gap_max: float
    checks: dict[str, bool]
    passed: bool

    def summary_lines(self) -> list[str]:
        flag = lambda ok: "PASS" if ok else "FAIL"
        c = self.checks
        return [
            f"[{flag(c['cov_dynamics'])}] covariance dynamics residual "
            f"{self.cov_dyn_residual_max:.3e}",
            f"[{flag(c['mean_dynamics'])}] mean dynamics residual "
            f"{self.mean_dyn_residual_max:.3e}",
            f"[{flag(c['initial'])}] initial boundary mismatch {self.initial_mismatch:.3e}",
            f"[{flag(c['terminal'])}] terminal covariance gap {self.terminal_gap:.3e}",
            f"[{flag(c['chance'])}] chance surrogate min slack {self.chance_slack_min:.3e}",
            f"[{flag(c['cov_bounds'])}] covariance bound violation "
            f"{self.cov_bound_violation_max:.3e}",
            f"[{flag(c['waypoints'])}] waypoint error {self.waypoint_error_max:.3e}",
            f"[{flag(c['relaxation'])}] relaxation gap {self.relax_gap_max:.3e}",
        ]


@dataclass
class CovSteerResult:
    """Outcome of :func:`solve_problem`."""

    status: str  # 'optimal' | 'inaccurate' | 'infeasible' | 'failed'
    solution: CovSteerSolution | None
    validation: ValidationReport | None
    raw: RawSolution
    surrogates: tuple = ()

    @property
    def ok(self) -> bool:
        return self.solution is not None


# ---------------------------------------------------------------------------
# Assembly


def _schur_embeddings(m: int, n: int):
    """svec maps of Y (m), U (m x n), Sigma (n) into the (m+n) Schur block."""
    D = m + n
    big = svec_dim(D)

    def bidx(i: int, j: int) -> int:  # i <= j, column-major upper triangle
        return j * (j + 1) // 2 + i

    EY = np.zeros((big, svec_dim(m)))
    for b in range(m):
        for a in range(b + 1):
            EY[bidx(a, b), b * (b + 1) // 2 + a] = 1.0
    EU = np.zeros((big, m * n))
    for j in range(n):
        for i in range(m):
            EU[bidx(i, m + j), j * m + i] = np.sqrt(2.0)
    ES = np.zeros((big, svec_dim(n)))
    for b in range(n):
        for a in range(b + 1):
            ES[bidx(m + a, m + b), b * (b + 1) // 2 + a] = 1.0
    return EY, EU, ES


class _OperatorCache:
    """Congruence/cross-term operators reused across identical step matrices."""

    def __init__(self):
        self._store: dict = {}

    def congruence(self, M: np.ndarray) -> np.ndarray:
        key = ("c", M.tobytes(), M.shape)
        if key not in self._store:
            self._store[key] = congruence_operator(M)
        return self._store[key]

    def cross(self, B: np.ndarray, A: np.ndarray) -> np.ndarray:
        key = ("x", B.tobytes(), B.shape, A.tobytes(), A.shape)
        if key not in self._store:
            self._store[key] = cross_term_operator(B, A)
        return self._store[key]


def _resolved_surrogates(p: CovSteerProblem) -> tuple[list[LinearizedSurrogate], list[AffineChanceConstraint]]:
    pre, raw = [], []
    for c in p.chance:
        if isinstance(c, LinearizedSurrogate):
            pre.append(c)
        elif isinstance(c, AffineChanceConstraint):
            raw.append(c)
        else:
            raise TypeError(f"unsupported chance entry {type(c).__name__}")
    return pre, raw


def assemble(
    p: CovSteerProblem, surrogates: list[LinearizedSurrogate] | None = None
) -> ConicProgram:
    """Build the conic program for a fully linearized problem.

    ``surrogates`` replaces the problem's chance list; it must contain only
    pre-linearized constraints. Raw chance constraints are linearized by
    :func:`solve_problem`, not here.
    """
    if surrogates is None:
        surrogates, raw = _resolved_surrogates(p)
        if raw:
            raise ValueError(
                "problem has raw chance constraints; linearize them first "
                "(solve_problem does this against a pilot solve)"
            )
    sys, bnd, w = p.sys, p.boundary, p.weights
    N, n, m = sys.N, sys.n, sys.m
    sv_n, sv_m = svec_dim(n), svec_dim(m)

    prog = ConicProgram()
    Sig = [prog.add_var(f"Sigma_{k}", "sym", n) for k in range(N + 1)]
    U = [prog.add_var(f"U_{k}", "mat", m, n) for k in range(N)]
    Y = [prog.add_var(f"Y_{k}", "sym", m) for k in range(N)]
    mu = [prog.add_var(f"mu_{k}", "vec", n) for k in range(N + 1)]
    v = [prog.add_var(f"v_{k}", "vec", m) for k in range(N)]

    ops = _OperatorCache()
    EY, EU, ES = _schur_embeddings(m, n)
    I_svn = np.eye(sv_n)
    I_svm = np.eye(sv_m)
    I_n = np.eye(n)

    # boundary
    prog.add_equality([(Sig[0], I_svn)], svec(bnd.Sigma_i), label="Sigma_0")
    prog.add_equality([(mu[0], I_n)], bnd.mu_i, label="mu_0")
    if p.terminal_mean_mode == "equality":
        prog.add_equality([(mu[N], I_n)], bnd.mu_f, label="mu_N")
    prog.add_psd([(Sig[N], -I_svn)], bnd.Sigma_f, label="terminal_cov")

    for k in range(N):
        A, B, D = sys.A_seq[k], sys.B_seq[k], sys.D_seq[k]
        MA = ops.congruence(A)
        MB = ops.congruence(B)
        MX = ops.cross(B, A)
        # covariance dynamics: A S A' + B U A' + A U' B' + B Y B' + DD' = S+
        prog.add_equality(
            [(Sig[k], MA), (U[k], MX), (Y[k], MB), (Sig[k + 1], -I_svn)],
            -svec(D @ D.T),
            label=f"cov_dyn_{k}",
        )
        prog.add_equality(
            [(mu[k + 1], I_n), (mu[k], -A), (v[k], -B)],
            np.zeros(n),
            label=f"mean_dyn_{k}",
        )
        prog.add_psd(
            [(Y[k], EY), (U[k], EU), (Sig[k], ES)],
            np.zeros((m + n, m + n)),
            label=f"schur_{k}",
        )
        # objective: tr(Q S) + tr(R Y)
        prog.add_linear_cost(Sig[k], svec(0.5 * (w.Q_seq[k] + w.Q_seq[k].T)))
        prog.add_linear_cost(Y[k], svec(0.5 * (w.R_seq[k] + w.R_seq[k].T)))

    if np.abs(w.Qbar).max() > 0:
        for k in range(N):
            prog.add_quadratic_cost(mu[k], w.Qbar, label=f"mean_cost_{k}")
    if np.abs(w.Rbar).max() > 0:
        for k in range(N):
            prog.add_quadratic_cost(v[k], w.Rbar, label=f"ff_cost_{k}")

    for i, bound in enumerate(p.cov_bounds):
        if bound.target == "state":
            L = bound.selector(n)
            ML = ops.congruence(L.T)
            for k in bound.steps(N):
                prog.add_psd([(Sig[k], -ML)], bound.cap, label=f"cov_bound_{i}_{k}")
        else:
            for k in bound.steps(N):
                if k >= N:
                    continue  # Y defined for k < N
                prog.add_psd([(Y[k], -I_svm)], bound.cap, label=f"input_bound_{i}_{k}")

    for i, s in enumerate(surrogates):
        ll = svec(np.outer(s.ell, s.ell)).reshape(1, -1)
        arow = s.alpha.reshape(1, -1)
        if s.target == "state":
            for k in s.steps(N):
                prog.add_inequality(
                    [(Sig[k], ll), (mu[k], arow)], s.beta, label=f"chance_{i}_{k}"
                )
        else:
            for k in s.steps(N):
                if k >= N:
                    continue
                prog.add_inequality(
                    [(Y[k], ll), (v[k], arow)], s.beta, label=f"chance_u_{i}_{k}"
                )

    for i, wp in enumerate(p.waypoints):
        prog.add_equality([(mu[wp.step], wp.selector)], wp.target, label=f"waypoint_{i}")

    return prog


# ---------------------------------------------------------------------------
# Extraction and validation


def extract_policy(raw: RawSolution, p: CovSteerProblem) -> CovSteerSolution:
    """Recover the affine policy from raw SDP blocks.

    K_k = U_k Sigma_k^{-1} through an SPD solve (no explicit inverse);
    raises :class:`ConditioningError` naming the step when a covariance
    block is numerically singular (min eigenvalue below 1e-10).
    """
    if not raw.ok:
        raise ValueError(f"cannot extract a policy from status {raw.status!r}")
    sys = p.sys
    N, n, m = sys.N, sys.n, sys.m
    Sigma_seq = np.empty((N + 1, n, n))
    mu_seq = np.empty((N + 1, n))
    U_seq = np.empty((N, m, n))
    Y_seq = np.empty((N, m, m))
    v_seq = np.empty((N, m))
    K_seq = np.empty((N, m, n))
    gaps = np.empty(N)
    for k in range(N + 1):
        S = raw.blocks[f"Sigma_{k}"]
        Sigma_seq[k] = 0.5 * (S + S.T)
        mu_seq[k] = raw.blocks[f"mu_{k}"]
    for k in range(N):
        U_seq[k] = raw.blocks[f"U_{k}"]
        Yk = raw.blocks[f"Y_{k}"]
        Y_seq[k] = 0.5 * (Yk + Yk.T)
        v_seq[k] = raw.blocks[f"v_{k}"]
        S = Sigma_seq[k]
        min_eig = float(np.linalg.eigvalsh(S).min())
        if min_eig < 1e-10:
            raise ConditioningError(
                f"Sigma_{k} is numerically singular (min eigenvalue {min_eig:.3e})"
            )
        cho = scipy.linalg.cho_factor(S, lower=True)
        K_seq[k] = scipy.linalg.cho_solve(cho, U_seq[k].T).T
        gap = Y_seq[k] - K_seq[k] @ U_seq[k].T
        gaps[k] = np.linalg.norm(gap, "fro") / max(1.0, np.linalg.norm(Y_seq[k], "fro"))
    return CovSteerSolution(
        mu_seq=mu_seq,
        Sigma_seq=Sigma_seq,
        K_seq=K_seq,
        v_seq=v_seq,
        U_seq=U_seq,
        Y_seq=Y_seq,
        objective=raw.objective,
        solver_status=raw.status,
        relax_gaps=gaps,
    )


_DEFAULT_TOL = {
    "eq": 1e-6,  # dynamics/boundary residuals (relative to matrix scale)
    "terminal": 1e-8,
    "lmi": 1e-7,
    "chance": 1e-7,
    "waypoint": 1e-6,
    "relax_gap": 1e-4,
}


def validate(
    sol: CovSteerSolution,
    p: CovSteerProblem,
    surrogates: list[LinearizedSurrogate] | None = None,
    tolerances: dict | None = None,
) -> ValidationReport:
    """Residual report for a candidate solution (always returns)."""
    tol = dict(_DEFAULT_TOL)
    if tolerances:
        tol.update(tolerances)
    if surrogates is None:
        surrogates, raw_cc = _resolved_surrogates(p)
        if raw_cc:
            raise ValueError("validate needs the linearized surrogates actually solved")
    sys, bnd = p.sys, p.boundary
    N = sys.N

    cov_res = 0.0
    mean_res = 0.0
    for k in range(N):
        A, B, D = sys.A_seq[k], sys.B_seq[k], sys.D_seq[k]
        S, U, Y = sol.Sigma_seq[k], sol.U_seq[k], sol.Y_seq[k]
        res = (
            A @ S @ A.T
            + B @ U @ A.T
            + A @ U.T @ B.T
            + B @ Y @ B.T
            + D @ D.T
            - sol.Sigma_seq[k + 1]
        )
        scale = max(1.0, np.linalg.norm(sol.Sigma_seq[k + 1], "fro"))
        cov_res = max(cov_res, np.linalg.norm(res, "fro") / scale)
        mres = sol.mu_seq[k + 1] - A @ sol.mu_seq[k] - B @ sol.v_seq[k]
        mean_res = max(mean_res, float(np.abs(mres).max()))

    init_mis = max(
        float(np.abs(sol.Sigma_seq[0] - bnd.Sigma_i).max()),
        float(np.abs(sol.mu_seq[0] - bnd.mu_i).max()),
    )
    terminal_gap = float(np.linalg.eigvalsh(sol.Sigma_seq[N] - bnd.Sigma_f).max())

    chance_slack = np.inf
    for s in surrogates:
        for k in s.steps(N):
            if s.target == "state":
                val = s.evaluate(sol.mu_seq[k], sol.Sigma_seq[k])
            else:
                if k >= N:
                    continue
                val = s.evaluate(sol.v_seq[k], sol.Y_seq[k])
            chance_slack = min(chance_slack, -val)

    bound_viol = -np.inf
    for bound in p.cov_bounds:
        for k in bound.steps(N):
            if bound.target == "state":
                L = bound.selector(sys.n)
                gap = L.T @ sol.Sigma_seq[k] @ L - bound.cap
            else:
                if k >= N:
                    continue
                gap = sol.Y_seq[k] - bound.cap
            bound_viol = max(bound_viol, float(np.linalg.eigvalsh(gap).max()))
    if not p.cov_bounds:
        bound_viol = -np.inf

    wp_err = 0.0
    for wp in p.waypoints:
        err = wp.selector @ sol.mu_seq[wp.step] - wp.target
        wp_err = max(wp_err, float(np.abs(err).max()))
    if p.terminal_mean_mode == "equality":
        wp_err = max(wp_err, float(np.abs(sol.mu_seq[N] - bnd.mu_f).max()))

    checks = {
        "cov_dynamics": bool(cov_res < tol["eq"]),
        "mean_dynamics": bool(mean_res < tol["eq"]),
        "initial": bool(init_mis < tol["eq"]),
        "terminal": bool(terminal_gap <= tol["terminal"]),
        "chance": bool((not surrogates) or chance_slack > -tol["chance"]),
        "cov_bounds": bool((not p.cov_bounds) or bound_viol <= tol["lmi"]),
        "waypoints": bool(wp_err < tol["waypoint"]),
        "relaxation": bool(
            sol.relax_gaps.size == 0 or sol.max_relax_gap < tol["relax_gap"]
        ),
    }
    return ValidationReport(
        cov_dyn_residual_max=cov_res,
        mean_dyn_residual_max=mean_res,
        initial_mismatch=init_mis,
        terminal_gap=terminal_gap,
        chance_slack_min=chance_slack if surrogates else np.inf,
        cov_bound_violation_max=bound_viol,
        waypoint_error_max=wp_err,
        relax_gap_max=sol.max_relax_gap,
        checks=checks,
        passed=all(checks.values()),
    )


# ---------------------------------------------------------------------------
# Internal unit preconditioning
#
# PSD blocks mix covariance magnitudes (Sigma ~ 1e-3, Y ~ 1e1 in SI units),
# which cone-level equilibration cannot balance. Solving in characteristic
# units (state / c_x, input / c_u) and mapping back is exact and keeps the
# objective value unchanged.


def _auto_scales(p: CovSteerProblem) -> tuple[float, float]:
    c_x = float(np.sqrt(np.trace(p.boundary.Sigma_f) / p.sys.n))
    input_caps = [b.cap for b in p.cov_bounds if b.target == "input"]
    if input_caps:
        c_u = float(max(np.sqrt(np.trace(c) / p.sys.m) for c in input_caps))
    else:
        # no input cap: expect feedback to fight the per-step velocity noise
        c_u = max(c_x, float(np.abs(p.sys.D_seq).max()) / p.sys.dt)
    return max(c_x, 1e-12), max(c_u, 1e-12)


def _scale_problem(p: CovSteerProblem, c_x: float, c_u: float) -> CovSteerProblem:
    sys = p.sys
    scaled_sys = LinearGaussianSystem(
        A_seq=sys.A_seq,
        B_seq=sys.B_seq * (c_u / c_x),
        D_seq=sys.D_seq / c_x,
        dt=sys.dt,
    )
    bnd = p.boundary
    scaled_bnd = GaussianBoundary(
        mu_i=bnd.mu_i / c_x,
        Sigma_i=bnd.Sigma_i / c_x**2,
        Sigma_f=bnd.Sigma_f / c_x**2,
        mu_f=None if bnd.mu_f is None else bnd.mu_f / c_x,
    )
    w = p.weights
    scaled_w = CostWeights(
        Q_seq=w.Q_seq * c_x**2,
        R_seq=w.R_seq * c_u**2,
        Qbar=w.Qbar * c_x**2,
        Rbar=w.Rbar * c_u**2,
    )
    scaled_chance = []
    for c in p.chance:
        s = c_x if c.target == "state" else c_u
        if isinstance(c, LinearizedSurrogate):
            scaled_chance.append(replace(c, ell=c.ell * s, alpha=c.alpha * s))
        else:
            scaled_chance.append(replace(c, alpha=c.alpha * s))
    scaled_bounds = []
    for b in p.cov_bounds:
        s = c_x if b.target == "state" else c_u
        scaled_bounds.append(replace(b, cap=b.cap / s**2))
    scaled_wps = [replace(wp, target=wp.target / c_x) for wp in p.waypoints]
    return CovSteerProblem(
        sys=scaled_sys,
        boundary=scaled_bnd,
        weights=scaled_w,
        chance=tuple(scaled_chance),
        cov_bounds=tuple(scaled_bounds),
        waypoints=tuple(scaled_wps),
        terminal_mean_mode=p.terminal_mean_mode,
    )


def _unscale_solution(sol: CovSteerSolution, c_x: float, c_u: float) -> CovSteerSolution:
    return CovSteerSolution(
        mu_seq=sol.mu_seq * c_x,
        Sigma_seq=sol.Sigma_seq * c_x**2,
        K_seq=sol.K_seq * (c_u / c_x),
        v_seq=sol.v_seq * c_u,
        U_seq=sol.U_seq * (c_u * c_x),
        Y_seq=sol.Y_seq * c_u**2,
        objective=sol.objective,
        solver_status=sol.solver_status,
        relax_gaps=sol.relax_gaps,
    )


def _unscale_surrogate(s: LinearizedSurrogate, c_x: float, c_u: float) -> LinearizedSurrogate:
    f = c_x if s.target == "state" else c_u
    return replace(s, ell=s.ell / f, alpha=s.alpha / f)


def _tightened(p: CovSteerProblem, rel_margin: float) -> CovSteerProblem:
    """Shrink every covariance-cap LMI by a relative margin before solving.

    Active LMIs put the optimum exactly on the cone boundary, where the
    returned iterate violates by +/- solver tolerance; solving the slightly
    tightened problem makes the solution strictly feasible for the original.
    """
    if rel_margin <= 0:
        return p
    bnd = p.boundary
    n = p.sys.n
    Sigma_f = bnd.Sigma_f - (rel_margin * np.trace(bnd.Sigma_f) / n) * np.eye(n)
    boundary = GaussianBoundary(
        mu_i=bnd.mu_i, Sigma_i=bnd.Sigma_i, Sigma_f=Sigma_f, mu_f=bnd.mu_f
    )
    bounds = tuple(
        replace(
            b,
            cap=b.cap
            - (rel_margin * np.trace(b.cap) / b.cap.shape[0]) * np.eye(b.cap.shape[0]),
        )
        for b in p.cov_bounds
    )
    return replace(p, boundary=boundary, cov_bounds=bounds)


# ---------------------------------------------------------------------------
# Solve driver


def _reference_covariances(
    p: CovSteerProblem,
    raw_cc: list[AffineChanceConstraint],
    pilot: CovSteerSolution | None,
) -> list[LinearizedSurrogate]:
    """Linearize raw constraints at a pilot solution.

    The per-constraint reference is the step (inside the constraint window)
    of largest variance along the constraint normal; without a pilot the
    initial covariance (state) or the identity (input) stands in.
    """
    out = []
    N = p.sys.N
    for c in raw_cc:
        if pilot is None:
            ref = p.boundary.Sigma_i if c.target == "state" else np.eye(p.sys.m)
        else:
            seq = pilot.Sigma_seq if c.target == "state" else pilot.Y_seq
            ks = [k for k in c.steps(N) if k < seq.shape[0]]
            variances = [float(c.alpha @ seq[k] @ c.alpha) for k in ks]
            ref = seq[ks[int(np.argmax(variances))]]
        out.append(linearize(c, ref))
    return out


def solve_problem(
    p: CovSteerProblem,
    backend: SolverBackend | str | None = None,
    *,
    feas_tol: float = 1e-8,
    relinearize_rounds: int = 0,
    verbose: bool = False,
    tolerances: dict | None = None,
    scaling: str | tuple[float, float] | None = "auto",
    lmi_margin: float = 1e-5,
) -> CovSteerResult:
    """Assemble and solve a covariance steering problem end to end.

    Raw chance constraints are linearized against an unconstrained pilot
    solve (the same program without the chance constraints); pass
    ``relinearize_rounds`` up to 5 to refresh the linearization at the
    solution until the surrogate offsets move less than 1e-6.

    ``scaling``: 'auto' preconditions into characteristic units, None solves
    in the given units, or pass explicit (state_scale, input_scale). The
    returned solution and validation are always in the original units.
    ``lmi_margin`` tightens covariance caps by that relative amount during
    the solve so bound-active solutions remain strictly feasible.
    """
    if backend is None or isinstance(backend, str):
        backend = get_backend(backend)
    if scaling == "auto":
        c_x, c_u = _auto_scales(p)
    elif scaling is None:
        c_x, c_u = 1.0, 1.0
    else:
        c_x, c_u = float(scaling[0]), float(scaling[1])
    p_solve = _tightened(p, lmi_margin)
    ps = _scale_problem(p_solve, c_x, c_u) if (c_x, c_u) != (1.0, 1.0) else p_solve
    pre, raw_cc = _resolved_surrogates(ps)

    surrogates = list(pre)
    if raw_cc:
        pilot_problem = replace(ps, chance=tuple(pre))
        pilot_prog = assemble(pilot_problem, surrogates=pre)
        pilot_raw = backend.solve(pilot_prog, verbose=verbose, feas_tol=feas_tol)
        pilot = extract_policy(pilot_raw, ps) if pilot_raw.ok else None
        surrogates = pre + _reference_covariances(ps, raw_cc, pilot)

    rounds = max(0, min(int(relinearize_rounds), 5))
    attempt = 0
    while True:
        prog = assemble(ps, surrogates=surrogates)
        raw = backend.solve(prog, verbose=verbose, feas_tol=feas_tol)
        if not raw.ok:
            return CovSteerResult(
                status=raw.status, solution=None, validation=None, raw=raw,
                surrogates=tuple(_unscale_surrogate(s, c_x, c_u) for s in surrogates),
            )
        sol = extract_policy(raw, ps)
        if attempt >= rounds or not raw_cc:
            break
        drift = 0.0
        refreshed = list(pre)
        for c in raw_cc:
            seq = sol.Sigma_seq if c.target == "state" else sol.Y_seq
            ks = [k for k in c.steps(ps.sys.N) if k < seq.shape[0]]
            variances = [float(c.alpha @ seq[k] @ c.alpha) for k in ks]
            updated = linearize(c, seq[ks[int(np.argmax(variances))]])
            refreshed.append(updated)
        for new, old in zip(refreshed[len(pre):], surrogates[len(pre):]):
            drift = max(drift, abs(new.beta - old.beta))
        surrogates = refreshed
        attempt += 1
        if drift < 1e-6:
            break

    sol_phys = _unscale_solution(sol, c_x, c_u)
    surr_phys = [_unscale_surrogate(s, c_x, c_u) for s in surrogates]
    report = validate(sol_phys, p, surrogates=surr_phys, tolerances=tolerances)
    return CovSteerResult(
        status=raw.status,
        solution=sol_phys,
        validation=report,
        raw=raw,
        surrogates=tuple(surr_phys),
    )


# ---------------------------------------------------------------------------
# Solution persistence (versioned npz)

_SOLUTION_FORMAT = 1


def save_solution(sol: CovSteerSolution, path) -> None:
    np.savez_compressed(
        path,
        format_version=np.array(_SOLUTION_FORMAT),
        mu_seq=sol.mu_seq,
        Sigma_seq=sol.Sigma_seq,
        K_seq=sol.K_seq,
        v_seq=sol.v_seq,
        U_seq=sol.U_seq,
        Y_seq=sol.Y_seq,
        objective=np.array(sol.objective),
        solver_status=np.array(sol.solver_status),
        relax_gaps=sol.relax_gaps,
    )


def load_solution(path) -> CovSteerSolution:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != _SOLUTION_FORMAT:
            raise ValueError(f"unsupported solution format version {version}")
        return CovSteerSolution(
            mu_seq=data["mu_seq"],
            Sigma_seq=data["Sigma_seq"],
            K_seq=data["K_seq"],
            v_seq=data["v_seq"],
            U_seq=data["U_seq"],
            Y_seq=data["Y_seq"],
            objective=float(data["objective"]),
            solver_status=str(data["solver_status"]),
            relax_gaps=data["relax_gaps"],
        )

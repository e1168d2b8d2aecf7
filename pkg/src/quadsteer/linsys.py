"""Time-varying linear-Gaussian systems and exact closed-loop moment propagation.

The plant is ``x_{k+1} = A_k x_k + B_k u_k + D_k w_k`` with ``w_k ~ N(0, I)``;
any nonidentity noise covariance must be folded into ``D_k`` beforehand.
Moment propagation under an affine state-feedback policy is available in
closed form (Lyapunov recursion) and doubles as an independent oracle for the
SDP planner and for Monte Carlo sampling checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

__all__ = [
    "LinearGaussianSystem",
    "GaussianBoundary",
    "CostWeights",
    "build_double_integrator",
    "propagate_moments",
    "rollout_policy",
    "lqr_gain",
]

_SYM_RTOL = 1e-12


def _as_float_array(x, name: str) -> np.ndarray:
    arr = np.array(x, dtype=float)  # copy: stored fields are frozen read-only
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _check_symmetric(M: np.ndarray, name: str) -> None:
    scale = max(1.0, float(np.abs(M).max()) if M.size else 1.0)
    if np.abs(M - M.T).max() > _SYM_RTOL * scale:
        raise ValueError(f"{name} is not symmetric within tolerance")


def _check_spd(M: np.ndarray, name: str) -> None:
    _check_symmetric(M, name)
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} is not positive definite") from None


def _check_psd(M: np.ndarray, name: str, tol: float = 1e-10) -> None:
    _check_symmetric(M, name)
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    if w.min() < -tol * max(1.0, w.max(initial=1.0)):
        raise ValueError(f"{name} is not positive semidefinite (min eig {w.min():.3e})")


@dataclass(frozen=True)
class LinearGaussianSystem:
    """Plant ``x_{k+1} = A_k x_k + B_k u_k + D_k w_k`` with ``w_k ~ N(0, I)``.

    Sequences are stacked as (N, n, n), (N, n, m), (N, n, d) arrays. Immutable
    after construction; safe to share across concurrent rollout workers.
    """

    A_seq: np.ndarray
    B_seq: np.ndarray
    D_seq: np.ndarray
    dt: float

    def __post_init__(self):
        A = _as_float_array(self.A_seq, "A_seq")
        B = _as_float_array(self.B_seq, "B_seq")
        D = _as_float_array(self.D_seq, "D_seq")
        if A.ndim != 3 or A.shape[1] != A.shape[2]:
            raise ValueError("A_seq must be (N, n, n)")
        n = A.shape[1]
        if B.ndim != 3 or B.shape[0] != A.shape[0] or B.shape[1] != n:
            raise ValueError("B_seq must be (N, n, m) matching A_seq")
        if D.ndim != 3 or D.shape[0] != A.shape[0] or D.shape[1] != n:
            raise ValueError("D_seq must be (N, n, d) matching A_seq")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        for name, arr in (("A_seq", A), ("B_seq", B), ("D_seq", D)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def N(self) -> int:
        return self.A_seq.shape[0]

    @property
    def n(self) -> int:
        return self.A_seq.shape[1]

    @property
    def m(self) -> int:
        return self.B_seq.shape[2]

    @property
    def d(self) -> int:
        return self.D_seq.shape[2]

    def noise_cov(self, k: int) -> np.ndarray:
        """Per-step injected covariance ``D_k D_k^T``."""
        D = self.D_seq[k]
        return D @ D.T


@dataclass(frozen=True)
class GaussianBoundary:
    """Initial Gaussian and terminal targets: ``x_0 ~ N(mu_i, Sigma_i)``,
    terminal covariance cap ``Sigma_f`` and optional terminal mean ``mu_f``."""

    mu_i: np.ndarray
    Sigma_i: np.ndarray
    Sigma_f: np.ndarray
    mu_f: np.ndarray | None = None

    def __post_init__(self):
        mu_i = _as_float_array(self.mu_i, "mu_i").ravel()
        Sigma_i = _as_float_array(self.Sigma_i, "Sigma_i")
        Sigma_f = _as_float_array(self.Sigma_f, "Sigma_f")
        n = mu_i.size
        if Sigma_i.shape != (n, n) or Sigma_f.shape != (n, n):
            raise ValueError("Sigma_i / Sigma_f must be n x n matching mu_i")
        _check_spd(Sigma_i, "Sigma_i")
        _check_spd(Sigma_f, "Sigma_f")
        object.__setattr__(self, "mu_i", mu_i)
        object.__setattr__(self, "Sigma_i", Sigma_i)
        object.__setattr__(self, "Sigma_f", Sigma_f)
        if self.mu_f is not None:
            mu_f = _as_float_array(self.mu_f, "mu_f").ravel()
            if mu_f.size != n:
                raise ValueError("mu_f dimension mismatch")
            object.__setattr__(self, "mu_f", mu_f)

    @property
    def n(self) -> int:
        return self.mu_i.size


@dataclass(frozen=True)
class CostWeights:
    """Per-step covariance penalties (Q_seq, R_seq) and mean penalties
    (Qbar on the mean state, Rbar on the feedforward input)."""

    Q_seq: np.ndarray
    R_seq: np.ndarray
    Qbar: np.ndarray
    Rbar: np.ndarray

    def __post_init__(self):
        Q = _as_float_array(self.Q_seq, "Q_seq")
        R = _as_float_array(self.R_seq, "R_seq")
        Qbar = _as_float_array(self.Qbar, "Qbar")
        Rbar = _as_float_array(self.Rbar, "Rbar")
        if Q.ndim != 3 or R.ndim != 3 or Q.shape[0] != R.shape[0]:
            raise ValueError("Q_seq and R_seq must be (N, ., .) with equal N")
        for k in (0, Q.shape[0] - 1):
            _check_psd(Q[k], f"Q_seq[{k}]")
            _check_spd(R[k], f"R_seq[{k}]")
        _check_psd(Qbar, "Qbar")
        _check_psd(Rbar, "Rbar")  # zero allowed: feedforward penalty may be off
        for name, arr in (("Q_seq", Q), ("R_seq", R), ("Qbar", Qbar), ("Rbar", Rbar)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def constant(cls, Q, R, Qbar, Rbar, N: int) -> "CostWeights":
        """Replicate constant weight matrices over an N-step horizon."""
        Q = np.asarray(Q, dtype=float)
        R = np.asarray(R, dtype=float)
        return cls(
            Q_seq=np.broadcast_to(Q, (N,) + Q.shape).copy(),
            R_seq=np.broadcast_to(R, (N,) + R.shape).copy(),
            Qbar=np.asarray(Qbar, dtype=float),
            Rbar=np.asarray(Rbar, dtype=float),
        )


def build_double_integrator(
    dt: float, process_noise_pos: float, process_noise_vel: float, N: int
) -> LinearGaussianSystem:
    """3D double integrator: state [position; velocity], acceleration input.

    A = [[I3, dt I3], [0, I3]], B = [[0], [dt I3]],
    D = blkdiag(sigma_p I3, sigma_v I3), constant over the horizon.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if N < 1:
        raise ValueError("N must be at least 1")
    if process_noise_pos < 0 or process_noise_vel < 0:
        raise ValueError("noise magnitudes must be nonnegative")
    I3 = np.eye(3)
    A = np.block([[I3, dt * I3], [np.zeros((3, 3)), I3]])
    B = np.vstack([np.zeros((3, 3)), dt * I3])
    D = np.block(
        [
            [process_noise_pos * I3, np.zeros((3, 3))],
            [np.zeros((3, 3)), process_noise_vel * I3],
        ]
    )
    return LinearGaussianSystem(
        A_seq=np.broadcast_to(A, (N, 6, 6)).copy(),
        B_seq=np.broadcast_to(B, (N, 6, 3)).copy(),
        D_seq=np.broadcast_to(D, (N, 6, 6)).copy(),
        dt=dt,
    )


def _policy_arrays(sys: LinearGaussianSystem, policy) -> tuple[np.ndarray, np.ndarray]:
    """Normalize a policy into (K_seq, v_seq) of shapes (N, m, n), (N, m).

    Accepts anything with ``K_seq``/``v_seq`` attributes (a solved policy), a
    (K_seq, v_seq) pair, or a single constant gain matrix (v = 0).
    """
    if hasattr(policy, "K_seq") and hasattr(policy, "v_seq"):
        K, v = np.asarray(policy.K_seq, float), np.asarray(policy.v_seq, float)
    elif isinstance(policy, (tuple, list)) and len(policy) == 2:
        K, v = np.asarray(policy[0], float), np.asarray(policy[1], float)
    else:
        K = np.asarray(policy, float)
        v = np.zeros((sys.N, sys.m))
    if K.ndim == 2:
        K = np.broadcast_to(K, (sys.N, sys.m, sys.n)).copy()
    if v.ndim == 1:
        v = np.broadcast_to(v, (sys.N, sys.m)).copy()
    if K.shape != (sys.N, sys.m, sys.n):
        raise ValueError(f"gain sequence must have shape ({sys.N}, {sys.m}, {sys.n})")
    if v.shape != (sys.N, sys.m):
        raise ValueError(f"feedforward sequence must have shape ({sys.N}, {sys.m})")
    return K, v


def propagate_moments(
    sys: LinearGaussianSystem, policy, mu0, Sigma0
) -> tuple[np.ndarray, np.ndarray]:
    """Exact closed-loop moments under ``u_k = K_k (x_k - mu_k) + v_k``.

    mu_{k+1} = A_k mu_k + B_k v_k,
    Sigma_{k+1} = (A_k + B_k K_k) Sigma_k (A_k + B_k K_k)^T + D_k D_k^T.

    Returns (mu_seq, Sigma_seq) of shapes (N+1, n) and (N+1, n, n); every
    covariance is symmetrized to suppress roundoff drift.
    """
    K_seq, v_seq = _policy_arrays(sys, policy)
    mu = _as_float_array(mu0, "mu0").ravel()
    Sigma = _as_float_array(Sigma0, "Sigma0")
    if mu.size != sys.n or Sigma.shape != (sys.n, sys.n):
        raise ValueError("mu0 / Sigma0 dimensions do not match the system")
    _check_psd(Sigma, "Sigma0")

    mu_seq = np.empty((sys.N + 1, sys.n))
    Sigma_seq = np.empty((sys.N + 1, sys.n, sys.n))
    mu_seq[0] = mu
    Sigma_seq[0] = 0.5 * (Sigma + Sigma.T)
    for k in range(sys.N):
        A, B, D = sys.A_seq[k], sys.B_seq[k], sys.D_seq[k]
        Acl = A + B @ K_seq[k]
        mu_seq[k + 1] = A @ mu_seq[k] + B @ v_seq[k]
        S = Acl @ Sigma_seq[k] @ Acl.T + D @ D.T
        Sigma_seq[k + 1] = 0.5 * (S + S.T)
    return mu_seq, Sigma_seq


def rollout_policy(
    sys: LinearGaussianSystem,
    policy,
    mu0,
    Sigma0,
    n_rollouts: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample closed-loop trajectories of the linear plant, vectorized over
    rollouts.

    Initial states are drawn from N(mu0, Sigma0); the feedback reference is
    the deterministic mean recursion. Returns (X, U) with shapes
    (n_rollouts, N+1, n) and (n_rollouts, N, m).
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be at least 1")
    K_seq, v_seq = _policy_arrays(sys, policy)
    mu_seq, _ = propagate_moments(sys, (K_seq, v_seq), mu0, Sigma0)

    L0 = np.linalg.cholesky(np.asarray(Sigma0, float))
    X = np.empty((n_rollouts, sys.N + 1, sys.n))
    U = np.empty((n_rollouts, sys.N, sys.m))
    X[:, 0] = np.asarray(mu0, float).ravel() + rng.standard_normal(
        (n_rollouts, sys.n)
    ) @ L0.T
    for k in range(sys.N):
        A, B, D = sys.A_seq[k], sys.B_seq[k], sys.D_seq[k]
        u = (X[:, k] - mu_seq[k]) @ K_seq[k].T + v_seq[k]
        w = rng.standard_normal((n_rollouts, sys.d))
        X[:, k + 1] = X[:, k] @ A.T + u @ B.T + w @ D.T
        U[:, k] = u
    return X, U


def lqr_gain(A, B, Q, R) -> np.ndarray:
    """Infinite-horizon discrete LQR gain K such that ``u = K x`` is optimal
    (note the sign: K already includes the minus)."""
    A = np.asarray(A, float)
    B = np.asarray(B, float)
    P = scipy.linalg.solve_discrete_are(A, B, np.asarray(Q, float), np.asarray(R, float))
    return -np.linalg.solve(np.asarray(R, float) + B.T @ P @ B, B.T @ P @ A)

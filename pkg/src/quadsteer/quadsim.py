"""Discrete-time point-mass quadrotor simulator.

Frames and signs (used consistently everywhere): inertial frame is NED
(z down, gravity +z), body frame is front-right-down. Rotors push along the
body -z axis, so the thrust force in inertial coordinates is ``-R e3 tau``
and the force balance is

    m r_ddot = m g - R e3 tau + f_d.

The flatness map therefore aligns body z with ``-f_c``: hovering with
``f_c = (0, 0, -m g)`` gives a level attitude and ``tau = m g``.

The inner attitude/thrust loops are not modeled in detail; both track their
setpoints through first-order lags (geodesic interpolation for attitude,
saturation at the thrust ceiling). Translation integrates with RK4 at the
simulation substep while wind follows a first-order Gauss-Markov process.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .aero import DragModel, GroundTruthAero, predict

__all__ = [
    "GRAVITY",
    "E3",
    "QuadState",
    "AttitudeThrustCommand",
    "WindField",
    "SimParams",
    "SimTrace",
    "FlatnessSingularityError",
    "IntegrationFailureError",
    "flatness_map",
    "control_force",
    "thrust_to_eta",
    "eta_to_thrust",
    "step",
    "run_closed_loop",
    "quat_to_rot",
    "rot_to_quat",
    "quat_slerp",
]

GRAVITY = np.array([0.0, 0.0, 9.81])  # NED: gravity points along +z
E3 = np.array([0.0, 0.0, 1.0])


class FlatnessSingularityError(ValueError):
    """The commanded force admits no attitude (zero thrust or gimbal lock)."""


class IntegrationFailureError(RuntimeError):
    """State integration produced non-finite values."""


# ---------------------------------------------------------------------------
# Quaternion helpers (scalar-first convention, body-to-inertial rotation)


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rot_to_quat(R: np.ndarray) -> np.ndarray:
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    return q / np.linalg.norm(q)


def quat_slerp(q0: np.ndarray, q1: np.ndarray, alpha: float) -> np.ndarray:
    """Geodesic interpolation from q0 toward q1 by fraction alpha."""
    d = float(np.dot(q0, q1))
    if d < 0.0:
        q1 = -q1
        d = -d
    if d > 1.0 - 1e-12:
        out = q0 + alpha * (q1 - q0)
        return out / np.linalg.norm(out)
    theta = np.arccos(np.clip(d, -1.0, 1.0))
    s = np.sin(theta)
    out = (np.sin((1 - alpha) * theta) / s) * q0 + (np.sin(alpha * theta) / s) * q1
    return out / np.linalg.norm(out)


# ---------------------------------------------------------------------------
# Types


@dataclass
class QuadState:
    """Point-mass vehicle state; eta are normalized motor speeds in [0, 1]."""

    r: np.ndarray
    v: np.ndarray
    q: np.ndarray
    eta: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float).copy()
        self.v = np.asarray(self.v, dtype=float).copy()
        q = np.asarray(self.q, dtype=float).copy()
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-9:
            raise ValueError("quaternion must be unit norm")
        self.q = q / n
        eta = np.asarray(self.eta, dtype=float).copy()
        if eta.shape != (4,) or eta.min() < -1e-12 or eta.max() > 1 + 1e-12:
            raise ValueError("eta must be four normalized motor speeds in [0, 1]")
        self.eta = np.clip(eta, 0.0, 1.0)


@dataclass(frozen=True)
class AttitudeThrustCommand:
    R_d: np.ndarray
    tau_d: float
    yaw_ref: float = 0.0

    def __post_init__(self):
        R = np.asarray(self.R_d, dtype=float)
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or np.linalg.det(R) < 0:
            raise ValueError("R_d must be a proper rotation matrix")
        if self.tau_d < 0:
            raise ValueError("commanded thrust must be nonnegative")
        R.setflags(write=False)
        object.__setattr__(self, "R_d", R)

    @property
    def quaternion(self) -> np.ndarray:
        return rot_to_quat(self.R_d)


@dataclass(frozen=True)
class WindField:
    """Mean wind plus first-order Gauss-Markov turbulence per axis."""

    mean: np.ndarray
    turbulence_std: np.ndarray
    correlation_time_s: float = 1.0

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).ravel()
        std = np.asarray(self.turbulence_std, dtype=float).ravel()
        if std.size == 1:
            std = np.full(3, float(std))
        if mean.size != 3 or std.size != 3 or std.min() < 0:
            raise ValueError("mean must be length 3 and turbulence_std nonnegative")
        if self.correlation_time_s <= 0:
            raise ValueError("correlation time must be positive")
        mean.setflags(write=False)
        std.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "turbulence_std", std)

    def realize(self, n_steps: int, dt: float, rng: np.random.Generator) -> np.ndarray:
        """Sample an (n_steps, 3) wind sequence with the stationary
        distribution as the initial condition."""
        rho = np.exp(-dt / self.correlation_time_s)
        g = np.empty((n_steps, 3))
        g[0] = self.turbulence_std * rng.standard_normal(3)
        drive = np.sqrt(1.0 - rho**2) * self.turbulence_std
        xi = rng.standard_normal((n_steps - 1, 3)) if n_steps > 1 else None
        for k in range(1, n_steps):
            g[k] = rho * g[k - 1] + drive * xi[k - 1]
        return self.mean + g


@dataclass(frozen=True)
class SimParams:
    """Vehicle constants and sensor noise levels."""

    mass: float = 0.680
    max_thrust: float = 39.0
    tau_att: float = 0.060  # attitude inner-loop lag (s)
    tau_thrust: float = 0.025  # thrust lag (s)
    dt_sim: float = 0.001
    accel_noise_std: float = 0.2  # per 1 kHz IMU sample, m/s^2
    rpm_noise_frac: float = 0.01
    pos_noise_std: float = 0.002  # motion-capture-like position feedback, m
    yaw_ref: float = 0.0

    @property
    def thrust_coeff(self) -> float:
        """Per-motor coefficient c_T with tau = c_T sum(eta_i^2)."""
        return self.max_thrust / 4.0


def thrust_to_eta(tau: float, max_thrust: float) -> np.ndarray:
    """Equal-split motor speeds achieving total thrust tau (clipped)."""
    tau = float(np.clip(tau, 0.0, max_thrust))
    return np.full(4, np.sqrt(tau / max_thrust))


def eta_to_thrust(eta: np.ndarray, max_thrust: float) -> float:
    return float(max_thrust * np.mean(np.asarray(eta, dtype=float) ** 2))


# ---------------------------------------------------------------------------
# Control-law pieces


def flatness_map(f_c: np.ndarray, yaw_ref: float = 0.0, eps_thrust: float = 1e-6) -> AttitudeThrustCommand:
    """Attitude and thrust realizing a commanded 3-D force.

    tau = ||f_c|| and body z points along -f_c (thrust acts along -R e3);
    the body x axis is chosen to match the reference heading.
    """
    f_c = np.asarray(f_c, dtype=float).ravel()
    tau = float(np.linalg.norm(f_c))
    if tau <= eps_thrust:
        raise FlatnessSingularityError("commanded force is numerically zero")
    z_b = -f_c / tau
    x_c = np.array([np.cos(yaw_ref), np.sin(yaw_ref), 0.0])
    cross = np.cross(z_b, x_c)
    n = np.linalg.norm(cross)
    if n < 1e-8:
        raise FlatnessSingularityError("commanded force is parallel to the heading axis")
    y_b = cross / n
    x_b = np.cross(y_b, z_b)
    R_d = np.column_stack([x_b, y_b, z_b])
    return AttitudeThrustCommand(R_d=R_d, tau_d=tau, yaw_ref=yaw_ref)


def control_force(u: np.ndarray, f_d_hat: np.ndarray, mass: float) -> np.ndarray:
    """Force command canceling gravity and estimated drag: with a perfect
    estimate the translational loop reduces to a double integrator
    ``r_ddot = u``."""
    return -mass * GRAVITY - np.asarray(f_d_hat, dtype=float) + mass * np.asarray(u, dtype=float)


# ---------------------------------------------------------------------------
# Integration


def step(
    state: QuadState,
    cmd: AttitudeThrustCommand,
    wind: np.ndarray,
    truth: GroundTruthAero,
    dt: float,
    params: SimParams = SimParams(),
) -> QuadState:
    """One substep: first-order attitude/thrust tracking, RK4 translation.

    ``wind`` is the instantaneous wind velocity (the caller advances the
    wind process). Attitude, rotor speeds and wind are held during the RK4
    stages; only position and velocity vary.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    alpha_att = 1.0 if params.tau_att <= 0 else 1.0 - np.exp(-dt / params.tau_att)
    q_new = quat_slerp(state.q, cmd.quaternion, alpha_att)

    tau_now = eta_to_thrust(state.eta, params.max_thrust)
    alpha_thr = 1.0 if params.tau_thrust <= 0 else 1.0 - np.exp(-dt / params.tau_thrust)
    tau_new = tau_now + alpha_thr * (float(np.clip(cmd.tau_d, 0, params.max_thrust)) - tau_now)
    eta_new = thrust_to_eta(tau_new, params.max_thrust)

    R = quat_to_rot(q_new)
    thrust_force = -R @ E3 * tau_new

    def accel(v):
        f_d = truth.force(q_new, eta_new, v, wind)
        return GRAVITY + (thrust_force + f_d) / params.mass

    v0 = state.v
    k1 = accel(v0)
    k2 = accel(v0 + 0.5 * dt * k1)
    k3 = accel(v0 + 0.5 * dt * k2)
    k4 = accel(v0 + dt * k3)
    a_eff = (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
    v_new = v0 + dt * a_eff
    # position: integrate v(t) = v0 + int a; trapezoid on the RK4 velocities
    r_new = state.r + dt * v0 + 0.5 * dt * dt * a_eff

    if not (np.all(np.isfinite(r_new)) and np.all(np.isfinite(v_new))):
        raise IntegrationFailureError(f"non-finite state at t={state.t + dt:.4f}")
    return QuadState(r=r_new, v=v_new, q=q_new, eta=eta_new, t=state.t + dt)


# ---------------------------------------------------------------------------
# Closed loop


@dataclass
class SimTrace:
    """Per-control-step record of one rollout (uniform grid at the control
    period). Columns are documented in :meth:`csv_header`."""

    t: np.ndarray
    r: np.ndarray
    v: np.ndarray
    q: np.ndarray
    eta: np.ndarray
    u_cmd: np.ndarray
    f_c: np.ndarray
    f_d_true: np.ndarray
    f_d_meas: np.ndarray
    f_d_hat: np.ndarray
    w_true: np.ndarray
    w_hat: np.ndarray
    P_diag: np.ndarray
    innovation: np.ndarray
    mu_ref: np.ndarray
    cmd_quat: np.ndarray
    seed: int = 0

    FIELDS = (
        ("t", 1), ("r", 3), ("v", 3), ("q", 4), ("eta", 4), ("u_cmd", 3),
        ("f_c", 3), ("f_d_true", 3), ("f_d_meas", 3), ("f_d_hat", 3),
        ("w_true", 3), ("w_hat", 3), ("P_diag", 3), ("innovation", 3),
        ("mu_ref", 6), ("cmd_quat", 4),
    )

    @classmethod
    def csv_header(cls) -> list[str]:
        cols = []
        for name, width in cls.FIELDS:
            if width == 1:
                cols.append(name)
            else:
                cols.extend(f"{name}_{i}" for i in range(width))
        return cols

    def to_csv(self, path) -> None:
        mats = []
        for name, width in self.FIELDS:
            arr = getattr(self, name)
            mats.append(arr.reshape(len(self.t), width))
        table = np.hstack(mats)
        np.savetxt(
            path,
            table,
            delimiter=",",
            header=",".join(self.csv_header()),
            comments="",
        )

    def position_error(self) -> np.ndarray:
        """Per-step distance to the reference mean position (m)."""
        return np.linalg.norm(self.r - self.mu_ref[:, :3], axis=1)

    def attitude_cmd_rate(self) -> np.ndarray:
        """Geodesic rate of the attitude command (rad/s), the smoothness
        proxy reported instead of angular acceleration."""
        dt = np.diff(self.t.ravel())
        dots = np.abs(np.sum(self.cmd_quat[:-1] * self.cmd_quat[1:], axis=1))
        ang = 2.0 * np.arccos(np.clip(dots, -1.0, 1.0))
        return ang / np.maximum(dt, 1e-12)


def run_closed_loop(
    policy,
    *,
    truth: GroundTruthAero,
    drag_model: DragModel | None,
    wind: WindField,
    dt: float,
    N: int,
    x0: np.ndarray,
    estimator: str = "ekf",
    seed: int = 0,
    params: SimParams = SimParams(),
    ekf_factory=None,
) -> SimTrace:
    """Simulate one rollout under the affine policy (Eq.-(9)-style feedback
    around the planned mean).

    policy: anything with mu_seq (N+1, 6), K_seq (N, 3, 6), v_seq (N, 3).
    estimator: 'ekf' (wind EKF through the drag model), 'lp' (first-order
    low-pass of the raw drag measurement), or 'none' (no compensation);
    deterministic for a fixed seed.
    """
    from .windekf import LowPassBaseline, SensorFrame, WindEkf, measure_drag

    if estimator not in ("ekf", "lp", "none"):
        raise ValueError("estimator must be 'ekf', 'lp' or 'none'")
    if estimator == "ekf" and drag_model is None:
        raise ValueError("EKF compensation needs a drag model")
    mu_seq = np.asarray(policy.mu_seq, dtype=float)
    K_seq = np.asarray(policy.K_seq, dtype=float)
    v_seq = np.asarray(policy.v_seq, dtype=float)
    if mu_seq.shape[0] < N + 1 or K_seq.shape[0] < N:
        raise ValueError("policy horizon is shorter than the scenario")

    rng = np.random.default_rng(seed)
    n_sub = max(1, int(round(dt / params.dt_sim)))
    dt_sub = dt / n_sub
    wind_track = wind.realize(N * n_sub + 1, dt_sub, rng)

    x0 = np.asarray(x0, dtype=float).ravel()
    state = QuadState(
        r=x0[:3],
        v=x0[3:6],
        q=np.array([1.0, 0.0, 0.0, 0.0]),
        eta=thrust_to_eta(params.mass * 9.81, params.max_thrust),
        t=0.0,
    )
    ekf = None
    lp = None
    if estimator == "ekf":
        ekf = (ekf_factory or WindEkf.default)(drag_model, dt)
    elif estimator == "lp":
        lp = LowPassBaseline()

    rows = {name: np.empty((N, width)) for name, width in SimTrace.FIELDS}
    sqrt_n = np.sqrt(n_sub)
    for k in range(N):
        w_now = wind_track[k * n_sub]
        # position feedback noise only; velocity feedback is clean
        x_hat = np.concatenate(
            [state.r + params.pos_noise_std * rng.standard_normal(3), state.v]
        )
        u = K_seq[k] @ (x_hat - mu_seq[k]) + v_seq[k]

        if estimator == "ekf":
            f_hat = ekf.predicted_drag(state.q, state.eta, state.v)
        elif estimator == "lp":
            f_hat = lp.state.copy()
        else:
            f_hat = np.zeros(3)

        f_c = control_force(u, f_hat, params.mass)
        cmd = flatness_map(f_c, params.yaw_ref)

        f_d_true0 = truth.force(state.q, state.eta, state.v, w_now)
        v_start = state.v.copy()
        mid = n_sub // 2
        R_mid, eta_mid = quat_to_rot(state.q), state.eta
        for s in range(n_sub):
            w_sub = wind_track[k * n_sub + s]
            state = step(state, cmd, w_sub, truth, dt_sub, params)
            if s == mid:
                R_mid = quat_to_rot(state.q)
                eta_mid = state.eta.copy()

        # exact interval-average acceleration plus averaged IMU noise
        a_meas = (state.v - v_start) / dt + params.accel_noise_std / sqrt_n * rng.standard_normal(3)
        eta_meas = eta_mid * (1.0 + params.rpm_noise_frac * rng.standard_normal(4))
        frame = SensorFrame(a_avg=a_meas, eta_meas=eta_meas, R_att=R_mid, t=state.t)
        f_meas = measure_drag(frame, params.mass, params.thrust_coeff).f_d_meas

        innovation = np.zeros(3)
        if estimator == "ekf":
            innovation = ekf.update(f_meas, state.q, eta_meas, state.v)
        elif estimator == "lp":
            lp.update(f_meas, dt)

        rows["t"][k] = state.t
        rows["r"][k] = state.r
        rows["v"][k] = state.v
        rows["q"][k] = state.q
        rows["eta"][k] = state.eta
        rows["u_cmd"][k] = u
        rows["f_c"][k] = f_c
        rows["f_d_true"][k] = f_d_true0
        rows["f_d_meas"][k] = f_meas
        rows["f_d_hat"][k] = f_hat
        rows["w_true"][k] = w_now
        rows["w_hat"][k] = ekf.w_hat if ekf is not None else np.zeros(3)
        rows["P_diag"][k] = np.diag(ekf.P) if ekf is not None else np.zeros(3)
        rows["innovation"][k] = innovation
        rows["mu_ref"][k] = mu_seq[k + 1, :6]
        rows["cmd_quat"][k] = cmd.quaternion

    return SimTrace(seed=seed, **rows)

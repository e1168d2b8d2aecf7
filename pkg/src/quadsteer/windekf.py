"""Online wind estimation from drag measurements.

Drag forces are directly observable from the force balance: every term of
``m r_ddot = m g - R e3 tau + f_d`` except f_d is measured (IMU acceleration
averaged over the adaptation interval, thrust reconstructed from the RPM
readout and the motor thrust curve), giving a noisy drag measurement at the
adaptation rate.

The filter state is the 3-vector wind w, modeled as a random walk. The drag
model is affine in w, so the measurement Jacobian is the model's wind gain
H = C_d + diag(net(q, eta)) and the filter inherits plain linear-Kalman
convergence. The predicted drag used for compensation,
``f_hat = H (w_hat - v)``, reacts to the vehicle velocity instantly while
the wind estimate adapts, which is what removes the lag of low-pass
schemes. A first-order low-pass of the raw measurement is provided as the
comparison baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .aero import DragModel, jacobian_wrt_wind, predict
from .quadsim import E3, GRAVITY, SimParams

__all__ = [
    "WindEkf",
    "DragMeasurement",
    "SensorFrame",
    "LowPassBaseline",
    "measure_drag",
    "default_measurement_noise",
]


@dataclass
class SensorFrame:
    """Raw sensor bundle for one adaptation interval: averaged (noisy) IMU
    acceleration, RPM readout, and the attitude at the sample point."""

    a_avg: np.ndarray
    eta_meas: np.ndarray
    R_att: np.ndarray
    t: float


@dataclass
class DragMeasurement:
    """Drag force extracted from the force balance; satisfies
    ``f_d_meas = m a_avg - m g + R_att e3 tau_hat`` by construction."""

    f_d_meas: np.ndarray
    a_avg: np.ndarray
    tau_hat: float
    R_att: np.ndarray
    timestamp: float

    def residual(self, mass: float) -> np.ndarray:
        """Algebraic consistency check of the force-balance identity."""
        return (
            mass * self.a_avg
            - mass * GRAVITY
            + self.R_att @ E3 * self.tau_hat
            - self.f_d_meas
        )


def measure_drag(frame: SensorFrame, mass: float, thrust_coeff: float) -> DragMeasurement:
    """Reconstruct the drag force from one sensor frame.

    thrust_coeff is the per-motor coefficient c_T in tau = c_T sum(eta^2);
    noise enters only through the acceleration and RPM readouts.
    """
    eta = np.clip(np.asarray(frame.eta_meas, dtype=float), 0.0, None)
    tau_hat = float(thrust_coeff * np.sum(eta**2))
    a = np.asarray(frame.a_avg, dtype=float)
    f = mass * a - mass * GRAVITY + frame.R_att @ E3 * tau_hat
    return DragMeasurement(
        f_d_meas=f, a_avg=a, tau_hat=tau_hat, R_att=frame.R_att, timestamp=frame.t
    )


def default_measurement_noise(params: SimParams, dt: float) -> np.ndarray:
    """Drag-measurement covariance implied by the sensor noise levels.

    Acceleration noise averages down over the n IMU samples per adaptation
    interval; the RPM readout perturbs the reconstructed thrust by roughly
    2 c_T eta^2 per unit relative speed error (evaluated at hover).
    """
    n_avg = max(1, int(round(dt / params.dt_sim)))
    accel_var = (params.mass * params.accel_noise_std) ** 2 / n_avg
    hover_tau = params.mass * 9.81
    thrust_var = (2.0 * hover_tau * params.rpm_noise_frac / 2.0) ** 2
    return (accel_var + thrust_var) * np.eye(3)


class WindEkf:
    """Random-walk EKF over the wind vector (single-owner mutable state)."""

    def __init__(
        self,
        model: DragModel,
        Q_proc: np.ndarray,
        R_meas: np.ndarray,
        w0: np.ndarray | None = None,
        P0: np.ndarray | None = None,
    ):
        self.model = model
        self.Q_proc = np.asarray(Q_proc, dtype=float)
        self.R_meas = np.asarray(R_meas, dtype=float)
        self.w_hat = np.zeros(3) if w0 is None else np.asarray(w0, dtype=float).copy()
        self.P = 25.0 * np.eye(3) if P0 is None else np.asarray(P0, dtype=float).copy()

    @classmethod
    def default(cls, model: DragModel, dt: float, params: SimParams = SimParams()) -> "WindEkf":
        """Defaults favoring fast adaptation: random-walk intensity
        (0.5 m/s per sqrt-second) and measurement noise from the sensor
        model; the initial covariance admits winds of several m/s."""
        Q = (0.5**2 * dt) * np.eye(3)
        return cls(model=model, Q_proc=Q, R_meas=default_measurement_noise(params, dt))

    def predicted_drag(self, q, eta, v) -> np.ndarray:
        """Compensation force at the current wind estimate; tracks the
        vehicle velocity instantly even between wind updates."""
        return predict(self.model, q, eta, v, self.w_hat)

    def update(self, f_d_meas: np.ndarray, q, eta, v) -> np.ndarray:
        """Predict-update cycle on one drag measurement; returns the
        innovation. Joseph-form covariance update keeps P symmetric PSD."""
        P_prior = self.P + self.Q_proc
        H = jacobian_wrt_wind(self.model, q, eta)
        S = H @ P_prior @ H.T + self.R_meas
        try:
            K = np.linalg.solve(S.T, (P_prior @ H.T).T).T
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(
                f"innovation covariance is singular: {exc}"
            ) from None
        nu = np.asarray(f_d_meas, dtype=float) - self.predicted_drag(q, eta, v)
        self.w_hat = self.w_hat + K @ nu
        IKH = np.eye(3) - K @ H
        P = IKH @ P_prior @ IKH.T + K @ self.R_meas @ K.T
        self.P = 0.5 * (P + P.T)
        return nu


@dataclass
class LowPassBaseline:
    """First-order low-pass of the raw drag measurement (the INDI-style
    baseline the EKF replaces); DC gain is exactly 1."""

    cutoff_hz: float = 5.0
    state: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def update(self, raw: np.ndarray, dt: float) -> np.ndarray:
        if dt <= 0:
            raise ValueError("dt must be positive")
        alpha = 1.0 - np.exp(-2.0 * np.pi * self.cutoff_hz * dt)
        self.state = self.state + alpha * (np.asarray(raw, dtype=float) - self.state)
        return self.state.copy()


def lp_step(f: LowPassBaseline, raw: np.ndarray, dt: float) -> np.ndarray:
    """Functional wrapper over :meth:`LowPassBaseline.update`."""
    return f.update(raw, dt)

"""Hybrid aerodynamic drag model: diagonal linear coefficients plus a small
ReLU network gain, with a trainer and a synthetic flight-data generator.

The predicted force is ``f = (C_d + diag(net(q, eta))) (w - v)`` where q is
the unit attitude quaternion (scalar first), eta the four motor speeds
normalized to [0, 1], v the inertial velocity and w the wind. The model is
odd in the relative wind ``w - v``, which is what justifies training on
zero-ambient-wind data only: indoor flights sample the same physics through
the vehicle's own velocity.

The network has widths (8, 20, 20, 3): inputs are the 4 quaternion
components and the 4 motor speeds; the 3 outputs form the diagonal gain
matrix added to C_d (also making the wind Jacobian simply C_d + diag(net)).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mlp import Adam, Mlp

__all__ = [
    "DragModel",
    "FlightDataset",
    "GroundTruthAero",
    "TrainConfig",
    "TrainResult",
    "ProtocolViolationError",
    "predict",
    "jacobian_wrt_wind",
    "train",
    "generate_synthetic_flights",
    "default_training_profiles",
    "save_model",
    "load_model",
]

NET_WIDTHS = (8, 20, 20, 3)


class ProtocolViolationError(ValueError):
    """Training data violates the zero-ambient-wind collection protocol."""


def _check_quaternion(q: np.ndarray, tol: float = 1e-3) -> np.ndarray:
    q = np.asarray(q, dtype=float).ravel()
    if q.size != 4:
        raise ValueError("quaternion must have 4 components")
    if abs(np.linalg.norm(q) - 1.0) > tol:
        raise ValueError("quaternion is not unit norm")
    return q


@dataclass
class DragModel:
    """Diagonal linear drag plus attitude/rotor-dependent network gain."""

    C_d: np.ndarray
    net: Mlp

    def __post_init__(self):
        C = np.asarray(self.C_d, dtype=float)
        if C.shape == (3,):
            C = np.diag(C)
        if C.shape != (3, 3):
            raise ValueError("C_d must be 3x3 (or its diagonal)")
        if np.abs(C - np.diag(np.diag(C))).max() > 0:
            raise ValueError("C_d must be diagonal")
        self.C_d = C
        if self.net.widths != NET_WIDTHS:
            raise ValueError(f"network widths must be {NET_WIDTHS}")

    def gain(self, q, eta) -> np.ndarray:
        """Total 3x3 gain ``C_d + diag(net(q, eta))`` (also the wind Jacobian)."""
        q = _check_quaternion(q)
        eta = np.asarray(eta, dtype=float).ravel()
        if eta.size != 4:
            raise ValueError("eta must have 4 motor speeds")
        out = self.net.forward(np.concatenate([q, eta]))
        return self.C_d + np.diag(out)

    @classmethod
    def linear(cls, diag, seed: int = 0) -> "DragModel":
        """Linear-only model: network initialized to exact zero output."""
        net = Mlp(NET_WIDTHS, np.random.default_rng(seed), zero_output=True)
        return cls(C_d=np.diag(np.asarray(diag, dtype=float)), net=net)


def predict(m: DragModel, q, eta, v, w) -> np.ndarray:
    """Predicted drag force (N) at the given attitude, rotor speeds,
    inertial velocity and wind."""
    H = m.gain(q, eta)
    rel = np.asarray(w, dtype=float) - np.asarray(v, dtype=float)
    return H @ rel


def jacobian_wrt_wind(m: DragModel, q, eta) -> np.ndarray:
    """d(force)/d(wind); the model is affine in w, so this is exactly
    ``C_d + diag(net(q, eta))``, independent of w."""
    return m.gain(q, eta)


@dataclass
class FlightDataset:
    """Columns of recorded samples: attitude, motor speeds, velocity, wind,
    measured drag force."""

    q: np.ndarray  # (B, 4) unit quaternions
    eta: np.ndarray  # (B, 4) in [0, 1]
    v: np.ndarray  # (B, 3) m/s
    w: np.ndarray  # (B, 3) m/s
    f: np.ndarray  # (B, 3) N

    def __post_init__(self):
        arrays = {}
        for name, width in (("q", 4), ("eta", 4), ("v", 3), ("w", 3), ("f", 3)):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim != 2 or arr.shape[1] != width:
                raise ValueError(f"{name} must be (B, {width})")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            arrays[name] = arr
        sizes = {a.shape[0] for a in arrays.values()}
        if len(sizes) != 1:
            raise ValueError("columns have inconsistent sample counts")
        norms = np.linalg.norm(arrays["q"], axis=1)
        if np.abs(norms - 1.0).max(initial=0.0) > 1e-6:
            raise ValueError("quaternions must be unit norm within 1e-6")
        self.__dict__.update(arrays)

    def __len__(self) -> int:
        return self.q.shape[0]

    def save(self, path) -> None:
        np.savez_compressed(path, format_version=np.array(1), q=self.q,
                            eta=self.eta, v=self.v, w=self.w, f=self.f)

    @classmethod
    def load(cls, path) -> "FlightDataset":
        with np.load(path, allow_pickle=False) as d:
            return cls(q=d["q"], eta=d["eta"], v=d["v"], w=d["w"], f=d["f"])


@dataclass(frozen=True)
class GroundTruthAero:
    """Simulation stand-in for the true aerodynamics.

    Richer than the identified model so the network residual has structure
    to learn: ``f = -(C1 + C2 ||u|| + g(q, eta) I) u`` with u = v - w, where
    g adds an attitude-tilt and rotor-speed dependent gain.
    """

    linear_coeffs: np.ndarray
    quadratic_coeffs: np.ndarray
    attitude_gain: float = 0.0
    rpm_gain: float = 0.0

    def __post_init__(self):
        for name in ("linear_coeffs", "quadratic_coeffs"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape == (3,):
                arr = np.diag(arr)
            if arr.shape != (3, 3):
                raise ValueError(f"{name} must be 3x3 or a diagonal")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def force(self, q, eta, v, w) -> np.ndarray:
        q = _check_quaternion(q)
        eta = np.asarray(eta, dtype=float).ravel()
        u = np.asarray(v, dtype=float) - np.asarray(w, dtype=float)
        tilt = 2.0 * (q[1] ** 2 + q[2] ** 2)  # 1 - R33 for a unit quaternion
        g = self.attitude_gain * tilt + self.rpm_gain * float(np.mean(eta**2))
        gain = self.linear_coeffs + self.quadratic_coeffs * np.linalg.norm(u) + g * np.eye(3)
        return -gain @ u


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    lr: float = 1e-3
    tikhonov_lambda: float = 1e-4
    seed: int = 0
    val_fraction: float = 0.2


@dataclass
class TrainResult:
    model: DragModel
    train_curve: np.ndarray  # per-epoch training MSE (regularizer excluded)
    val_curve: np.ndarray
    linear_val_mse: float  # validation MSE of the linear-only part
    hybrid_val_mse: float  # validation MSE including the network


def _fit_linear_diag(v: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Per-axis least squares of f = -C v (zero-wind data)."""
    diag = np.zeros(3)
    for i in range(3):
        denom = float(v[:, i] @ v[:, i])
        diag[i] = -float(f[:, i] @ v[:, i]) / denom if denom > 0 else 0.0
    return diag


def train(dataset: FlightDataset, config: TrainConfig = TrainConfig()) -> TrainResult:
    """Two-stage fit: least-squares C_d first, then the network on the
    residual with Adam and a Tikhonov (sum of squared weights) penalty.

    All samples must have zero wind; the model's odd symmetry in relative
    wind is what makes that protocol sufficient. Deterministic per seed.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if np.abs(dataset.w).max() > 0:
        raise ProtocolViolationError("training data must have zero ambient wind")

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(dataset))
    n_val = max(1, int(round(config.val_fraction * len(dataset)))) if len(dataset) > 1 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        train_idx = order
        val_idx = order

    C_diag = _fit_linear_diag(dataset.v[train_idx], dataset.f[train_idx])
    net = Mlp(NET_WIDTHS, rng, zero_output=True)
    X = np.hstack([dataset.q, dataset.eta])
    # residual after the linear part; the network output g predicts it
    # through elementwise -g * v (relative wind is -v at zero ambient wind)
    resid = dataset.f + dataset.v * C_diag

    def mse(idx) -> float:
        g = net.forward(X[idx])
        err = -g * dataset.v[idx] - resid[idx]
        return float(np.mean(err**2))

    lam = config.tikhonov_lambda
    opt = Adam(lr=config.lr)
    train_curve = np.empty(config.epochs)
    val_curve = np.empty(config.epochs)
    Xt, vt, rt = X[train_idx], dataset.v[train_idx], resid[train_idx]
    B = Xt.shape[0]
    for epoch in range(config.epochs):
        g, cache = net.forward_cached(Xt)
        err = -g * vt - rt
        train_curve[epoch] = float(np.mean(err**2))
        grad_g = (2.0 / err.size) * err * (-vt)
        gW, gb = net.backward(cache, grad_g)
        for i, W in enumerate(net.weights):
            gW[i] += 2.0 * lam * W
        opt.step(net.weights + net.biases, gW + gb)
        val_curve[epoch] = mse(val_idx)

    model = DragModel(C_d=np.diag(C_diag), net=net)
    linear_val = float(np.mean(resid[val_idx] ** 2))
    return TrainResult(
        model=model,
        train_curve=train_curve,
        val_curve=val_curve,
        linear_val_mse=linear_val,
        hybrid_val_mse=mse(val_idx),
    )


# ---------------------------------------------------------------------------
# Synthetic flight data


def default_training_profiles(max_speed: float = 12.0, samples_per_profile: int = 400):
    """Velocity/acceleration profiles covering speeds up to ``max_speed``:
    horizontal circles at several speeds, a figure-8 sweep, climbs and
    descents. Returns a list of (v, a) arrays of shape (S, 3) each."""
    profiles = []
    for speed in np.linspace(0.15, 1.0, 4) * max_speed:
        radius = max(2.0, speed)  # keeps lateral accel in a flyable range
        omega = speed / radius
        t = np.linspace(0.0, 2 * np.pi / omega, samples_per_profile, endpoint=False)
        v = np.stack(
            [-speed * np.sin(omega * t), speed * np.cos(omega * t), np.zeros_like(t)],
            axis=1,
        )
        a = np.stack(
            [
                -speed * omega * np.cos(omega * t),
                -speed * omega * np.sin(omega * t),
                np.zeros_like(t),
            ],
            axis=1,
        )
        profiles.append((v, a))
    # lemniscate sweep: x = A sin(wt), y = (A/2) sin(2wt), peak speed ~ max_speed
    T = 5.4
    omega = 2 * np.pi / T
    A = max_speed / (omega * np.sqrt(2.0))
    t = np.linspace(0.0, T, samples_per_profile, endpoint=False)
    v = np.stack(
        [
            A * omega * np.cos(omega * t),
            A * omega * np.cos(2 * omega * t),
            np.zeros_like(t),
        ],
        axis=1,
    )
    a = np.stack(
        [
            -A * omega**2 * np.sin(omega * t),
            -2 * A * omega**2 * np.sin(2 * omega * t),
            np.zeros_like(t),
        ],
        axis=1,
    )
    profiles.append((v, a))
    # vertical climbs/descents with gentle horizontal drift
    for vz in (-2.0, 2.0):
        t = np.linspace(0.0, 4.0, samples_per_profile // 2)
        v = np.stack([0.5 * t / 4.0, np.zeros_like(t), vz * np.ones_like(t)], axis=1)
        a = np.stack([np.full_like(t, 0.5 / 4.0), np.zeros_like(t), np.zeros_like(t)], axis=1)
        profiles.append((v, a))
    return profiles


def generate_synthetic_flights(
    truth: GroundTruthAero,
    profiles=None,
    noise_std: float = 0.0,
    seed: int = 0,
    mass: float = 0.680,
    max_thrust: float = 39.0,
) -> FlightDataset:
    """Stand-in for indoor flight data collection at zero ambient wind.

    Each (velocity, acceleration) sample is converted through inverse
    dynamics into the flatness-consistent attitude and motor speeds: the
    commanded force balances gravity, the trajectory acceleration and the
    true drag, exactly as the tracking controller would fly it in steady
    state. Measured forces get additive Gaussian noise of ``noise_std`` N.
    """
    from .quadsim import GRAVITY, flatness_map, thrust_to_eta

    if profiles is None:
        profiles = default_training_profiles()
    rng = np.random.default_rng(seed)
    rows_q, rows_eta, rows_v, rows_f = [], [], [], []
    w0 = np.zeros(3)
    for v_arr, a_arr in profiles:
        for v, a in zip(np.atleast_2d(v_arr), np.atleast_2d(a_arr)):
            f_d = truth.force(np.array([1.0, 0, 0, 0]), np.full(4, 0.5), v, w0)
            f_c = mass * a - mass * GRAVITY - f_d
            cmd = flatness_map(f_c)
            eta = thrust_to_eta(cmd.tau_d, max_thrust)
            # re-evaluate drag at the attitude/rotor state actually flown
            f_d = truth.force(cmd.quaternion, eta, v, w0)
            rows_q.append(cmd.quaternion)
            rows_eta.append(eta)
            rows_v.append(v)
            rows_f.append(f_d)
    q = np.array(rows_q)
    eta = np.array(rows_eta)
    v = np.array(rows_v)
    f = np.array(rows_f)
    if noise_std > 0:
        f = f + noise_std * rng.standard_normal(f.shape)
    return FlightDataset(q=q, eta=eta, v=v, w=np.zeros_like(v), f=f)


# ---------------------------------------------------------------------------
# Model persistence (versioned npz)

_MODEL_FORMAT = 1


def save_model(model: DragModel, path) -> None:
    payload = {
        "format_version": np.array(_MODEL_FORMAT),
        "widths": np.array(model.net.widths),
        "C_d_diag": np.diag(model.C_d),
    }
    for i, (W, b) in enumerate(zip(model.net.weights, model.net.biases)):
        payload[f"W{i}"] = W
        payload[f"b{i}"] = b
    np.savez_compressed(path, **payload)


def load_model(path) -> DragModel:
    with np.load(path, allow_pickle=False) as d:
        version = int(d["format_version"])
        if version != _MODEL_FORMAT:
            raise ValueError(f"unsupported model format version {version}")
        widths = tuple(int(w) for w in d["widths"])
        net = Mlp(widths, np.random.default_rng(0))
        for i in range(net.n_layers):
            net.weights[i] = d[f"W{i}"]
            net.biases[i] = d[f"b{i}"]
        return DragModel(C_d=np.diag(d["C_d_diag"]), net=net)

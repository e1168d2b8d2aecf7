"""Scenario configuration: schema-validated YAML with units in key names.

A scenario file fully determines a planning problem (system, boundary,
weights, waypoints, covariance bounds, chance constraints), the simulation
environment (wind field, vehicle and sensor constants, ground-truth
aerodynamics), and experiment defaults. Three scenarios ship with the
package: ``figure8`` (aggressive tracking with partial covariance caps),
``landing`` (cone chance constraints with shrinking control authority), and
``minimal`` (a fast smoke-test problem).

Chance-constraint entries may carry a pre-linearized ``surrogate`` block
(ell, beta); those are passed to the planner verbatim as configuration
data. Entries without one are linearized against a pilot solve. An input
constraint with ``bound_final`` shrinks linearly from ``bound`` to
``bound_final`` over the trailing ``shrink_fraction`` of the horizon.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .aero import GroundTruthAero, TrainConfig
from .chance import AffineChanceConstraint, LinearizedSurrogate, PartialCovarianceBound
from .covsteer import CovSteerProblem, Waypoint
from .linsys import CostWeights, GaussianBoundary, build_double_integrator
from .quadsim import SimParams, WindField

__all__ = ["ScenarioConfig", "ConfigError", "SCHEMA", "available_scenarios"]


class ConfigError(ValueError):
    """Scenario file failed schema validation or is internally inconsistent."""


def _vec(n):
    return {"type": "array", "items": {"type": "number"}, "minItems": n, "maxItems": n}


_WINDOW = {
    "type": "array",
    "items": {"type": "integer"},
    "minItems": 2,
    "maxItems": 2,
}

SCHEMA = {
    "type": "object",
    "required": ["name", "system", "boundary", "weights"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "description": {"type": "string"},
        "system": {
            "type": "object",
            "required": ["dt_s", "steps", "noise_pos_m", "noise_vel_mps"],
            "additionalProperties": False,
            "properties": {
                "dt_s": {"type": "number", "exclusiveMinimum": 0},
                "steps": {"type": "integer", "minimum": 1},
                "noise_pos_m": {"type": "number", "minimum": 0},
                "noise_vel_mps": {"type": "number", "minimum": 0},
            },
        },
        "boundary": {
            "type": "object",
            "required": ["mu_i", "sigma_i_diag", "sigma_f_diag"],
            "additionalProperties": False,
            "properties": {
                "mu_i": _vec(6),
                "sigma_i_diag": _vec(6),
                "sigma_f_diag": _vec(6),
                "mu_f": {"oneOf": [_vec(6), {"type": "null"}]},
            },
        },
        "weights": {
            "type": "object",
            "required": ["q_diag", "r_diag", "qbar_diag", "rbar_diag"],
            "additionalProperties": False,
            "properties": {
                "q_diag": _vec(6),
                "r_diag": _vec(3),
                "qbar_diag": _vec(6),
                "rbar_diag": _vec(3),
            },
        },
        "terminal_mean": {"enum": ["free", "equality"]},
        "waypoints": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["step", "position_m"],
                "additionalProperties": False,
                "properties": {
                    "step": {"type": "integer", "minimum": 0},
                    "position_m": _vec(3),
                },
            },
        },
        "covariance_bounds": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["target", "cap_diag", "window"],
                "additionalProperties": False,
                "properties": {
                    "target": {"enum": ["state", "input"]},
                    "cap_diag": {"type": "array", "items": {"type": "number"}},
                    "window": _WINDOW,
                    "label": {"type": "string"},
                },
            },
        },
        "chance_constraints": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["target", "alpha", "bound", "delta"],
                "additionalProperties": False,
                "properties": {
                    "target": {"enum": ["state", "input"]},
                    "alpha": {"type": "array", "items": {"type": "number"}},
                    "bound": {"type": "number"},
                    "bound_final": {"type": "number"},
                    "shrink_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                    "delta": {"type": "number", "exclusiveMinimum": 0.5, "exclusiveMaximum": 1},
                    "window": _WINDOW,
                    "label": {"type": "string"},
                    "surrogate": {
                        "type": "object",
                        "required": ["ell", "beta"],
                        "additionalProperties": False,
                        "properties": {
                            "ell": {"type": "array", "items": {"type": "number"}},
                            "beta": {"type": "number"},
                        },
                    },
                },
            },
        },
        "wind": {
            "type": "object",
            "required": ["mean_mps", "turbulence_std_mps"],
            "additionalProperties": False,
            "properties": {
                "mean_mps": _vec(3),
                "turbulence_std_mps": _vec(3),
                "correlation_time_s": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "aero": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "truth": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "linear_diag": _vec(3),
                        "quadratic_diag": _vec(3),
                        "attitude_gain": {"type": "number"},
                        "rpm_gain": {"type": "number"},
                    },
                },
                "train": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "epochs": {"type": "integer", "minimum": 1},
                        "lr": {"type": "number", "exclusiveMinimum": 0},
                        "tikhonov_lambda": {"type": "number", "minimum": 0},
                        "seed": {"type": "integer"},
                        "noise_std_n": {"type": "number", "minimum": 0},
                    },
                },
            },
        },
        "sim": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mass_kg": {"type": "number", "exclusiveMinimum": 0},
                "max_thrust_n": {"type": "number", "exclusiveMinimum": 0},
                "attitude_tau_s": {"type": "number", "minimum": 0},
                "thrust_tau_s": {"type": "number", "minimum": 0},
                "dt_sim_s": {"type": "number", "exclusiveMinimum": 0},
                "accel_noise_std_mps2": {"type": "number", "minimum": 0},
                "rpm_noise_frac": {"type": "number", "minimum": 0},
                "pos_noise_std_m": {"type": "number", "minimum": 0},
            },
        },
        "lqr_baseline": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"q_diag": _vec(6), "r_diag": _vec(3)},
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "feas_tol": {"type": "number", "exclusiveMinimum": 0},
                "lmi_margin": {"type": "number", "minimum": 0},
                "relinearize_rounds": {"type": "integer", "minimum": 0, "maximum": 5},
            },
        },
        "seeds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"experiment": {"type": "integer"}},
        },
    },
}

_DEFAULTS = {
    "terminal_mean": "free",
    "waypoints": [],
    "covariance_bounds": [],
    "chance_constraints": [],
    "wind": {"mean_mps": [0.0, 0.0, 0.0], "turbulence_std_mps": [0.0, 0.0, 0.0],
             "correlation_time_s": 1.0},
    "aero": {
        "truth": {"linear_diag": [0.30, 0.30, 0.50],
                  "quadratic_diag": [0.020, 0.020, 0.030],
                  "attitude_gain": 0.15, "rpm_gain": 0.10},
        "train": {"epochs": 1500, "lr": 1.0e-3, "tikhonov_lambda": 1.0e-4,
                  "seed": 11, "noise_std_n": 0.02},
    },
    "sim": {"mass_kg": 0.680, "max_thrust_n": 39.0, "attitude_tau_s": 0.060,
            "thrust_tau_s": 0.025, "dt_sim_s": 0.001,
            "accel_noise_std_mps2": 0.2, "rpm_noise_frac": 0.01,
            "pos_noise_std_m": 0.002},
    "lqr_baseline": {"q_diag": [6400.0] * 3 + [640.0] * 3, "r_diag": [1.0] * 3},
    "solver": {"feas_tol": 1.0e-8, "lmi_margin": 1.0e-5, "relinearize_rounds": 0},
    "seeds": {"experiment": 0},
}


def _merge_defaults(data: dict, defaults: dict) -> dict:
    out = dict(data)
    for key, val in defaults.items():
        if key not in out:
            out[key] = val
        elif isinstance(val, dict) and isinstance(out[key], dict):
            out[key] = _merge_defaults(out[key], val)
    return out


def available_scenarios() -> list[str]:
    """Names of the scenario files shipped with the package."""
    root = importlib.resources.files("quadsteer") / "scenarios"
    return sorted(p.name[: -len(".yaml")] for p in root.iterdir() if p.name.endswith(".yaml"))


@dataclass
class ScenarioConfig:
    """Validated, defaults-applied scenario description."""

    raw: dict

    def __post_init__(self):
        try:
            jsonschema.validate(self.raw, SCHEMA)
        except jsonschema.ValidationError as exc:
            path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config field {path}: {exc.message}") from None
        self.raw = _merge_defaults(self.raw, _DEFAULTS)
        N = self.raw["system"]["steps"]
        for wp in self.raw["waypoints"]:
            if wp["step"] > N:
                raise ConfigError(f"waypoint step {wp['step']} outside horizon 0..{N}")
        for entry in self.raw["covariance_bounds"] + self.raw["chance_constraints"]:
            k0, k1 = entry.get("window", (0, -1))
            k1 = N + 1 + k1 if k1 < 0 else k1
            if not 0 <= k0 <= k1 <= N:
                raise ConfigError(f"window {entry.get('window')} outside horizon 0..{N}")

    # -- loading / saving ---------------------------------------------------

    @classmethod
    def load(cls, source) -> "ScenarioConfig":
        """Load from a path, or from a shipped scenario name (no extension)."""
        path = Path(source)
        if not path.exists() and path.suffix == "":
            resource = importlib.resources.files("quadsteer") / "scenarios" / f"{source}.yaml"
            if not resource.is_file():
                raise ConfigError(
                    f"unknown scenario {source!r}; shipped: {available_scenarios()}"
                )
            data = yaml.safe_load(resource.read_text())
        else:
            if not path.exists():
                raise ConfigError(f"scenario file not found: {path}")
            with open(path) as fh:
                data = yaml.safe_load(fh)
        if not isinstance(data, dict):
            raise ConfigError("scenario file must contain a mapping")
        return cls(raw=data)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.raw, fh, sort_keys=True)

    @property
    def name(self) -> str:
        return self.raw["name"]

    @property
    def N(self) -> int:
        return int(self.raw["system"]["steps"])

    @property
    def dt(self) -> float:
        return float(self.raw["system"]["dt_s"])

    # -- planner inputs -----------------------------------------------------

    def build_system(self):
        s = self.raw["system"]
        return build_double_integrator(
            dt=s["dt_s"], process_noise_pos=s["noise_pos_m"],
            process_noise_vel=s["noise_vel_mps"], N=s["steps"],
        )

    def build_boundary(self) -> GaussianBoundary:
        b = self.raw["boundary"]
        return GaussianBoundary(
            mu_i=np.array(b["mu_i"], dtype=float),
            Sigma_i=np.diag(b["sigma_i_diag"]),
            Sigma_f=np.diag(b["sigma_f_diag"]),
            mu_f=None if b.get("mu_f") is None else np.array(b["mu_f"], dtype=float),
        )

    def build_weights(self) -> CostWeights:
        w = self.raw["weights"]
        return CostWeights.constant(
            np.diag(w["q_diag"]), np.diag(w["r_diag"]),
            np.diag(w["qbar_diag"]), np.diag(w["rbar_diag"]), self.N,
        )

    def _expand_chance(self) -> list:
        N = self.N
        out = []
        for i, entry in enumerate(self.raw["chance_constraints"]):
            label = entry.get("label", f"chance_{i}")
            window = tuple(entry.get("window", (0, -1)))
            alpha = np.array(entry["alpha"], dtype=float)
            delta = float(entry["delta"])
            bound = float(entry["bound"])
            if "surrogate" in entry:
                out.append(LinearizedSurrogate(
                    ell=np.array(entry["surrogate"]["ell"], dtype=float),
                    alpha=alpha, beta=float(entry["surrogate"]["beta"]),
                    target=entry["target"], window=window, delta=delta,
                    bound=bound, label=label,
                ))
                continue
            if "bound_final" in entry:
                frac = float(entry.get("shrink_fraction", 0.4))
                k_hi = N - 1 if entry["target"] == "input" else N
                k0 = int(np.ceil((1.0 - frac) * k_hi))
                if k0 > 0:
                    out.append(AffineChanceConstraint(
                        alpha=alpha, bound=bound, delta=delta,
                        target=entry["target"], window=(window[0], k0 - 1),
                        label=f"{label}_hold",
                    ))
                b_final = float(entry["bound_final"])
                for k in range(k0, k_hi + 1):
                    bk = bound + (b_final - bound) * (k - k0) / max(k_hi - k0, 1)
                    out.append(AffineChanceConstraint(
                        alpha=alpha, bound=bk, delta=delta,
                        target=entry["target"], window=(k, k),
                        label=f"{label}_k{k}",
                    ))
            else:
                out.append(AffineChanceConstraint(
                    alpha=alpha, bound=bound, delta=delta,
                    target=entry["target"], window=window, label=label,
                ))
        return out

    def build_problem(self) -> CovSteerProblem:
        sys = self.build_system()
        P3 = np.hstack([np.eye(3), np.zeros((3, 3))])
        waypoints = tuple(
            Waypoint(step=wp["step"], selector=P3, target=np.array(wp["position_m"]))
            for wp in self.raw["waypoints"]
        )
        bounds = []
        for i, entry in enumerate(self.raw["covariance_bounds"]):
            cap = np.diag(np.array(entry["cap_diag"], dtype=float))
            window = tuple(entry["window"])
            if entry["target"] == "state":
                if cap.shape[0] != 3:
                    raise ConfigError("state covariance bound cap_diag must have 3 entries"
                                      " (position block)")
                L = np.vstack([np.eye(3), np.zeros((3, 3))])
                bounds.append(PartialCovarianceBound(
                    cap=cap, L=L, window=window, target="state",
                    label=entry.get("label", f"cov_bound_{i}")))
            else:
                bounds.append(PartialCovarianceBound(
                    cap=cap, window=window, target="input",
                    label=entry.get("label", f"input_bound_{i}")))
        return CovSteerProblem(
            sys=sys,
            boundary=self.build_boundary(),
            weights=self.build_weights(),
            chance=tuple(self._expand_chance()),
            cov_bounds=tuple(bounds),
            waypoints=waypoints,
            terminal_mean_mode=self.raw["terminal_mean"],
        )

    # -- simulation inputs ---------------------------------------------------

    def build_wind(self) -> WindField:
        w = self.raw["wind"]
        return WindField(
            mean=np.array(w["mean_mps"], dtype=float),
            turbulence_std=np.array(w["turbulence_std_mps"], dtype=float),
            correlation_time_s=float(w.get("correlation_time_s", 1.0)),
        )

    def sim_params(self) -> SimParams:
        s = self.raw["sim"]
        return SimParams(
            mass=s["mass_kg"], max_thrust=s["max_thrust_n"],
            tau_att=s["attitude_tau_s"], tau_thrust=s["thrust_tau_s"],
            dt_sim=s["dt_sim_s"], accel_noise_std=s["accel_noise_std_mps2"],
            rpm_noise_frac=s["rpm_noise_frac"], pos_noise_std=s["pos_noise_std_m"],
        )

    def truth_aero(self) -> GroundTruthAero:
        t = self.raw["aero"]["truth"]
        return GroundTruthAero(
            linear_coeffs=np.array(t["linear_diag"], dtype=float),
            quadratic_coeffs=np.array(t["quadratic_diag"], dtype=float),
            attitude_gain=float(t["attitude_gain"]),
            rpm_gain=float(t["rpm_gain"]),
        )

    def train_config(self) -> TrainConfig:
        t = self.raw["aero"]["train"]
        return TrainConfig(
            epochs=int(t["epochs"]), lr=float(t["lr"]),
            tikhonov_lambda=float(t["tikhonov_lambda"]), seed=int(t["seed"]),
        )

    @property
    def train_noise_std(self) -> float:
        return float(self.raw["aero"]["train"]["noise_std_n"])

    @property
    def solver_options(self) -> dict:
        return dict(self.raw["solver"])

    @property
    def lqr_weights(self) -> tuple[tuple, tuple]:
        lq = self.raw["lqr_baseline"]
        return tuple(lq["q_diag"]), tuple(lq["r_diag"])

    @property
    def experiment_seed(self) -> int:
        return int(self.raw["seeds"]["experiment"])

"""Shared fixtures. The scenario solves and the drag-model training are
expensive, so they are session-scoped and shared between the unit tests and
the acceptance suite."""

import numpy as np
import pytest

from quadsteer.aero import generate_synthetic_flights, train
from quadsteer.covsteer import solve_problem
from quadsteer.scenarios import ScenarioConfig


def _solve(cfg):
    opts = cfg.solver_options
    result = solve_problem(
        cfg.build_problem(),
        feas_tol=opts["feas_tol"],
        lmi_margin=opts["lmi_margin"],
        relinearize_rounds=opts["relinearize_rounds"],
    )
    assert result.ok, f"scenario {cfg.name} failed to solve: {result.status}"
    return result


@pytest.fixture(scope="session")
def figure8_cfg():
    return ScenarioConfig.load("figure8")


@pytest.fixture(scope="session")
def landing_cfg():
    return ScenarioConfig.load("landing")


@pytest.fixture(scope="session")
def minimal_cfg():
    return ScenarioConfig.load("minimal")


@pytest.fixture(scope="session")
def figure8_result(figure8_cfg):
    return _solve(figure8_cfg)


@pytest.fixture(scope="session")
def landing_result(landing_cfg):
    return _solve(landing_cfg)


@pytest.fixture(scope="session")
def minimal_result(minimal_cfg):
    return _solve(minimal_cfg)


@pytest.fixture(scope="session")
def trained_drag(figure8_cfg):
    """Hybrid drag model trained on the shared synthetic campaign."""
    truth = figure8_cfg.truth_aero()
    dataset = generate_synthetic_flights(
        truth, noise_std=figure8_cfg.train_noise_std,
        seed=figure8_cfg.train_config().seed,
    )
    return train(dataset, figure8_cfg.train_config())

import json

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from quadsteer.chance import AffineChanceConstraint, LinearizedSurrogate
from quadsteer.cli import main
from quadsteer.scenarios import ConfigError, ScenarioConfig, available_scenarios


def test_shipped_scenarios_load_and_build():
    names = available_scenarios()
    assert {"figure8", "landing", "minimal"} <= set(names)
    for name in names:
        cfg = ScenarioConfig.load(name)
        problem = cfg.build_problem()
        assert problem.sys.N == cfg.N
        cfg.build_wind()
        cfg.sim_params()
        cfg.truth_aero()


def test_config_roundtrip_identity(tmp_path):
    cfg = ScenarioConfig.load("figure8")
    path = tmp_path / "fig8.yaml"
    cfg.save(path)
    cfg2 = ScenarioConfig.load(path)
    assert cfg2.raw == cfg.raw
    cfg2.save(tmp_path / "fig8b.yaml")
    assert yaml.safe_load((tmp_path / "fig8b.yaml").read_text()) == cfg2.raw


def test_schema_error_names_field(tmp_path):
    cfg = ScenarioConfig.load("minimal")
    bad = dict(cfg.raw)
    bad["system"] = dict(bad["system"], dt_s=-0.1)
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(bad))
    with pytest.raises(ConfigError, match="system.dt_s"):
        ScenarioConfig.load(path)


def test_unknown_key_rejected(tmp_path):
    cfg = ScenarioConfig.load("minimal")
    bad = dict(cfg.raw, not_a_key=1)
    path = tmp_path / "bad2.yaml"
    path.write_text(yaml.safe_dump(bad))
    with pytest.raises(ConfigError):
        ScenarioConfig.load(path)


def test_window_outside_horizon_rejected(tmp_path):
    cfg = ScenarioConfig.load("minimal")
    bad = dict(cfg.raw)
    bad["covariance_bounds"] = [
        {"target": "input", "cap_diag": [1.0, 1.0, 1.0], "window": [0, 99]}
    ]
    path = tmp_path / "bad3.yaml"
    path.write_text(yaml.safe_dump(bad))
    with pytest.raises(ConfigError, match="window"):
        ScenarioConfig.load(path)


def test_unknown_scenario_name():
    with pytest.raises(ConfigError, match="unknown scenario"):
        ScenarioConfig.load("does_not_exist")


def test_landing_chance_expansion():
    cfg = ScenarioConfig.load("landing")
    problem = cfg.build_problem()
    surro = [c for c in problem.chance if isinstance(c, LinearizedSurrogate)]
    raw = [c for c in problem.chance if isinstance(c, AffineChanceConstraint)]
    assert len(surro) == 4  # cone faces ship pre-linearized
    # shrinking authority: a hold window plus one constraint per shrink step
    N = cfg.N
    k0 = int(np.ceil(0.6 * (N - 1)))
    per_face = 1 + (N - 1 - k0 + 1)
    assert len(raw) == 4 * per_face
    hold = [c for c in raw if c.label.endswith("_hold")]
    assert len(hold) == 4 and all(c.window == (0, k0 - 1) for c in hold)
    finals = [c for c in raw if c.label.endswith(f"_k{N-1}")]
    assert all(c.bound == pytest.approx(3.0) for c in finals)


def test_table_fidelity_of_landing_faces():
    """The shipped cone-face surrogate data reproduces the published
    constants verbatim."""
    cfg = ScenarioConfig.load("landing")
    faces = {e["label"]: e for e in cfg.raw["chance_constraints"] if "surrogate" in e}
    assert faces["cone_face_1"]["surrogate"]["ell"][:3] == [10.46, 0.0, 3.10]
    assert faces["cone_face_1"]["alpha"][:3] == [3.33, 0.0, 1.0]
    assert faces["cone_face_4"]["surrogate"]["ell"][:3] == [0.0, -10.46, 3.10]
    assert faces["cone_face_4"]["alpha"][:3] == [0.0, -3.33, 1.0]
    assert all(e["surrogate"]["beta"] == 0.5 for e in faces.values())


# ---------------------------------------------------------------------------
# CLI


@pytest.fixture()
def runner():
    return CliRunner()


def test_cli_scenarios(runner):
    result = runner.invoke(main, ["scenarios"])
    assert result.exit_code == 0
    assert "figure8" in result.output and "landing" in result.output


def test_cli_solve_minimal(runner, tmp_path):
    out = tmp_path / "solve"
    result = runner.invoke(main, ["solve", "minimal", "-o", str(out)])
    assert result.exit_code == 0, result.output
    assert (out / "solution.npz").exists()
    assert (out / "validation.json").exists()
    assert (out / "trajectory_xy.png").exists()
    assert (out / "moments.csv").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["scenario"] == "minimal"
    validation = json.loads((out / "validation.json").read_text())
    assert validation["passed"] is True


def test_cli_solve_dump_program(runner, tmp_path):
    out = tmp_path / "solve"
    prog = tmp_path / "prog.txt"
    result = runner.invoke(main, ["solve", "minimal", "-o", str(out),
                                  "--dump-program", str(prog)])
    assert result.exit_code == 0, result.output
    text = prog.read_text()
    assert text.splitlines()[1] == "VER 1"
    assert "CONES" in text and "Sigma_0 sym 6" in text


def test_cli_solve_bad_config_exit_2(runner, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: x\nsystem:\n  dt_s: -1\n")
    result = runner.invoke(main, ["solve", str(bad), "-o", str(tmp_path / "o")])
    assert result.exit_code == 2
    assert "system" in result.output or "required" in result.output


def test_cli_solve_infeasible_exit_3(runner, tmp_path):
    cfg = ScenarioConfig.load("minimal")
    bad = dict(cfg.raw)
    bad["boundary"] = dict(bad["boundary"], sigma_f_diag=[1e-9] * 6)
    path = tmp_path / "infeasible.yaml"
    path.write_text(yaml.safe_dump(bad))
    result = runner.invoke(main, ["solve", str(path), "-o", str(tmp_path / "o")])
    assert result.exit_code == 3
    assert "infeasible" in result.output


def test_cli_run_minimal(runner, tmp_path):
    out = tmp_path / "run"
    result = runner.invoke(
        main, ["run", "minimal", "--controller", "ocs", "--estimator", "ekf",
               "-M", "3", "--seed", "1", "-o", str(out)],
    )
    assert result.exit_code == 0, result.output
    assert (out / "report.csv").exists()
    assert (out / "report.json").exists()
    assert (out / "trace_0.csv").exists()
    rows = (out / "report.csv").read_text().strip().splitlines()
    assert len(rows) == 2
    assert rows[1].startswith("minimal,ocs,ekf,3,1")
    # second invocation reuses the cached solution and drag model
    result2 = runner.invoke(
        main, ["run", "minimal", "--estimator", "lp", "-M", "2", "-o", str(out)],
    )
    assert result2.exit_code == 0, result2.output
    assert "reusing cached solution" in result2.output


def test_cli_run_zero_rollouts_exit_2(runner, tmp_path):
    result = runner.invoke(main, ["run", "minimal", "-M", "0", "-o", str(tmp_path)])
    assert result.exit_code == 2


def test_cli_train_synthetic(runner, tmp_path):
    out = tmp_path / "model.npz"
    result = runner.invoke(
        main, ["train", "--synthetic", "quadratic", "--epochs", "120",
               "-o", str(out), "--seed", "2"],
    )
    assert result.exit_code == 0, result.output
    assert out.exists()
    assert "hybrid validation MSE" in result.output


def test_cli_train_requires_one_source(runner):
    result = runner.invoke(main, ["train"])
    assert result.exit_code == 2

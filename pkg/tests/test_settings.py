import logging

import pytest

from mfbdsde.infra import settings
from mfbdsde.infra.settings import build_config, flatten_sections, load_config, output_path
from mfbdsde.model.errors import InvalidArgumentError


EXPERIMENT = """
command = "solve"
preset = "linear-mean"

[grid]
horizon = 2.0
n_steps = 32

[particles]
m_outer = 4
k_inner = 128
seed = 7

[solver]
basis_degree = 2
estimator = "pooled"

[coefficients]
theta_g = "0.1*z"

[output]
format = "csv"
"""


def test_load_sectioned_toml(tmp_path):
    path = tmp_path / "experiment.toml"
    path.write_text(EXPERIMENT)
    config = load_config(str(path))
    assert (config.preset, config.horizon, config.n_steps) == ("linear-mean", 2.0, 32)
    assert (config.m_outer, config.k_inner, config.seed) == (4, 128, 7)
    assert config.solver.basis_degree == 2 and config.solver.estimator == "pooled"
    assert config.coefficients == {"theta_g": "0.1*z"}
    assert config.format == "csv"


def test_overrides_win(tmp_path):
    path = tmp_path / "experiment.toml"
    path.write_text(EXPERIMENT)
    config = load_config(str(path), {"n_steps": 8, "seed": 1})
    assert (config.n_steps, config.seed, config.horizon) == (8, 1, 2.0)


@pytest.mark.parametrize(
    "text",
    [
        "n_steps = [",
        "[grid]\nhorizon = 1.0\nsteps = 4\n",
        "[plotting]\ncolor = 1\n",
        "n_steps = 0\n",
        "unknown_field = 1\n",
    ],
)
def test_bad_files(tmp_path, text):
    path = tmp_path / "bad.toml"
    path.write_text(text)
    with pytest.raises(InvalidArgumentError):
        load_config(str(path))


def test_missing_file(tmp_path):
    with pytest.raises(InvalidArgumentError):
        load_config(str(tmp_path / "missing.toml"))


def test_flatten_sections():
    flat = flatten_sections({"preset": "constant", "tolerances": {"picard_tol": 1e-6}, "lq": {"C1": 1.0}})
    assert flat == {"preset": "constant", "picard_tol": 1e-6, "lq": {"C1": 1.0}}


def test_build_config_errors_are_invalid_arguments():
    with pytest.raises(InvalidArgumentError) as info:
        build_config({"estimator": "grouped"})
    assert info.value.exit_code == 2


def test_output_path(monkeypatch, tmp_path):
    monkeypatch.setattr(settings, "OUTPUT_DIR", str(tmp_path))
    assert output_path("result.json") == tmp_path / "result.json"
    assert output_path("/abs/result.json").as_posix() == "/abs/result.json"


def test_env_settings_are_validated():
    env = settings.read_env({"MFBDSDE_THREADS": "4", "MFBDSDE_OUTPUT_DIR": "/tmp/runs"})
    assert env.threads == 4
    assert env.output_dir == "/tmp/runs"
    assert settings.read_env({}).threads == 1


@pytest.mark.parametrize("value", ["abc", "0", "-2", "1.5"])
def test_invalid_thread_count_falls_back(value, caplog):
    with caplog.at_level(logging.WARNING):
        env = settings.read_env({"MFBDSDE_THREADS": value, "MFBDSDE_LOG_LEVEL": "DEBUG"})
    assert env.threads == 1
    assert env.log_level == "DEBUG"
    assert "MFBDSDE_THREADS" in caplog.text

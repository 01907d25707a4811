import orjson
import pytest
from click.testing import CliRunner

from mfbdsde.cli import main, parse_assignments, parse_particles
from mfbdsde.infra.output import load_result
from mfbdsde.model.errors import InvalidArgumentError


SOLVE = ["solve", "--preset", "constant", "--steps", "8", "--particles", "2x16"]


@pytest.fixture
def runner():
    return CliRunner()


def test_presets_lists_every_name(runner):
    result = runner.invoke(main, ["presets"])
    assert result.exit_code == 0
    names = [line.split()[0] for line in result.stdout.splitlines()]
    assert names == [
        "constant", "martingale", "backward-driver", "linear-mean", "mkv-linear", "spde-basic",
        "control-linear", "lq-basic",
    ]


def test_solve_prints_the_record(runner):
    result = runner.invoke(main, SOLVE)
    assert result.exit_code == 0, result.stderr
    record = orjson.loads(result.stdout)
    assert record["command"] == "solve"
    assert record["config"]["n_steps"] == 8
    assert (record["config"]["m_outer"], record["config"]["k_inner"]) == (2, 16)
    assert record["scalars"]["Y0"]["value"] == pytest.approx(1.0, abs=1e-10)


@pytest.mark.parametrize("fmt", ["json", "csv"])
def test_solve_writes_files(runner, tmp_path, fmt):
    path = tmp_path / f"result.{fmt}"
    result = runner.invoke(main, SOLVE + ["--out", str(path), "--format", fmt])
    assert result.exit_code == 0, result.stderr
    assert result.stdout.strip() == str(path)
    loaded = load_result(path)
    if fmt == "json":
        assert loaded.scalars["Y0"].value == pytest.approx(1.0, abs=1e-10)
    else:
        assert [row["t"] for row in loaded] == pytest.approx([k / 8 for k in range(9)])


def test_coefficient_overrides(runner):
    result = runner.invoke(main, SOLVE + ["--coef", "xi=2"])
    assert result.exit_code == 0, result.stderr
    assert orjson.loads(result.stdout)["scalars"]["Y0"]["value"] == pytest.approx(2.0, abs=1e-10)


def test_config_file_with_flag_overrides(runner, tmp_path):
    path = tmp_path / "experiment.toml"
    path.write_text('preset = "constant"\n[grid]\nn_steps = 4\n[particles]\nm_outer = 2\nk_inner = 8\n')
    result = runner.invoke(main, ["solve", "--config", str(path), "--steps", "6"])
    assert result.exit_code == 0, result.stderr
    config = orjson.loads(result.stdout)["config"]
    assert (config["n_steps"], config["k_inner"]) == (6, 8)


@pytest.mark.parametrize(
    "args",
    [
        ["solve", "--preset", "nope"],
        ["solve", "--preset", "constant", "--particles", "2by16"],
        ["solve", "--preset", "constant", "--coef", "theta_f"],
        ["solve", "--coef", "theta_f=y +", "--steps", "4"],
        ["solve", "--coef", "theta_f=" + "(" * 2000 + "y" + ")" * 2000, "--steps", "4"],
    ],
)
def test_config_errors_exit_2_with_json(runner, args):
    result = runner.invoke(main, args)
    assert result.exit_code == 2
    error = orjson.loads(result.stderr.strip().splitlines()[-1])
    assert error["error"] == "config"
    assert error["detail"]


def test_threads_from_environment(runner):
    result = runner.invoke(main, SOLVE, env={"MFBDSDE_THREADS": "2"})
    assert result.exit_code == 0, result.stderr
    assert orjson.loads(result.stdout)["config"]["threads"] == 2


def test_parse_helpers():
    assert parse_particles("8x1024") == (8, 1024)
    assert parse_particles(None) is None
    assert parse_assignments(("xi = 1", "theta_f=0.5*y"), "--coef") == {"xi": "1", "theta_f": "0.5*y"}
    with pytest.raises(InvalidArgumentError):
        parse_particles("8x")
    with pytest.raises(InvalidArgumentError):
        parse_assignments(("=1",), "--coef")

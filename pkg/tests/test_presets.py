import logging
import math

import pytest

from mfbdsde.model.errors import ContractionConditionError, InvalidArgumentError
from mfbdsde.model.schemas import ExperimentConfig, LipschitzMeta
from mfbdsde.services.dsl import parse
from mfbdsde.services.presets import (
    build_coefficients, get_preset, infer_lipschitz, list_presets, lq_coefficients, oracle_value, parse_terminal,
    problem_kind, with_preset_defaults,
)


def test_preset_catalogue():
    infos = {info.name: info for info in list_presets()}
    assert set(infos) == {
        "constant", "martingale", "backward-driver", "linear-mean", "mkv-linear", "spde-basic",
        "control-linear", "lq-basic",
    }
    assert infos["constant"].oracle == 1.0
    assert infos["linear-mean"].oracle == pytest.approx(math.e)
    assert infos["mkv-linear"].oracle == pytest.approx(math.exp(0.5))
    assert infos["spde-basic"].oracle == pytest.approx(0.3)
    assert infos["lq-basic"].oracle == pytest.approx(0.25)
    assert infos["control-linear"].oracle is None
    assert infos["lq-basic"].coefficients["C1"] == "1.0"


def test_unknown_preset():
    with pytest.raises(InvalidArgumentError) as info:
        get_preset("nope")
    assert "constant" in info.value.message


def test_oracles_follow_the_config():
    assert oracle_value(ExperimentConfig(preset="linear-mean", horizon=2.0)) == pytest.approx(math.exp(2.0))
    assert oracle_value(ExperimentConfig(preset="mkv-linear", x0=2.0)) == pytest.approx(2 * math.exp(0.5))
    assert oracle_value(ExperimentConfig(coefficients={"theta_f": "y"})) is None


def test_preset_defaults_fill_unset_fields_only():
    config = with_preset_defaults(ExperimentConfig(preset="spde-basic", query_x=0.9))
    assert config.query_x == 0.9
    assert config.query_t == 0.5
    assert config.command == "solve"
    assert with_preset_defaults(ExperimentConfig()) == ExperimentConfig()


def test_parse_terminal():
    assert parse_terminal("W_T").kind == "w_terminal"
    assert parse_terminal(" 2 ").value == 2.0
    assert parse_terminal("-1.5").value == -1.5
    mode = parse_terminal("x^2")
    assert mode.kind == "expression" and mode.expr == parse("x^2")
    with pytest.raises(InvalidArgumentError):
        parse_terminal("y + 1")


def test_infer_lipschitz():
    meta = infer_lipschitz(parse("0.5*y + 0.5*yp"), parse("0.3*z + 0.2*yp"))
    assert (meta.L_y, meta.L_yp, meta.K_yp) == (0.5, 0.5, 0.2)
    assert meta.alpha3 == pytest.approx(0.09)
    assert meta.alpha2 == 1.0 and meta.L_gamma == 1.0

    timed = infer_lipschitz(parse("exp(-t)*y"), parse("0"), horizon=2.0)
    assert timed.L_y == pytest.approx(1.0)

    with pytest.raises(ContractionConditionError):
        infer_lipschitz(parse("y^2"), parse("0"))


def test_unbounded_partials_only_warn_without_enforcement(caplog):
    config = ExperimentConfig(coefficients={"theta_f": "y^2", "xi": "1"}, enforce_h1=False)
    with caplog.at_level(logging.WARNING):
        coeffs = build_coefficients(config)
    assert coeffs.lipschitz == LipschitzMeta()
    assert "cannot bound" in caplog.text
    with pytest.raises(ContractionConditionError):
        build_coefficients(config.model_copy(update={"enforce_h1": True}))


def test_inline_overrides_replace_preset_slots():
    coeffs = build_coefficients(ExperimentConfig(preset="linear-mean", coefficients={"theta_f": "0.2*y"}))
    assert coeffs.theta_f == parse("0.2*y")
    assert coeffs.xi_mode.value == 1.0


def test_unknown_slot_rejected():
    with pytest.raises(InvalidArgumentError):
        build_coefficients(ExperimentConfig(coefficients={"theta_k": "1"}))


@pytest.mark.parametrize(
    "config, kind",
    [
        (ExperimentConfig(preset="mkv-linear"), "mkv"),
        (ExperimentConfig(coefficients={"b": "0", "sigma": "1"}), "mkv"),
        (ExperimentConfig(coefficients={"theta_f": "0.5*y + v"}), "control"),
        (ExperimentConfig(coefficients={"theta_f": "y", "l": "y^2"}), "control"),
        (ExperimentConfig(coefficients={"theta_f": "y"}), "bdsde"),
        (ExperimentConfig(lq={"C1": 1.0}), "lq"),
    ],
)
def test_problem_kind(config, kind):
    assert problem_kind(config) == kind


def test_lq_coefficients_merge():
    c = lq_coefficients(ExperimentConfig(preset="lq-basic", lq={"xi": 2.0, "M1": "t"}, u_box=(-1.0, 1.0)))
    assert (c.C1, c.R1, c.Q1_0) == (1.0, 1.0, 1.0)
    assert c.xi == 2.0 and c.M1 == "t"
    assert (c.u_lo, c.u_hi) == (-1.0, 1.0)

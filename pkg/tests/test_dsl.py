import math

import numpy as np
import pytest

from mfbdsde.model.errors import InvalidArgumentError, NumericDomainError, ParseError, UnboundVariableError
from mfbdsde.model.expr import Add, Call, Mul, Neg, Num, Pow, Sub, Var, free_vars
from mfbdsde.services.dsl import diff, evaluate, mul, parse, power, separate, swap_primes, to_source, tokenize


EXPRESSIONS = [
    "y + 2*zp",
    "-y^2",
    "exp(-t)*(y - yp)",
    "tanh(y + yp)",
    "0.5*y*z - 0.25*yp/(1 + zp^2)",
    "sin(x)*cos(xp) + sqrt(1 + y^2)",
    "abs(y - 3)*v^3",
    "(y - z) - (yp - zp)",
    "y*-z",
    "(-y)^2 + --z",
    "0.001*t + 1e-20",
]

POINT = {"t": 0.3, "x": 0.7, "xp": -0.4, "y": 0.6, "z": 0.25, "yp": -0.8, "zp": 0.45, "v": 0.9, "vp": 0.35}


def test_parse_trees():
    assert parse("y + 2*zp") == Add(Var("y"), Mul(Num(2.0), Var("zp")))
    assert parse("-y^2") == Neg(Pow(Var("y"), 2))
    assert parse("exp(-t)*(y - yp)") == Mul(Call("exp", Neg(Var("t"))), Sub(Var("y"), Var("yp")))
    assert parse("2^3^2") == Pow(Num(2.0), 9)


def test_binary_operators_are_left_associative():
    assert parse("y - z - yp") == Sub(Sub(Var("y"), Var("z")), Var("yp"))
    assert evaluate(parse("8 / 4 / 2"), {}) == 1.0


@pytest.mark.parametrize(
    "source, offset",
    [
        ("y + w", 4),
        ("(y + z", 0),
        ("y + z)", 5),
        ("y^1.5", 2),
        ("", 0),
        ("y + é", 4),
        ("2 * é + é", 4),
        ("exp y", 4),
    ],
)
def test_parse_error_offsets(source, offset):
    with pytest.raises(ParseError) as info:
        parse(source)
    assert info.value.offset == offset


@pytest.mark.parametrize(
    "source",
    [
        "(" * 2000 + "y" + ")" * 2000,
        "-" * 5000 + "y",
        "y" + "+y" * 3000,
        "exp(" * 500 + "y" + ")" * 500,
    ],
)
def test_deep_input_is_a_parse_error(source):
    with pytest.raises(ParseError) as info:
        parse(source)
    assert "nested too deeply" in info.value.message
    assert 0 <= info.value.offset < len(source)


def test_moderate_nesting_parses():
    assert parse("(" * 50 + "y" + ")" * 50) == Var("y")
    assert evaluate(parse("-" * 21 + "y"), {"y": 2.0}) == -2.0
    assert parse("y" + "^1" * 3000) == Pow(Var("y"), 1)


def test_out_of_range_literal():
    with pytest.raises(ParseError) as info:
        parse("y + 1e999")
    assert info.value.offset == 4


def test_overflowing_constants_are_not_folded():
    tree = mul(Num(1e300), Num(1e300))
    assert tree == Mul(Num(1e300), Num(1e300))
    assert parse(to_source(tree)) == tree
    assert power(Num(1e200), 2) == Pow(Num(1e200), 2)


def test_offsets_count_utf8_bytes():
    tokens = tokenize("y +  z")
    assert [t.offset for t in tokens] == [0, 2, 5, 6]
    with pytest.raises(ParseError) as info:
        parse("é + y")
    assert info.value.offset == 0


def test_evaluate_scalars():
    assert evaluate(parse("y + 2*zp"), {"y": 1.0, "zp": 3.0}) == 7.0
    assert evaluate(parse("exp(-t)*(y - yp)"), {"t": 0.0, "y": 2.0, "yp": 1.0}) == 1.0
    assert evaluate(parse("tanh(y)"), {"y": 0.5}) == pytest.approx(0.46211715726, abs=1e-10)
    assert evaluate(parse("sign(y)"), {"y": -2.0}) == -1.0


def test_evaluate_broadcasts_arrays():
    y = np.linspace(-1, 1, 11)
    out = evaluate(parse("y^2 + yp"), {"y": y, "yp": 2.0})
    np.testing.assert_allclose(out, y ** 2 + 2.0)
    assert out.shape == (11,)


def test_evaluate_domain_errors():
    with pytest.raises(NumericDomainError):
        evaluate(parse("sqrt(y)"), {"y": -1.0})
    with pytest.raises(NumericDomainError):
        evaluate(parse("1/(y - 1)"), {"y": 1.0})
    with pytest.raises(NumericDomainError):
        evaluate(parse("1/y"), {"y": np.array([1.0, 0.0])})


def test_evaluate_unbound_variable():
    with pytest.raises(UnboundVariableError) as info:
        evaluate(parse("y + zp"), {"y": 1.0})
    assert info.value.name == "zp"


@pytest.mark.parametrize("source", EXPRESSIONS)
def test_print_parse_round_trip(source):
    tree = parse(source)
    assert parse(to_source(tree)) == tree


def test_diff_simplifies():
    assert to_source(diff(parse("y^2"), "y")) == "2*y"
    assert diff(parse("y*zp"), "zp") == Var("y")
    assert diff(parse("y*zp"), "x") == Num(0.0)
    d = diff(parse("exp(-t)*(y - yp)"), "yp")
    assert evaluate(d, {"t": 0.3}) == pytest.approx(-math.exp(-0.3), abs=1e-12)


def test_diff_unknown_variable():
    with pytest.raises(InvalidArgumentError):
        diff(parse("y"), "w")


@pytest.mark.parametrize("source", EXPRESSIONS)
@pytest.mark.parametrize("var", ["t", "x", "xp", "y", "z", "yp", "zp", "v"])
def test_diff_matches_central_differences(source, var):
    tree = parse(source)
    h = 1e-5
    up = evaluate(tree, {**POINT, var: POINT[var] + h})
    down = evaluate(tree, {**POINT, var: POINT[var] - h})
    fd = (up - down) / (2 * h)
    exact = evaluate(diff(tree, var), POINT)
    assert abs(exact - fd) <= 1e-6 * (1 + abs(fd))


def test_swap_primes():
    swapped = swap_primes(parse("x*y + zp - vp"))
    assert swapped == parse("xp*yp + z - v")
    assert swap_primes(swapped) == parse("x*y + zp - vp")


@pytest.mark.parametrize(
    "source",
    ["y - yp", "2*y*yp + tanh(y)", "(y + z)*(yp - 2*zp)", "exp(-t)*(y - yp)^2", "y/(1 + yp^2)", "tanh(yp)"],
)
def test_separate_reconstructs(source):
    tree = parse(source)
    terms = separate(tree)
    assert terms is not None
    total = sum(
        term.coef * evaluate(term.own, POINT) * evaluate(term.primed, POINT) for term in terms
    )
    assert total == pytest.approx(evaluate(tree, POINT), abs=1e-12)
    for term in terms:
        assert not free_vars(term.own) & {"xp", "yp", "zp", "vp"}
        assert free_vars(term.primed) <= {"t", "xp", "yp", "zp", "vp"}


@pytest.mark.parametrize("source", ["exp(y*yp)", "tanh(y + yp)", "y/(y + yp)"])
def test_separate_rejects_entangled(source):
    assert separate(parse(source)) is None

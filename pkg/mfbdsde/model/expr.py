"""Coefficient expression trees"""

from dataclasses import dataclass
from typing import FrozenSet, Union


VARIABLES = ("t", "x", "xp", "y", "z", "yp", "zp", "v", "vp", "p", "q")
FUNCTIONS = ("exp", "sin", "cos", "tanh", "sqrt", "abs", "sign")

PRIME_PAIRS = {"x": "xp", "y": "yp", "z": "zp", "v": "vp"}
PRIMED = frozenset(PRIME_PAIRS.values())


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class Add:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Sub:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Mul:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Div:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Pow:
    base: "Expr"
    exponent: int


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Expr"


Expr = Union[Num, Var, Neg, Add, Sub, Mul, Div, Pow, Call]

BINARY = (Add, Sub, Mul, Div)

ZERO = Num(0.0)
ONE = Num(1.0)


def free_vars(e: Expr) -> FrozenSet[str]:
    """Names of all variables referenced by e"""
    if isinstance(e, Var):
        return frozenset((e.name,))
    if isinstance(e, Num):
        return frozenset()
    if isinstance(e, (Neg,)):
        return free_vars(e.operand)
    if isinstance(e, BINARY):
        return free_vars(e.left) | free_vars(e.right)
    if isinstance(e, Pow):
        return free_vars(e.base)
    if isinstance(e, Call):
        return free_vars(e.arg)
    raise TypeError(f"not an expression node: {e!r}")


def is_zero(e: Expr) -> bool:
    return isinstance(e, Num) and e.value == 0.0


def uses_primed(e: Expr) -> bool:
    return bool(free_vars(e) & PRIMED)

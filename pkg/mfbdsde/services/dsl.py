"""
Coefficient expression language: parse, print, evaluate, differentiate.

Grammar (loosest binding first):

    expr    := expr ('+' | '-') expr | expr ('*' | '/') expr | unary
    unary   := '-' unary | power
    power   := atom ('^' INT)*            right-associative, INT >= 0
    atom    := NUMBER | VARIABLE | FUNC '(' expr ')' | '(' expr ')'

Evaluation works on floats and on numpy arrays alike, so the solvers bind
whole particle populations at once.
"""

import logging
import math
import re
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from ..model.errors import NumericDomainError, ParseError, UnboundVariableError, InvalidArgumentError
from ..model.expr import (
    Add, Call, Div, Expr, FUNCTIONS, Mul, Neg, Num, ONE, PRIMED, PRIME_PAIRS, Pow, Sub, Var,
    VARIABLES, ZERO, free_vars,
)


logger = logging.getLogger(__name__)

Value = Union[float, np.ndarray]

# binary operators in groups of increasing precedence, all left-associative
OPERATORS = [
    [("+", Add), ("-", Sub)],
    [("*", Mul), ("/", Div)],
]
OPERATOR_PREC = {name: idx for idx, group in enumerate(OPERATORS) for name, _ in group}
OPERATOR_NODE = {name: node for group in OPERATORS for name, node in group}

MAX_EXPONENT = 64

# bounds on parenthesis nesting and tree depth; deeper input is a ParseError
MAX_NESTING = 100
MAX_DEPTH = 200

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/^(),])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str  # num | ident | op | end
    text: str
    offset: int


def tokenize(source: str) -> List[Token]:
    """Split source into tokens; offsets are byte offsets into the UTF-8 encoding"""
    tokens: List[Token] = []
    pos = 0
    while pos < len(source):
        match = _TOKEN_RE.match(source, pos)
        if match is None:
            raise ParseError(f"unexpected character {source[pos]!r}", _byte_offset(source, pos))
        kind = match.lastgroup
        if kind != "ws":
            tokens.append(Token(kind, match.group(), _byte_offset(source, pos)))
        pos = match.end()
    tokens.append(Token("end", "", _byte_offset(source, len(source))))
    return tokens


def _byte_offset(source: str, index: int) -> int:
    return len(source[:index].encode("utf-8"))


class _Parser:
    def __init__(self, source: str):
        self.tokens = tokenize(source)
        self.index = 0
        self.nesting = 0
        # tree depth per node, keyed by id; nodes stay alive inside the tree
        self.depths: Dict[int, int] = {}

    @property
    def current(self) -> Token:
        return self.tokens[self.index]

    def advance(self) -> Token:
        token = self.tokens[self.index]
        if token.kind != "end":
            self.index += 1
        return token

    def expect(self, text: str):
        token = self.current
        if token.kind == "op" and token.text == text:
            return self.advance()
        found = "end of input" if token.kind == "end" else repr(token.text)
        raise ParseError(f"expected {text!r}, found {found}", token.offset)

    def node(self, expr: Expr, token: Token, *children: Expr) -> Expr:
        depth = 1 + max((self.depths[id(c)] for c in children), default=0)
        if depth > MAX_DEPTH:
            raise ParseError("expression nested too deeply", token.offset)
        self.depths[id(expr)] = depth
        return expr

    def enter(self, token: Token) -> None:
        self.nesting += 1
        if self.nesting > MAX_NESTING:
            raise ParseError("expression nested too deeply", token.offset)

    def parse(self) -> Expr:
        expr = self.expression(0)
        if self.current.kind != "end":
            token = self.current
            if token.text == ")":
                raise ParseError("unbalanced ')'", token.offset)
            raise ParseError(f"unexpected {token.text!r}", token.offset)
        return expr

    def expression(self, min_prec: int) -> Expr:
        lhs = self.unary()
        while self.current.kind == "op" and self.current.text in OPERATOR_PREC:
            op = self.current
            prec = OPERATOR_PREC[op.text]
            if prec < min_prec:
                break
            self.advance()
            rhs = self.expression(prec + 1)
            lhs = self.node(OPERATOR_NODE[op.text](lhs, rhs), op, lhs, rhs)
        return lhs

    def unary(self) -> Expr:
        signs = []
        while self.current.kind == "op" and self.current.text == "-":
            signs.append(self.advance())
        expr = self.power()
        for token in reversed(signs):
            expr = self.node(Neg(expr), token, expr)
        return expr

    def power(self) -> Expr:
        base = self.atom()
        if self.current.kind == "op" and self.current.text == "^":
            caret = self.advance()
            return self.node(Pow(base, self.exponent()), caret, base)
        return base

    def exponent(self) -> int:
        """INT ('^' INT)*, folded from the right"""
        literals = [self._exponent_literal()]
        while self.current.kind == "op" and self.current.text == "^":
            self.advance()
            literals.append(self._exponent_literal())
        value = 1
        for token in reversed(literals):
            value = int(token.text) ** value
            if value > MAX_EXPONENT:
                raise ParseError(f"exponent {value} exceeds {MAX_EXPONENT}", token.offset)
        return value

    def _exponent_literal(self) -> Token:
        token = self.current
        if token.kind != "num" or not token.text.isdigit():
            raise ParseError("exponent must be a nonnegative integer literal", token.offset)
        return self.advance()

    def atom(self) -> Expr:
        token = self.current
        if token.kind == "num":
            self.advance()
            value = float(token.text)
            if not math.isfinite(value):
                raise ParseError(f"number {token.text} is out of range", token.offset)
            return self.node(Num(value), token)
        if token.kind == "ident":
            self.advance()
            if token.text in FUNCTIONS:
                self.expect("(")
                self.enter(token)
                arg = self.expression(0)
                self.nesting -= 1
                self.expect(")")
                return self.node(Call(token.text, arg), token, arg)
            if token.text in VARIABLES:
                return self.node(Var(token.text), token)
            raise ParseError(f"unknown identifier {token.text!r}", token.offset)
        if token.kind == "op" and token.text == "(":
            self.advance()
            self.enter(token)
            inner = self.expression(0)
            self.nesting -= 1
            if self.current.kind == "end":
                raise ParseError("unbalanced '('", token.offset)
            self.expect(")")
            return inner
        if token.kind == "end":
            raise ParseError("unexpected end of input", token.offset)
        raise ParseError(f"unexpected {token.text!r}", token.offset)


def parse(source: str) -> Expr:
    """Parse a coefficient expression"""
    if not source or not source.strip():
        raise ParseError("empty expression", 0)
    return _Parser(source).parse()


# Printing

_PREC_ADD, _PREC_MUL, _PREC_NEG, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5


def _prec(e: Expr) -> int:
    if isinstance(e, (Add, Sub)):
        return _PREC_ADD
    if isinstance(e, (Mul, Div)):
        return _PREC_MUL
    if isinstance(e, Neg):
        return _PREC_NEG
    if isinstance(e, Pow):
        return _PREC_POW
    return _PREC_ATOM


def _format_number(value: float) -> str:
    if float(value).is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(float(value))


def to_source(e: Expr) -> str:
    """Print e with the fewest parentheses that parse back to the same tree"""
    if isinstance(e, Num):
        text = _format_number(e.value)
        return f"({text})" if e.value < 0 else text
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Call):
        return f"{e.func}({to_source(e.arg)})"
    if isinstance(e, Neg):
        inner = to_source(e.operand)
        return f"-({inner})" if _prec(e.operand) < _PREC_NEG else f"-{inner}"
    if isinstance(e, Pow):
        base = to_source(e.base)
        if _prec(e.base) < _PREC_ATOM:
            base = f"({base})"
        return f"{base}^{e.exponent}"
    level = _prec(e)
    symbol = {Add: "+", Sub: "-", Mul: "*", Div: "/"}[type(e)]
    left = to_source(e.left)
    if _prec(e.left) < level:
        left = f"({left})"
    right = to_source(e.right)
    if _prec(e.right) <= level:
        right = f"({right})"
    return f"{left}{symbol}{right}"


# Evaluation

def _as_value(value) -> Value:
    if isinstance(value, np.ndarray):
        return value.astype(float, copy=False)
    return np.float64(value)


def evaluate(e: Expr, bindings: Mapping[str, Value]) -> Value:
    """
    Evaluate e under bindings. Scalars give a float, arrays broadcast.
    Division by zero and sqrt of a negative raise NumericDomainError.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        result = _eval(e, bindings)
    if isinstance(result, np.ndarray) and result.ndim > 0:
        return result
    return float(result)


def _eval(e: Expr, env: Mapping[str, Value]) -> Value:
    if isinstance(e, Num):
        return np.float64(e.value)
    if isinstance(e, Var):
        try:
            return _as_value(env[e.name])
        except KeyError:
            raise UnboundVariableError(e.name) from None
    if isinstance(e, Neg):
        return -_eval(e.operand, env)
    if isinstance(e, Add):
        return _eval(e.left, env) + _eval(e.right, env)
    if isinstance(e, Sub):
        return _eval(e.left, env) - _eval(e.right, env)
    if isinstance(e, Mul):
        return _eval(e.left, env) * _eval(e.right, env)
    if isinstance(e, Div):
        numerator = _eval(e.left, env)
        denominator = _eval(e.right, env)
        if np.any(denominator == 0):
            raise NumericDomainError(f"division by zero in {to_source(e)}")
        return numerator / denominator
    if isinstance(e, Pow):
        return _eval(e.base, env) ** e.exponent
    if isinstance(e, Call):
        arg = _eval(e.arg, env)
        if e.func == "sqrt":
            if np.any(arg < 0):
                raise NumericDomainError(f"sqrt of a negative value in {to_source(e)}")
            return np.sqrt(arg)
        return _FUNCTION_IMPL[e.func](arg)
    raise TypeError(f"not an expression node: {e!r}")


_FUNCTION_IMPL = {
    "exp": np.exp,
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "abs": np.abs,
    "sign": np.sign,
}


# Simplifying constructors

def const_value(e: Expr) -> Optional[float]:
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Neg) and isinstance(e.operand, Num):
        return -e.operand.value
    return None


def _finite(value: float, exponent: int = 1) -> bool:
    """Whether a folded constant (value ** exponent) stays finite"""
    try:
        return math.isfinite(value ** exponent)
    except OverflowError:
        return False


def num(value: float) -> Expr:
    value = float(value)
    if value < 0:
        return Neg(Num(-value))
    return Num(value + 0.0)


def neg(a: Expr) -> Expr:
    c = const_value(a)
    if c is not None:
        return num(-c)
    if isinstance(a, Neg):
        return a.operand
    return Neg(a)


def add(a: Expr, b: Expr) -> Expr:
    ca, cb = const_value(a), const_value(b)
    if ca is not None and cb is not None and _finite(ca + cb):
        return num(ca + cb)
    if ca == 0:
        return b
    if cb == 0:
        return a
    if isinstance(b, Neg):
        return sub(a, b.operand)
    return Add(a, b)


def sub(a: Expr, b: Expr) -> Expr:
    ca, cb = const_value(a), const_value(b)
    if ca is not None and cb is not None and _finite(ca - cb):
        return num(ca - cb)
    if cb == 0:
        return a
    if ca == 0:
        return neg(b)
    if isinstance(b, Neg):
        return add(a, b.operand)
    return Sub(a, b)


def mul(a: Expr, b: Expr) -> Expr:
    ca, cb = const_value(a), const_value(b)
    if ca is not None and cb is not None and _finite(ca * cb):
        return num(ca * cb)
    if ca == 0 or cb == 0:
        return ZERO
    if ca == 1:
        return b
    if cb == 1:
        return a
    if ca == -1:
        return neg(b)
    if cb == -1:
        return neg(a)
    if isinstance(a, Neg) and isinstance(b, Neg):
        return mul(a.operand, b.operand)
    if cb is not None and ca is None:
        return mul(b, a)
    return Mul(a, b)


def div(a: Expr, b: Expr) -> Expr:
    ca, cb = const_value(a), const_value(b)
    if ca == 0 and cb != 0:
        return ZERO
    if cb == 1:
        return a
    if ca is not None and cb is not None and cb != 0 and _finite(ca / cb):
        return num(ca / cb)
    return Div(a, b)


def power(base: Expr, exponent: int) -> Expr:
    if exponent == 0:
        return ONE
    if exponent == 1:
        return base
    c = const_value(base)
    if c is not None and _finite(c, exponent):
        return num(c ** exponent)
    return Pow(base, exponent)




# Differentiation

def diff(e: Expr, var: str) -> Expr:
    """Symbolic partial derivative; d|u| = sign(u) du with sign(0) = 0"""
    if var not in VARIABLES:
        raise InvalidArgumentError(f"cannot differentiate with respect to {var!r}")
    return _diff(e, var)


def _diff(e: Expr, var: str) -> Expr:
    if isinstance(e, Num):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.name == var else ZERO
    if var not in free_vars(e):
        return ZERO
    if isinstance(e, Neg):
        return neg(_diff(e.operand, var))
    if isinstance(e, Add):
        return add(_diff(e.left, var), _diff(e.right, var))
    if isinstance(e, Sub):
        return sub(_diff(e.left, var), _diff(e.right, var))
    if isinstance(e, Mul):
        return add(mul(_diff(e.left, var), e.right), mul(e.left, _diff(e.right, var)))
    if isinstance(e, Div):
        return sub(
            div(_diff(e.left, var), e.right),
            div(mul(e.left, _diff(e.right, var)), power(e.right, 2)),
        )
    if isinstance(e, Pow):
        return mul(mul(num(e.exponent), power(e.base, e.exponent - 1)), _diff(e.base, var))
    if isinstance(e, Call):
        inner = _diff(e.arg, var)
        u = e.arg
        if e.func == "exp":
            outer = e
        elif e.func == "sin":
            outer = Call("cos", u)
        elif e.func == "cos":
            outer = neg(Call("sin", u))
        elif e.func == "tanh":
            outer = sub(ONE, power(e, 2))
        elif e.func == "sqrt":
            return div(inner, mul(num(2), e))
        elif e.func == "abs":
            outer = Call("sign", u)
        else:  # sign
            return ZERO
        return mul(outer, inner)
    raise TypeError(f"not an expression node: {e!r}")


# Renaming and separation

def rename(e: Expr, mapping: Mapping[str, str]) -> Expr:
    if isinstance(e, Var):
        return Var(mapping.get(e.name, e.name))
    if isinstance(e, Num):
        return e
    if isinstance(e, Neg):
        return Neg(rename(e.operand, mapping))
    if isinstance(e, (Add, Sub, Mul, Div)):
        return type(e)(rename(e.left, mapping), rename(e.right, mapping))
    if isinstance(e, Pow):
        return Pow(rename(e.base, mapping), e.exponent)
    if isinstance(e, Call):
        return Call(e.func, rename(e.arg, mapping))
    raise TypeError(f"not an expression node: {e!r}")


_SWAP = {**PRIME_PAIRS, **{primed: plain for plain, primed in PRIME_PAIRS.items()}}


def swap_primes(e: Expr) -> Expr:
    """Exchange every own-state variable with its primed partner"""
    return rename(e, _SWAP)


@dataclass(frozen=True)
class SeparatedTerm:
    coef: float
    own: Expr
    primed: Expr


MAX_TERMS = 256
MAX_EXPANDED_POWER = 6

_Product = Tuple[float, Tuple[Expr, ...]]


def _side(e: Expr) -> str:
    names = free_vars(e) - {"t"}
    if not names & PRIMED:
        return "own"
    if names <= PRIMED:
        return "primed"
    return "mixed"


def _products(e: Expr) -> Optional[List[_Product]]:
    if _side(e) != "mixed":
        c = const_value(e)
        if c is not None:
            return [(c, ())]
        return [(1.0, (e,))]
    if isinstance(e, Neg):
        inner = _products(e.operand)
        return None if inner is None else [(-c, f) for c, f in inner]
    if isinstance(e, (Add, Sub)):
        left, right = _products(e.left), _products(e.right)
        if left is None or right is None:
            return None
        sign = -1.0 if isinstance(e, Sub) else 1.0
        return _capped(left + [(sign * c, f) for c, f in right])
    if isinstance(e, Mul):
        left, right = _products(e.left), _products(e.right)
        if left is None or right is None:
            return None
        return _capped([(cl * cr, fl + fr) for cl, fl in left for cr, fr in right])
    if isinstance(e, Div) and _side(e.right) != "mixed":
        left = _products(e.left)
        if left is None:
            return None
        reciprocal = Div(ONE, e.right)
        return [(c, f + (reciprocal,)) for c, f in left]
    if isinstance(e, Pow) and e.exponent <= MAX_EXPANDED_POWER:
        base = _products(e.base)
        if base is None:
            return None
        result: Optional[List[_Product]] = [(1.0, ())]
        for _ in range(e.exponent):
            result = _capped([(ca * cb, fa + fb) for ca, fa in result for cb, fb in base])
            if result is None:
                return None
        return result
    return None


def _capped(products: List[_Product]) -> Optional[List[_Product]]:
    return products if len(products) <= MAX_TERMS else None


def _product_expr(factors: List[Expr]) -> Expr:
    result: Expr = ONE
    for factor in factors:
        result = mul(result, factor)
    return result


def separate(e: Expr) -> Optional[List[SeparatedTerm]]:
    """
    Rewrite e as a sum of coef * own(t, x, y, z, v) * primed(t, xp, yp, zp, vp)
    terms, or return None when e does not split that way.
    """
    products = _products(e)
    if products is None:
        return None
    terms = []
    for coef, factors in products:
        own = [f for f in factors if _side(f) == "own"]
        primed = [f for f in factors if _side(f) == "primed"]
        terms.append(SeparatedTerm(coef, _product_expr(own), _product_expr(primed)))
    return terms


def parse_map(sources: Mapping[str, str]) -> Dict[str, Expr]:
    return {name: parse(source) for name, source in sources.items()}

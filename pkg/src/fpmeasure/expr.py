"""Scalar expressions of the spatial variables ``x1 .. xn``.

Grammar (lowest to highest precedence)::

    expr  := term (('+' | '-') term)*
    term  := unary (('*' | '/') unary)*
    unary := '-' unary | power
    power := atom ('^' unary)?          # right associative
    atom  := NUMBER | 'pi' | 'e' | xK | FUNC '(' expr ')' | '(' expr ')'

so ``-x1^2`` parses as ``-(x1^2)`` and ``2^-x1`` is accepted.  Trees are
frozen dataclasses; ``differentiate`` always returns a new tree.  The only
rewriting ever applied is folding of all-literal subtrees and dropping
additive zeros / multiplicative ones produced by the derivative rules.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EvaluationDomainError, ExpressionSyntaxError

FUNCTIONS = ("exp", "log", "sin", "cos", "sqrt", "abs", "tanh", "sign")
CONSTANTS = {"pi": math.pi, "e": math.e}
# Functions that break C^2 smoothness; rejected inside compact functions.
NONSMOOTH = frozenset({"abs", "sign"})


class Expression:
    """Base class of all tree nodes."""

    __slots__ = ()

    def __str__(self) -> str:
        return render(self)


@dataclass(frozen=True)
class Num(Expression):
    value: float


@dataclass(frozen=True)
class Const(Expression):
    name: str


@dataclass(frozen=True)
class Var(Expression):
    index: int  # 1-based


@dataclass(frozen=True)
class Neg(Expression):
    arg: Expression


@dataclass(frozen=True)
class Call(Expression):
    func: str
    arg: Expression


@dataclass(frozen=True)
class Binary(Expression):
    left: Expression
    right: Expression
    symbol = "?"


@dataclass(frozen=True)
class Add(Binary):
    symbol = "+"


@dataclass(frozen=True)
class Sub(Binary):
    symbol = "-"


@dataclass(frozen=True)
class Mul(Binary):
    symbol = "*"


@dataclass(frozen=True)
class Div(Binary):
    symbol = "/"


@dataclass(frozen=True)
class Pow(Binary):
    symbol = "^"


_BINARY = {"+": Add, "-": Sub, "*": Mul, "/": Div, "^": Pow}

# ---------------------------------------------------------------------------
# numeric kernels shared by folding and evaluation


def _apply_func(name: str, x):
    if name == "exp":
        return np.exp(x)
    if name == "log":
        return np.log(x)
    if name == "sin":
        return np.sin(x)
    if name == "cos":
        return np.cos(x)
    if name == "sqrt":
        return np.sqrt(x)
    if name == "abs":
        return np.abs(x)
    if name == "tanh":
        return np.tanh(x)
    if name == "sign":
        return np.sign(x)
    raise KeyError(name)


def _apply_binary(cls, a, b):
    if cls is Add:
        return a + b
    if cls is Sub:
        return a - b
    if cls is Mul:
        return a * b
    if cls is Div:
        return a / b
    return np.power(a, b)


def _fold(value) -> Num | None:
    with np.errstate(all="ignore"):
        v = float(value)
    return Num(v) if math.isfinite(v) else None


# ---------------------------------------------------------------------------
# smart constructors (folding only)


def _is_num(e: Expression, value: float | None = None) -> bool:
    return isinstance(e, Num) and (value is None or e.value == value)


def neg(a: Expression) -> Expression:
    if isinstance(a, Num):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def binary(cls, a: Expression, b: Expression) -> Expression:
    if isinstance(a, Num) and isinstance(b, Num):
        with np.errstate(all="ignore"):
            folded = _fold(_apply_binary(cls, np.float64(a.value), np.float64(b.value)))
        if folded is not None:
            return folded
    return cls(a, b)


def call(func: str, a: Expression) -> Expression:
    if isinstance(a, Num):
        with np.errstate(all="ignore"):
            folded = _fold(_apply_func(func, np.float64(a.value)))
        if folded is not None:
            return folded
    return Call(func, a)


# derivative-rule constructors: additionally drop 0 and 1 identities
def _add(a, b):
    if _is_num(a, 0.0):
        return b
    if _is_num(b, 0.0):
        return a
    return binary(Add, a, b)


def _sub(a, b):
    if _is_num(b, 0.0):
        return a
    if _is_num(a, 0.0):
        return neg(b)
    return binary(Sub, a, b)


def _mul(a, b):
    if _is_num(a, 0.0) or _is_num(b, 0.0):
        return Num(0.0)
    if _is_num(a, 1.0):
        return b
    if _is_num(b, 1.0):
        return a
    if _is_num(a, -1.0):
        return neg(b)
    if _is_num(b, -1.0):
        return neg(a)
    return binary(Mul, a, b)


def _div(a, b):
    if _is_num(a, 0.0):
        return Num(0.0)
    if _is_num(b, 1.0):
        return a
    return binary(Div, a, b)


def _pow(a, b):
    if _is_num(b, 1.0):
        return a
    if _is_num(b, 0.0):
        return Num(1.0)
    return binary(Pow, a, b)


# ---------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[-+*/^(),]))"
)


class _Parser:
    def __init__(self, source: str, dimension: int):
        self.source = source.replace("−", "-")
        self.dimension = dimension
        self.tokens: list[tuple[str, str, int]] = []
        pos = 0
        text = self.source
        while pos < len(text):
            if text[pos:].strip() == "":
                break
            m = _TOKEN.match(text, pos)
            if m is None or m.end() == pos:
                raise ExpressionSyntaxError(f"unexpected character {text[pos]!r}", self._offset(pos))
            kind = m.lastgroup
            start = m.start(kind)
            self.tokens.append((kind, m.group(kind), start))
            pos = m.end()
        self.tokens.append(("end", "", len(text)))
        self.i = 0

    def _offset(self, char_pos: int) -> int:
        return len(self.source[:char_pos].encode("utf-8"))

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, message: str, tok=None):
        tok = tok or self.peek()
        return ExpressionSyntaxError(message, self._offset(tok[2]))

    def expect(self, op: str):
        tok = self.take()
        if tok[0] != "op" or tok[1] != op:
            found = tok[1] or "end of input"
            raise self.error(f"expected {op!r}, found {found!r}", tok)

    def parse(self) -> Expression:
        if self.peek()[0] == "end":
            raise self.error("empty expression")
        e = self.expr()
        if self.peek()[0] != "end":
            raise self.error(f"unexpected token {self.peek()[1]!r}")
        return e

    def expr(self) -> Expression:
        left = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.take()[1]
            left = binary(_BINARY[op], left, self.term())
        return left

    def term(self) -> Expression:
        left = self.unary()
        while self.peek()[0] == "op" and self.peek()[1] in "*/":
            op = self.take()[1]
            left = binary(_BINARY[op], left, self.unary())
        return left

    def unary(self) -> Expression:
        if self.peek() == ("op", "-", self.peek()[2]):
            self.take()
            return neg(self.unary())
        return self.power()

    def power(self) -> Expression:
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return binary(Pow, base, self.unary())
        return base

    def atom(self) -> Expression:
        tok = self.take()
        kind, text, _ = tok
        if kind == "num":
            return Num(float(text))
        if kind == "op" and text == "(":
            e = self.expr()
            self.expect(")")
            return e
        if kind == "name":
            if text in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return call(text, arg)
            if text in CONSTANTS:
                return Const(text)
            m = re.fullmatch(r"x([1-9]\d*)", text)
            if m:
                index = int(m.group(1))
                if index > self.dimension:
                    raise ExpressionSyntaxError(
                        f"variable index exceeds dimension: {text} with n={self.dimension}",
                        self._offset(tok[2]),
                    )
                return Var(index)
            raise ExpressionSyntaxError(f"unknown identifier {text!r}", self._offset(tok[2]))
        found = text or "end of input"
        raise ExpressionSyntaxError(f"unexpected token {found!r}", self._offset(tok[2]))


def parse(source: str, dimension: int) -> Expression:
    """Parse ``source`` into an expression over ``x1 .. x{dimension}``."""
    if dimension < 1:
        raise ValueError("dimension must be >= 1")
    if not source or not source.strip():
        raise ExpressionSyntaxError("empty expression", 0)
    return _Parser(source, dimension).parse()


# ---------------------------------------------------------------------------
# rendering

_PREC = {Add: 1, Sub: 1, Mul: 2, Div: 2}
_UNARY_PREC = 3
_POW_PREC = 4


def _prec(e: Expression) -> int:
    if isinstance(e, (Add, Sub, Mul, Div)):
        return _PREC[type(e)]
    if isinstance(e, Neg) or (isinstance(e, Num) and (e.value < 0 or math.copysign(1, e.value) < 0)):
        return _UNARY_PREC
    if isinstance(e, Pow):
        return _POW_PREC
    return 5


def _num_text(v: float) -> str:
    if v == int(v) and abs(v) < 1e16:
        return str(int(v)) if v != 0 else ("-0" if math.copysign(1, v) < 0 else "0")
    return repr(v)


def render(e: Expression) -> str:
    """ASCII rendering with the minimal parentheses that reparse to ``e``."""
    if isinstance(e, Num):
        return _num_text(e.value)
    if isinstance(e, Const):
        return e.name
    if isinstance(e, Var):
        return f"x{e.index}"
    if isinstance(e, Call):
        return f"{e.func}({render(e.arg)})"
    if isinstance(e, Neg):
        inner = render(e.arg)
        # -(a^b) needs no parens; anything looser does
        return f"-{inner}" if _prec(e.arg) >= _UNARY_PREC else f"-({inner})"
    if isinstance(e, Pow):
        left = render(e.left)
        if _prec(e.left) <= _POW_PREC:
            left = f"({left})"
        right = render(e.right)
        if _prec(e.right) < _UNARY_PREC:
            right = f"({right})"
        return f"{left}^{right}"
    if isinstance(e, Binary):
        p = _PREC[type(e)]
        left = render(e.left)
        if _prec(e.left) < p:
            left = f"({left})"
        right = render(e.right)
        # left associative: equal precedence on the right needs parens
        if _prec(e.right) <= p:
            right = f"({right})"
        return f"{left} {e.symbol} {right}"
    raise TypeError(f"not an expression: {e!r}")


# ---------------------------------------------------------------------------
# structural queries


def variables(e: Expression) -> set[int]:
    if isinstance(e, Var):
        return {e.index}
    if isinstance(e, (Neg, Call)):
        return variables(e.arg)
    if isinstance(e, Binary):
        return variables(e.left) | variables(e.right)
    return set()


def functions(e: Expression) -> set[str]:
    if isinstance(e, Call):
        return {e.func} | functions(e.arg)
    if isinstance(e, Neg):
        return functions(e.arg)
    if isinstance(e, Binary):
        return functions(e.left) | functions(e.right)
    return set()


def max_index(e: Expression) -> int:
    return max(variables(e), default=0)


# ---------------------------------------------------------------------------
# differentiation


def differentiate(e: Expression, i: int) -> Expression:
    """Exact partial derivative with respect to ``x{i}``.

    ``abs`` differentiates to ``sign``, which is 0 at the kink.
    """
    if i < 1:
        raise ValueError("variable index must be >= 1")
    return _d(e, i)


def _d(e: Expression, i: int) -> Expression:
    if isinstance(e, (Num, Const)):
        return Num(0.0)
    if isinstance(e, Var):
        return Num(1.0 if e.index == i else 0.0)
    if isinstance(e, Neg):
        return neg(_d(e.arg, i))
    if isinstance(e, Add):
        return _add(_d(e.left, i), _d(e.right, i))
    if isinstance(e, Sub):
        return _sub(_d(e.left, i), _d(e.right, i))
    if isinstance(e, Mul):
        return _add(_mul(_d(e.left, i), e.right), _mul(e.left, _d(e.right, i)))
    if isinstance(e, Div):
        f, g = e.left, e.right
        df, dg = _d(f, i), _d(g, i)
        return _sub(_div(df, g), _div(_mul(f, dg), _pow(g, Num(2.0))))
    if isinstance(e, Pow):
        f, g = e.left, e.right
        df = _d(f, i)
        if i not in variables(g):
            # c * f^(c-1) * f'
            return _mul(_mul(g, _pow(f, _sub(g, Num(1.0)))), df)
        dg = _d(g, i)
        if i not in variables(f):
            return _mul(_mul(e, call("log", f)), dg)
        # f^g * (g' log f + g f'/f)
        return _mul(e, _add(_mul(dg, call("log", f)), _div(_mul(g, df), f)))
    if isinstance(e, Call):
        a = e.arg
        da = _d(a, i)
        if _is_num(da, 0.0):
            return Num(0.0)
        if e.func == "exp":
            outer = e
        elif e.func == "log":
            return _div(da, a)
        elif e.func == "sin":
            outer = call("cos", a)
        elif e.func == "cos":
            outer = neg(call("sin", a))
        elif e.func == "sqrt":
            return _div(da, _mul(Num(2.0), e))
        elif e.func == "tanh":
            outer = _sub(Num(1.0), _pow(e, Num(2.0)))
        elif e.func == "abs":
            outer = call("sign", a)
        elif e.func == "sign":
            return Num(0.0)
        else:  # pragma: no cover - closed function set
            raise KeyError(e.func)
        return _mul(outer, da)
    raise TypeError(f"not an expression: {e!r}")


# ---------------------------------------------------------------------------
# evaluation


def _first_bad(value, coords):
    bad = ~np.isfinite(value)
    if np.ndim(bad) == 0:
        idx = ()
    else:
        idx = np.unravel_index(int(np.argmax(bad)), np.shape(bad))
    point = [float(np.broadcast_to(c, np.shape(value))[idx]) for c in coords]
    return point


def _eval(e: Expression, coords, strict: bool):
    if isinstance(e, Num):
        return np.float64(e.value)
    if isinstance(e, Const):
        return np.float64(CONSTANTS[e.name])
    if isinstance(e, Var):
        return coords[e.index - 1]
    if isinstance(e, Neg):
        return -_eval(e.arg, coords, strict)
    if isinstance(e, Call):
        arg = _eval(e.arg, coords, strict)
        out = _apply_func(e.func, arg)
        if strict and not np.all(np.isfinite(out)):
            raise EvaluationDomainError(f"non-finite value of {e.func}(...)", _first_bad(out, coords))
        return out
    if isinstance(e, Binary):
        a = _eval(e.left, coords, strict)
        b = _eval(e.right, coords, strict)
        out = _apply_binary(type(e), a, b)
        if strict and not np.all(np.isfinite(out)):
            what = "division by zero" if isinstance(e, Div) else f"non-finite result of '{e.symbol}'"
            raise EvaluationDomainError(what, _first_bad(out, coords))
        return out
    raise TypeError(f"not an expression: {e!r}")


def evaluate_array(e: Expression, coords: Sequence, strict: bool = True) -> np.ndarray:
    """Evaluate on broadcastable coordinate arrays ``coords[k]`` = values of ``x{k+1}``.

    With ``strict`` any non-finite intermediate raises
    :class:`EvaluationDomainError` carrying the first offending point;
    otherwise IEEE values (inf/nan) are returned as they are.
    """
    coords = [np.asarray(c, dtype=float) for c in coords]
    if max_index(e) > len(coords):
        raise ValueError(f"expression uses x{max_index(e)} but only {len(coords)} coordinates given")
    with np.errstate(all="ignore"):
        out = _eval(e, coords, strict)
    shape = np.broadcast_shapes(*(np.shape(c) for c in coords)) if coords else ()
    return np.broadcast_to(np.asarray(out, dtype=float), shape).copy()


def evaluate(e: Expression, point: Sequence[float]) -> float:
    """Evaluate at a single point; non-finite values raise."""
    return float(evaluate_array(e, [np.float64(p) for p in point], strict=True))

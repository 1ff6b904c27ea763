"""Coefficient expressions: parsing, printing, a.e. differentiation, compilation.

The grammar is deliberately small::

    expr   := term (("+" | "-") term)*
    term   := factor (("*" | "/") factor)*
    factor := "-"? atom ("^" int)?
    atom   := number | "x" int | fn "(" expr ")" | "(" expr ")"
    fn     := "abs" | "exp" | "sign" | "sqrt"

Variables are 1-indexed.  ``-x1^2`` means ``-(x1^2)``.  The Unicode minus
sign is accepted wherever ``-`` is.

Derivatives are taken almost everywhere: ``abs' = sign``, ``sign' = 0`` and
``sign(0) = 0``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Union

import numpy as np

from .errors import ExprSyntaxError, UnknownIdentifierError

FUNCTIONS = ("abs", "exp", "sign", "sqrt")
KINK_FUNCTIONS = ("abs", "sign", "sqrt")


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    index: int  # 1-based


@dataclass(frozen=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * /
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Pow:
    base: "Node"
    exponent: int


@dataclass(frozen=True)
class Call:
    fn: str
    arg: "Node"


Node = Union[Const, Var, Neg, BinOp, Pow, Call]


# ---------------------------------------------------------------- parsing

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^()−])
    """,
    re.VERBOSE,
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", _byte_offset(text, pos), text)
        kind = m.lastgroup
        if kind != "ws":
            value = m.group()
            if value == "−":
                value = "-"
            tokens.append((kind, value, _byte_offset(text, pos)))
        pos = m.end()
    tokens.append(("end", "", _byte_offset(text, len(text))))
    return tokens


def _byte_offset(text: str, char_pos: int) -> int:
    return len(text[:char_pos].encode("utf-8"))


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, val, off = self.take()
        if val != value or kind == "end":
            found = "end of input" if kind == "end" else repr(val)
            raise ExprSyntaxError(f"expected {value!r}, found {found}", off, self.text)

    def parse(self) -> Node:
        node = self.expr()
        kind, val, off = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {val!r}", off, self.text)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.factor()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.factor())
        return node

    def factor(self) -> Node:
        negate = False
        if self.peek()[0] == "op" and self.peek()[1] == "-":
            self.take()
            negate = True
        node = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            kind, val, off = self.take()
            if kind != "number" or not val.isdigit():
                raise ExprSyntaxError("exponent must be a non-negative integer", off, self.text)
            node = Pow(node, int(val))
        return Neg(node) if negate else node

    def atom(self) -> Node:
        kind, val, off = self.take()
        if kind == "number":
            return Const(float(val))
        if kind == "name":
            m = re.fullmatch(r"x(\d+)", val)
            if m:
                index = int(m.group(1))
                if index < 1:
                    raise UnknownIdentifierError(f"variables are 1-indexed, got {val!r}", off, self.text)
                return Var(index)
            if val in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(val, arg)
            raise UnknownIdentifierError(f"unknown identifier {val!r}", off, self.text)
        if val == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(val)
        raise ExprSyntaxError(f"expected an operand, found {found}", off, self.text)


# ---------------------------------------------------------------- printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _fmt_const(v: float) -> str:
    if v < 0:
        return f"(-{_fmt_const(-v)})"
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def to_text(node: Node) -> str:
    """Render a node in DSL syntax; ``parse(to_text(e))`` evaluates like ``e``."""
    return _show(node, 0, False)


# parent levels: 1 additive, 2 multiplicative, 3 operand of unary minus, 4 power base
def _show(node: Node, parent: int, right: bool) -> str:
    if isinstance(node, Const):
        return _fmt_const(node.value)
    if isinstance(node, Var):
        return f"x{node.index}"
    if isinstance(node, Call):
        return f"{node.fn}({_show(node.arg, 0, False)})"
    if isinstance(node, Pow):
        s = f"{_show(node.base, 4, False)}^{node.exponent}"
        return f"({s})" if parent >= 4 else s
    if isinstance(node, Neg):
        s = "-" + _show(node.arg, 3, False)
        return f"({s})" if parent >= 3 else s
    prec = _PREC[node.op]
    s = f"{_show(node.left, prec, False)} {node.op} {_show(node.right, prec, True)}"
    if prec < parent or (prec == parent and right):
        return f"({s})"
    return s


# ---------------------------------------------------------------- a.e. derivative

ZERO = Const(0.0)
ONE = Const(1.0)


def _is(node: Node, value: float) -> bool:
    return isinstance(node, Const) and node.value == value


def _add(a: Node, b: Node) -> Node:
    if _is(a, 0.0):
        return b
    if _is(b, 0.0):
        return a
    return BinOp("+", a, b)


def _sub(a: Node, b: Node) -> Node:
    if _is(b, 0.0):
        return a
    if _is(a, 0.0):
        return _neg(b)
    return BinOp("-", a, b)


def _neg(a: Node) -> Node:
    if _is(a, 0.0):
        return ZERO
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def _mul(a: Node, b: Node) -> Node:
    if _is(a, 0.0) or _is(b, 0.0):
        return ZERO
    if _is(a, 1.0):
        return b
    if _is(b, 1.0):
        return a
    return BinOp("*", a, b)


def _div(a: Node, b: Node) -> Node:
    if _is(a, 0.0):
        return ZERO
    if _is(b, 1.0):
        return a
    return BinOp("/", a, b)


def derivative(node: Node, var: int) -> Node:
    """Almost-everywhere partial derivative with respect to ``x{var}``."""
    if isinstance(node, Const):
        return ZERO
    if isinstance(node, Var):
        return ONE if node.index == var else ZERO
    if isinstance(node, Neg):
        return _neg(derivative(node.arg, var))
    if isinstance(node, BinOp):
        a, b = node.left, node.right
        da, db = derivative(a, var), derivative(b, var)
        if node.op == "+":
            return _add(da, db)
        if node.op == "-":
            return _sub(da, db)
        if node.op == "*":
            return _add(_mul(da, b), _mul(a, db))
        return _div(_sub(_mul(da, b), _mul(a, db)), Pow(b, 2))
    if isinstance(node, Pow):
        k = node.exponent
        if k == 0:
            return ZERO
        inner = derivative(node.base, var)
        if k == 1:
            return inner
        outer = _mul(Const(float(k)), node.base if k == 2 else Pow(node.base, k - 1))
        return _mul(outer, inner)
    if isinstance(node, Call):
        inner = derivative(node.arg, var)
        if _is(inner, 0.0) or node.fn == "sign":
            return ZERO
        if node.fn == "abs":
            return _mul(Call("sign", node.arg), inner)
        if node.fn == "exp":
            return _mul(node, inner)
        return _div(inner, _mul(Const(2.0), node))  # sqrt
    raise TypeError(f"not an expression node: {node!r}")


def kink_arguments(node: Node) -> list[Node]:
    """Arguments of abs/sign/sqrt nodes; the a.e. formulas are unsafe where these vanish."""
    found: list[Node] = []

    def walk(n: Node):
        if isinstance(n, Call):
            if n.fn in KINK_FUNCTIONS:
                found.append(n.arg)
            walk(n.arg)
        elif isinstance(n, Neg):
            walk(n.arg)
        elif isinstance(n, BinOp):
            walk(n.left)
            walk(n.right)
        elif isinstance(n, Pow):
            walk(n.base)

    walk(node)
    return found


def max_variable(node: Node) -> int:
    if isinstance(node, Var):
        return node.index
    if isinstance(node, Const):
        return 0
    if isinstance(node, (Neg, Call)):
        return max_variable(node.arg)
    if isinstance(node, Pow):
        return max_variable(node.base)
    return max(max_variable(node.left), max_variable(node.right))


# ---------------------------------------------------------------- compilation

_NP_FN = {"abs": "np.abs", "exp": "np.exp", "sign": "np.sign", "sqrt": "np.sqrt"}


def to_numpy_source(node: Node) -> str:
    """Python source evaluating ``node`` on ``x`` with ``x[i]`` the i-th coordinate array."""
    if isinstance(node, Const):
        return f"({float(node.value)!r})"
    if isinstance(node, Var):
        return f"x[{node.index - 1}]"
    if isinstance(node, Neg):
        return f"(-{to_numpy_source(node.arg)})"
    if isinstance(node, BinOp):
        return f"({to_numpy_source(node.left)} {node.op} {to_numpy_source(node.right)})"
    if isinstance(node, Pow):
        return f"({to_numpy_source(node.base)} ** {node.exponent})"
    return f"{_NP_FN[node.fn]}({to_numpy_source(node.arg)})"


def compile_many(nodes: list[Node]) -> Callable[[np.ndarray], tuple]:
    """Compile expressions into one function returning a tuple of values.

    The function accepts ``x`` of shape ``(n,)`` or ``(n, m)``; each returned
    entry is a scalar or an array broadcastable to ``x[0]``.
    """
    body = ", ".join(to_numpy_source(n) for n in nodes)
    src = f"lambda x: ({body},)"
    return eval(src, {"np": np})  # noqa: S307 - source generated from a parsed AST


@dataclass(frozen=True)
class Expression:
    """A parsed coefficient function of x1..xn."""

    root: Node

    @classmethod
    def parse(cls, text: str) -> "Expression":
        return cls(_Parser(text).parse())

    def __str__(self) -> str:
        return to_text(self.root)

    @cached_property
    def _fn(self):
        return compile_many([self.root])

    def __call__(self, x) -> float | np.ndarray:
        x = np.asarray(x, dtype=float)
        with np.errstate(all="ignore"):
            return self._fn(x)[0]

    def diff(self, var: int) -> "Expression":
        return Expression(derivative(self.root, var))

    @property
    def nvars(self) -> int:
        return max_variable(self.root)

    def kinks(self) -> list["Expression"]:
        return [Expression(a) for a in kink_arguments(self.root)]

    @property
    def is_constant(self) -> bool:
        return self.nvars == 0


def parse_field_expr(text: str) -> Expression:
    return Expression.parse(text)


def evaluate_scalar(expr: Expression, x) -> float:
    value = float(expr(x))
    if not math.isfinite(value):
        from .errors import EvaluationError

        raise EvaluationError(f"non-finite value of {expr} at {list(np.asarray(x, float))}")
    return value

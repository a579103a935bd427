"""Scalar expression language for vector fields, guards, resets and observables.

Grammar (lowest to highest precedence)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?          # right associative
    atom   := NUMBER | 'x'INT | 'pi' | NAME '(' args ')' | '(' expr ')'

Variables are 1-based (``x1`` .. ``xn``); evaluation takes a 0-based sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

EPS = np.finfo(float).eps

FUNCTIONS = {
    "exp": 1,
    "ln": 1,
    "sin": 1,
    "cos": 1,
    "sqrt": 1,
    "abs": 1,
    "atan2": 2,
    "pow": 2,
}


class ExprError(Exception):
    """Base class for expression errors."""


class ParseError(ExprError):
    def __init__(self, message, offset, expected=()):
        self.offset = offset
        self.expected = tuple(expected)
        detail = f" (expected one of: {', '.join(self.expected)})" if self.expected else ""
        super().__init__(f"{message} at offset {offset}{detail}")


class EvalError(ExprError):
    def __init__(self, message, offset=-1):
        self.offset = offset
        where = f" at offset {offset}" if offset >= 0 else ""
        super().__init__(f"{message}{where}")


# --- AST ---------------------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: float
    pos: int = field(default=-1, compare=False, repr=False)


@dataclass(frozen=True)
class Var:
    index: int  # 1-based
    pos: int = field(default=-1, compare=False, repr=False)


@dataclass(frozen=True)
class Neg:
    arg: "ExprTree"
    pos: int = field(default=-1, compare=False, repr=False)


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "ExprTree"
    right: "ExprTree"
    pos: int = field(default=-1, compare=False, repr=False)


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple
    pos: int = field(default=-1, compare=False, repr=False)


ExprTree = Num | Var | Neg | BinOp | Call


def Add(a, b):
    return BinOp("+", a, b)


def Sub(a, b):
    return BinOp("-", a, b)


def Mul(a, b):
    return BinOp("*", a, b)


def Div(a, b):
    return BinOp("/", a, b)


def Pow(a, b):
    return BinOp("^", a, b)


# --- tokenizer / parser -------------------------------------------------------


def _tokenize(text):
    tokens = []
    i = 0
    n = len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and text[i + 1].isdigit()):
            j = i
            while j < n and (text[j].isdigit() or text[j] == "."):
                j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    j = k
                    while j < n and text[j].isdigit():
                        j += 1
            try:
                value = float(text[i:j])
            except ValueError:
                raise ParseError(f"malformed number {text[i:j]!r}", i) from None
            tokens.append(("num", value, i))
            i = j
        elif c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(("name", text[i:j], i))
            i = j
        elif c in "+-*/^(),":
            tokens.append((c, c, i))
            i += 1
        else:
            raise ParseError(f"unexpected character {c!r}", i)
    tokens.append(("end", None, n))
    return tokens


class _Parser:
    def __init__(self, text, dim):
        self.tokens = _tokenize(text)
        self.i = 0
        self.dim = dim

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, kind):
        tok = self.peek()
        if tok[0] != kind:
            raise ParseError(f"unexpected {self._describe(tok)}", tok[2], [kind])
        return self.take()

    @staticmethod
    def _describe(tok):
        if tok[0] == "end":
            return "end of input"
        return f"token {tok[1]!r}"

    def parse(self):
        tree = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise ParseError(f"unexpected {self._describe(tok)}", tok[2],
                             ["+", "-", "*", "/", "^", "end of input"])
        return tree

    def expr(self):
        left = self.term()
        while self.peek()[0] in ("+", "-"):
            op, _, pos = self.take()
            left = BinOp(op, left, self.term(), pos)
        return left

    def term(self):
        left = self.unary()
        while self.peek()[0] in ("*", "/"):
            op, _, pos = self.take()
            left = BinOp(op, left, self.unary(), pos)
        return left

    def unary(self):
        if self.peek()[0] == "-":
            _, _, pos = self.take()
            return Neg(self.unary(), pos)
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[0] == "^":
            _, _, pos = self.take()
            return BinOp("^", base, self.unary(), pos)
        return base

    def atom(self):
        kind, value, pos = self.peek()
        if kind == "num":
            self.take()
            return Num(value, pos)
        if kind == "(":
            self.take()
            inner = self.expr()
            self.expect(")")
            return inner
        if kind == "name":
            self.take()
            if value == "pi":
                return Num(math.pi, pos)
            if value.startswith("x") and value[1:].isdigit():
                index = int(value[1:])
                if index < 1 or (self.dim is not None and index > self.dim):
                    raise ParseError(f"variable {value} out of range 1..{self.dim}", pos)
                return Var(index, pos)
            if value in FUNCTIONS:
                return self.call(value, pos)
            raise ParseError(f"unknown identifier {value!r}", pos)
        raise ParseError(f"unexpected {self._describe(self.peek())}", pos,
                         ["number", "variable", "function", "(", "-"])

    def call(self, name, pos):
        self.expect("(")
        args = [self.expr()]
        while self.peek()[0] == ",":
            self.take()
            args.append(self.expr())
        self.expect(")")
        if len(args) != FUNCTIONS[name]:
            raise ParseError(
                f"{name} takes {FUNCTIONS[name]} argument(s), got {len(args)}", pos)
        return Call(name, tuple(args), pos)


def parse(text: str, dim: int | None = None) -> ExprTree:
    """Parse ``text`` into an expression tree.

    If ``dim`` is given, variables beyond ``x{dim}`` are rejected.
    """
    return _Parser(text, dim).parse()


def to_string(e: ExprTree) -> str:
    """Print ``e`` fully parenthesised; ``parse(to_string(e)) == e``."""
    if isinstance(e, Num):
        if e.value == math.pi:
            return "pi"
        return repr(float(e.value))
    if isinstance(e, Var):
        return f"x{e.index}"
    if isinstance(e, Neg):
        return f"(-{to_string(e.arg)})"
    if isinstance(e, BinOp):
        return f"({to_string(e.left)} {e.op} {to_string(e.right)})"
    if isinstance(e, Call):
        return f"{e.name}({', '.join(to_string(a) for a in e.args)})"
    raise TypeError(f"not an expression tree: {e!r}")


def max_var_index(e: ExprTree) -> int:
    if isinstance(e, Var):
        return e.index
    if isinstance(e, Num):
        return 0
    if isinstance(e, Neg):
        return max_var_index(e.arg)
    if isinstance(e, BinOp):
        return max(max_var_index(e.left), max_var_index(e.right))
    return max((max_var_index(a) for a in e.args), default=0)


# --- evaluation ----------------------------------------------------------------


def _int_power(base, exponent):
    k = int(exponent)
    result = 1.0
    b = base
    for _ in range(abs(k)):
        result *= b
    if k < 0:
        if result == 0.0:
            raise ZeroDivisionError("zero to a negative power")
        result = 1.0 / result
    return result


def _power(base, exponent):
    if float(exponent).is_integer() and abs(exponent) <= 64:
        return _int_power(base, exponent)
    if base < 0:
        raise ValueError("negative base with non-integer exponent")
    return math.pow(base, exponent)


def _ln(a):
    if a <= 0:
        raise ValueError("ln of non-positive argument")
    return math.log(a)


def _sqrt(a):
    if a < 0:
        raise ValueError("sqrt of negative argument")
    return math.sqrt(a)


def _div(a, b):
    if b == 0:
        raise ZeroDivisionError("division by zero")
    return a / b


_RUNTIME = {
    "exp": math.exp,
    "ln": _ln,
    "sin": math.sin,
    "cos": math.cos,
    "sqrt": _sqrt,
    "abs": abs,
    "atan2": math.atan2,
    "pow": _power,
}


def _interpret(e, x):
    try:
        if isinstance(e, Num):
            return e.value
        if isinstance(e, Var):
            return float(x[e.index - 1])
        if isinstance(e, Neg):
            return -_interpret(e.arg, x)
        if isinstance(e, BinOp):
            a = _interpret(e.left, x)
            b = _interpret(e.right, x)
            if e.op == "+":
                return a + b
            if e.op == "-":
                return a - b
            if e.op == "*":
                return a * b
            if e.op == "/":
                return _div(a, b)
            return _power(a, b)
        args = [_interpret(a, x) for a in e.args]
        return _RUNTIME[e.name](*args)
    except EvalError:
        raise
    except (ValueError, ZeroDivisionError, OverflowError) as exc:
        raise EvalError(str(exc), e.pos) from None


def _codegen(e):
    if isinstance(e, Num):
        return repr(float(e.value))
    if isinstance(e, Var):
        return f"x[{e.index - 1}]"
    if isinstance(e, Neg):
        return f"(-{_codegen(e.arg)})"
    if isinstance(e, BinOp):
        a, b = _codegen(e.left), _codegen(e.right)
        if e.op in "+-*":
            return f"({a} {e.op} {b})"
        if e.op == "/":
            return f"_div({a}, {b})"
        if isinstance(e.right, Num) and float(e.right.value).is_integer() \
                and 0 < e.right.value <= 4:
            return "(" + " * ".join([a] * int(e.right.value)) + ")"
        return f"_power({a}, {b})"
    return f"{e.name}({', '.join(_codegen(a) for a in e.args)})"


def compile_expr(e: ExprTree) -> Callable[[Sequence[float]], float]:
    """Compile ``e`` into a fast scalar callable ``f(x)``.

    Domain errors are re-raised as :class:`EvalError` carrying the offset of
    the failing node.
    """
    namespace = dict(_RUNTIME, _div=_div, _power=_power)
    fast = eval(f"lambda x: {_codegen(e)}", namespace)

    def evaluate(x):
        try:
            return float(fast(x))
        except (ValueError, ZeroDivisionError, OverflowError):
            return _interpret(e, x)

    evaluate.tree = e
    return evaluate


def evaluate(e: ExprTree, x: Sequence[float]) -> float:
    """IEEE double evaluation of ``e`` at ``x`` (0-based sequence)."""
    return float(_interpret(e, x))


# --- finite differences ----------------------------------------------------------


def fd_step(x, v, order: int = 1) -> float:
    """Base step for central differences along ``v`` at ``x``."""
    scale = (1.0 + float(np.max(np.abs(x)))) / max(1.0, float(np.max(np.abs(v))))
    root = EPS ** (1.0 / 3.0) if order == 1 else EPS ** 0.25
    return root * scale


def directional_derivative_fn(func, x, v, order: int = 1, h: float | None = None):
    """Order-th derivative of ``t -> func(x + t v)`` at ``t = 0``.

    Central differences at steps ``h`` and ``h/2`` combined by Richardson
    extrapolation. ``func`` may return a scalar or an array.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if not np.any(v):
        return 0.0 * np.asarray(func(x))
    if h is None:
        h = fd_step(x, v, order)

    def central(step):
        fp = np.asarray(func(x + step * v))
        fm = np.asarray(func(x - step * v))
        if order == 1:
            return (fp - fm) / (2.0 * step)
        return (fp - 2.0 * f0 + fm) / (step * step)

    f0 = np.asarray(func(x)) if order == 2 else None
    d1 = central(h)
    d2 = central(0.5 * h)
    out = (4.0 * d2 - d1) / 3.0
    return out if out.ndim else out.item()


def directional_derivative(e: ExprTree, x, v, order: int = 1):
    """Directional derivative of an expression; see :func:`directional_derivative_fn`."""
    return directional_derivative_fn(compile_expr(e), x, v, order)

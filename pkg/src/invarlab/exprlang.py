"""Small expression language for scalar bound functions.

Grammar (standard precedence, ``^`` right-associative and binding tighter
than unary minus)::

    expr    := sum
    sum     := product (("+" | "-") product)*
    product := unary (("*" | "/") unary)*
    unary   := "-" unary | power
    power   := atom ("^" unary)?
    atom    := NUMBER | IDENT | IDENT "(" args ")" | "(" expr ")"

Recognized functions: ``abs sqrt sin cos tanh exp ln`` (one argument),
``min max`` (two or more), and
``piecewise(cond1: v1, ..., else: vN)`` where each condition is a single
comparison (``< <= > >=``) of two expressions and the ``else`` branch is
mandatory and last.  There are no user-defined functions.

Expressions are immutable; evaluation is pure.  Symbolic differentiation
covers the smooth subset only and fails loudly on ``abs``/``min``/``max``/
``piecewise`` nodes that involve the differentiation variable.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass
from typing import Union

import numpy as np

__all__ = [
    "Expr", "Num", "Var", "Neg", "Func", "Bin", "MinMax", "Cmp", "Piecewise",
    "Env", "ExprError", "ParseError", "EvalError", "UnboundVariableError",
    "DomainError", "NonSmoothError",
    "parse", "to_text", "evaluate", "evaluate_array", "free_vars",
    "differentiate", "fold_constants", "fd_derivative",
]

Env = dict


class ExprError(Exception):
    """Base class for expression-language errors."""


class ParseError(ExprError):
    def __init__(self, message, byte_offset, expected=()):
        self.byte_offset = byte_offset
        self.expected = frozenset(expected)
        detail = f"{message} at byte {byte_offset}"
        if expected:
            detail += " (expected: " + ", ".join(sorted(expected)) + ")"
        super().__init__(detail)


class EvalError(ExprError):
    """Evaluation failure; carries the offending node."""

    def __init__(self, message, node=None):
        self.node = node
        super().__init__(message)


class UnboundVariableError(EvalError):
    pass


class DomainError(EvalError):
    pass


class NonSmoothError(ExprError):
    """Raised by differentiate() on abs/min/max/piecewise involving the variable."""

    def __init__(self, node_kind, node=None):
        self.node_kind = node_kind
        self.node = node
        super().__init__(
            f"cannot differentiate through non-smooth node '{node_kind}'; "
            "use a finite-difference fallback"
        )


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------

class Expr:
    __slots__ = ()


@dataclass(frozen=True)
class Num(Expr):
    value: float


@dataclass(frozen=True)
class Var(Expr):
    name: str


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr


@dataclass(frozen=True)
class Func(Expr):
    """Unary function application: abs, sqrt, sin, cos, tanh, exp, ln."""
    name: str
    arg: Expr


@dataclass(frozen=True)
class Bin(Expr):
    op: str  # one of + - * / ^
    lhs: Expr
    rhs: Expr


@dataclass(frozen=True)
class MinMax(Expr):
    op: str  # "min" | "max"
    args: tuple


@dataclass(frozen=True)
class Cmp(Expr):
    op: str  # one of < <= > >=
    lhs: Expr
    rhs: Expr


@dataclass(frozen=True)
class Piecewise(Expr):
    branches: tuple  # ((Cmp, Expr), ...)
    otherwise: Expr


UNARY_FUNCS = ("abs", "sqrt", "sin", "cos", "tanh", "exp", "ln")
CMP_OPS = ("<", "<=", ">", ">=")


# ---------------------------------------------------------------------------
# Lexer
# ---------------------------------------------------------------------------

_PUNCT = ("<=", ">=", "<", ">", "+", "-", "*", "/", "^", "(", ")", ",", ":")


@dataclass(frozen=True)
class _Token:
    kind: str  # "num" | "ident" | punctuation literal | "end"
    text: str
    pos: int  # character offset


def _byte_offset(text, pos):
    return len(text[:pos].encode("utf-8"))


def _tokenize(text):
    tokens = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and text[i + 1].isdigit()):
            start = i
            while i < n and text[i].isdigit():
                i += 1
            if i < n and text[i] == ".":
                i += 1
                while i < n and text[i].isdigit():
                    i += 1
            if i < n and text[i] in "eE":
                j = i + 1
                if j < n and text[j] in "+-":
                    j += 1
                if j < n and text[j].isdigit():
                    i = j
                    while i < n and text[i].isdigit():
                        i += 1
            tokens.append(_Token("num", text[start:i], start))
            continue
        if c.isalpha() or c == "_":
            start = i
            while i < n and (text[i].isalnum() or text[i] == "_"):
                i += 1
            tokens.append(_Token("ident", text[start:i], start))
            continue
        for p in _PUNCT:
            if text.startswith(p, i):
                tokens.append(_Token(p, p, i))
                i += len(p)
                break
        else:
            raise ParseError(f"unexpected character {c!r}",
                             _byte_offset(text, i), {"number", "identifier", "operator"})
    tokens.append(_Token("end", "", n))
    return tokens


# ---------------------------------------------------------------------------
# Parser (recursive descent)
# ---------------------------------------------------------------------------

class _Parser:
    def __init__(self, text):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def cur(self):
        return self.tokens[self.i]

    def error(self, expected):
        tok = self.cur
        what = "end of input" if tok.kind == "end" else repr(tok.text)
        raise ParseError(f"unexpected {what}",
                         _byte_offset(self.text, tok.pos), expected)

    def eat(self, kind):
        if self.cur.kind != kind:
            self.error({kind})
        tok = self.cur
        self.i += 1
        return tok

    def parse(self):
        e = self.sum()
        if self.cur.kind != "end":
            self.error({"end of input", "operator"})
        return e

    def sum(self):
        e = self.product()
        while self.cur.kind in ("+", "-"):
            op = self.eat(self.cur.kind).kind
            e = Bin(op, e, self.product())
        return e

    def product(self):
        e = self.unary()
        while self.cur.kind in ("*", "/"):
            op = self.eat(self.cur.kind).kind
            e = Bin(op, e, self.unary())
        return e

    def unary(self):
        if self.cur.kind == "-":
            self.eat("-")
            return Neg(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.cur.kind == "^":
            self.eat("^")
            return Bin("^", base, self.unary())
        return base

    def atom(self):
        tok = self.cur
        if tok.kind == "num":
            self.eat("num")
            return Num(float(tok.text))
        if tok.kind == "(":
            self.eat("(")
            e = self.sum()
            self.eat(")")
            return e
        if tok.kind == "ident":
            self.eat("ident")
            name = tok.text
            if self.cur.kind == "(":
                return self.call(name, tok)
            if name == "else":
                raise ParseError("'else' is reserved",
                                 _byte_offset(self.text, tok.pos), {"identifier"})
            return Var(name)
        self.error({"number", "identifier", "("})

    def call(self, name, tok):
        if name == "piecewise":
            return self.piecewise()
        if name not in UNARY_FUNCS and name not in ("min", "max"):
            raise ParseError(f"unknown function '{name}'",
                             _byte_offset(self.text, tok.pos),
                             set(UNARY_FUNCS) | {"min", "max", "piecewise"})
        self.eat("(")
        args = [self.sum()]
        while self.cur.kind == ",":
            self.eat(",")
            args.append(self.sum())
        self.eat(")")
        if name in UNARY_FUNCS:
            if len(args) != 1:
                raise ParseError(f"{name}() takes exactly one argument",
                                 _byte_offset(self.text, tok.pos), {")"})
            return Func(name, args[0])
        if len(args) < 2:
            raise ParseError(f"{name}() takes at least two arguments",
                             _byte_offset(self.text, tok.pos), {","})
        return MinMax(name, tuple(args))

    def piecewise(self):
        self.eat("(")
        branches = []
        otherwise = None
        while True:
            if self.cur.kind == "ident" and self.cur.text == "else":
                self.eat("ident")
                self.eat(":")
                otherwise = self.sum()
                break
            lhs = self.sum()
            if self.cur.kind not in CMP_OPS:
                self.error(set(CMP_OPS))
            op = self.eat(self.cur.kind).kind
            rhs = self.sum()
            self.eat(":")
            branches.append((Cmp(op, lhs, rhs), self.sum()))
            self.eat(",")
        self.eat(")")
        if otherwise is None:
            self.error({"else"})
        return Piecewise(tuple(branches), otherwise)


def parse(text):
    """Parse an expression string into an AST.

    Raises ParseError with the byte offset and the expected-token set.
    """
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# Printer
# ---------------------------------------------------------------------------

_LEVEL_SUM, _LEVEL_PROD, _LEVEL_UNARY, _LEVEL_POW, _LEVEL_ATOM = 1, 2, 3, 4, 5


def _level(e):
    if isinstance(e, Num):
        # negative literal prints with a leading '-', so it binds like a Neg
        return _LEVEL_UNARY if math.copysign(1.0, e.value) < 0 else _LEVEL_ATOM
    if isinstance(e, (Var, Func, MinMax, Piecewise)):
        return _LEVEL_ATOM
    if isinstance(e, Neg):
        return _LEVEL_UNARY
    if isinstance(e, Bin):
        return {"+": _LEVEL_SUM, "-": _LEVEL_SUM,
                "*": _LEVEL_PROD, "/": _LEVEL_PROD,
                "^": _LEVEL_POW}[e.op]
    raise TypeError(f"not an expression: {e!r}")


def _wrap(e, minimum):
    s = to_text(e)
    return f"({s})" if _level(e) < minimum else s


def to_text(e):
    """Render an AST back to parseable source text."""
    if isinstance(e, Num):
        return repr(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        return "-" + _wrap(e.arg, _LEVEL_UNARY)
    if isinstance(e, Func):
        return f"{e.name}({to_text(e.arg)})"
    if isinstance(e, MinMax):
        return f"{e.op}(" + ", ".join(to_text(a) for a in e.args) + ")"
    if isinstance(e, Cmp):
        return f"{to_text(e.lhs)} {e.op} {to_text(e.rhs)}"
    if isinstance(e, Piecewise):
        parts = [f"{to_text(c)}: {to_text(v)}" for c, v in e.branches]
        parts.append(f"else: {to_text(e.otherwise)}")
        return "piecewise(" + ", ".join(parts) + ")"
    if isinstance(e, Bin):
        if e.op == "^":
            # right-assoc; exponent at unary level, base must be atomic
            return _wrap(e.lhs, _LEVEL_ATOM) + "^" + _wrap(e.rhs, _LEVEL_UNARY)
        lvl = _level(e)
        left = _wrap(e.lhs, lvl)
        right = _wrap(e.rhs, lvl + 1)  # left-assoc: parenthesize equal-level rhs
        return f"{left}{e.op}{right}" if e.op in "*/" else f"{left} {e.op} {right}"
    raise TypeError(f"not an expression: {e!r}")


# A negative literal prints as "-c", which re-parses as Neg(Num(c)); such
# literals only arise from constant folding, never from parse() itself.


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def free_vars(e):
    """Set of variable names occurring in the expression."""
    if isinstance(e, Num):
        return frozenset()
    if isinstance(e, Var):
        return frozenset((e.name,))
    if isinstance(e, Neg):
        return free_vars(e.arg)
    if isinstance(e, Func):
        return free_vars(e.arg)
    if isinstance(e, Bin):
        return free_vars(e.lhs) | free_vars(e.rhs)
    if isinstance(e, Cmp):
        return free_vars(e.lhs) | free_vars(e.rhs)
    if isinstance(e, MinMax):
        out = frozenset()
        for a in e.args:
            out |= free_vars(a)
        return out
    if isinstance(e, Piecewise):
        out = free_vars(e.otherwise)
        for c, v in e.branches:
            out |= free_vars(c) | free_vars(v)
        return out
    raise TypeError(f"not an expression: {e!r}")


def _cmp(op, a, b):
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    return a >= b


def evaluate(e, env):
    """Evaluate to an IEEE double.  Strict: unbound variables and domain
    violations (sqrt of a negative, ln of a non-positive, division by zero,
    invalid powers) raise, reporting the offending node and arguments."""
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        try:
            return float(env[e.name])
        except KeyError:
            raise UnboundVariableError(f"unbound variable '{e.name}'", e) from None
    if isinstance(e, Neg):
        return -evaluate(e.arg, env)
    if isinstance(e, Func):
        x = evaluate(e.arg, env)
        if e.name == "abs":
            return abs(x)
        if e.name == "sqrt":
            if x < 0.0:
                raise DomainError(f"sqrt of negative argument {x!r}", e)
            return math.sqrt(x)
        if e.name == "sin":
            return math.sin(x)
        if e.name == "cos":
            return math.cos(x)
        if e.name == "tanh":
            return math.tanh(x)
        if e.name == "exp":
            return math.exp(x)
        if e.name == "ln":
            if x <= 0.0:
                raise DomainError(f"ln of non-positive argument {x!r}", e)
            return math.log(x)
        raise EvalError(f"unknown function '{e.name}'", e)
    if isinstance(e, Bin):
        a = evaluate(e.lhs, env)
        b = evaluate(e.rhs, env)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        if e.op == "/":
            if b == 0.0:
                raise DomainError(f"division by zero ({a!r}/{b!r})", e)
            return a / b
        # power
        try:
            return math.pow(a, b)
        except (ValueError, OverflowError) as exc:
            raise DomainError(f"invalid power {a!r}^{b!r}: {exc}", e) from None
    if isinstance(e, MinMax):
        vals = [evaluate(a, env) for a in e.args]
        return min(vals) if e.op == "min" else max(vals)
    if isinstance(e, Piecewise):
        for cond, val in e.branches:
            if _cmp(cond.op, evaluate(cond.lhs, env), evaluate(cond.rhs, env)):
                return evaluate(val, env)
        return evaluate(e.otherwise, env)
    raise TypeError(f"not an expression: {e!r}")


def evaluate_array(e, env):
    """Vectorized evaluation over numpy arrays in ``env``.

    Non-strict: domain violations yield nan/inf instead of raising (callers
    in the numeric layers check finiteness themselves).
    """
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        try:
            return env[e.name]
        except KeyError:
            raise UnboundVariableError(f"unbound variable '{e.name}'", e) from None
    if isinstance(e, Neg):
        return -evaluate_array(e.arg, env)
    if isinstance(e, Func):
        x = evaluate_array(e.arg, env)
        with np.errstate(all="ignore"):
            if e.name == "abs":
                return np.abs(x)
            if e.name == "sqrt":
                return np.sqrt(x)
            if e.name == "sin":
                return np.sin(x)
            if e.name == "cos":
                return np.cos(x)
            if e.name == "tanh":
                return np.tanh(x)
            if e.name == "exp":
                return np.exp(x)
            if e.name == "ln":
                return np.log(x)
        raise EvalError(f"unknown function '{e.name}'", e)
    if isinstance(e, Bin):
        a = evaluate_array(e.lhs, env)
        b = evaluate_array(e.rhs, env)
        with np.errstate(all="ignore"):
            if e.op == "+":
                return a + b
            if e.op == "-":
                return a - b
            if e.op == "*":
                return a * b
            if e.op == "/":
                return a / b
            return np.power(a, b)
    if isinstance(e, MinMax):
        vals = [evaluate_array(a, env) for a in e.args]
        out = vals[0]
        for v in vals[1:]:
            out = np.minimum(out, v) if e.op == "min" else np.maximum(out, v)
        return out
    if isinstance(e, Piecewise):
        conds = [_cmp(c.op, evaluate_array(c.lhs, env), evaluate_array(c.rhs, env))
                 for c, _ in e.branches]
        vals = [evaluate_array(v, env) for _, v in e.branches]
        default = evaluate_array(e.otherwise, env)
        return np.select(conds, vals, default=default)
    raise TypeError(f"not an expression: {e!r}")


# ---------------------------------------------------------------------------
# Differentiation (smooth subset)
# ---------------------------------------------------------------------------

def _is_num(e, value=None):
    return isinstance(e, Num) and (value is None or e.value == value)


def _neg(u):
    if _is_num(u):
        return Num(-u.value)
    if isinstance(u, Neg):
        return u.arg
    return Neg(u)


def _add(u, v):
    if _is_num(u) and _is_num(v):
        return Num(u.value + v.value)
    if _is_num(u, 0.0):
        return v
    if _is_num(v, 0.0):
        return u
    return Bin("+", u, v)


def _sub(u, v):
    if _is_num(u) and _is_num(v):
        return Num(u.value - v.value)
    if _is_num(v, 0.0):
        return u
    if _is_num(u, 0.0):
        return _neg(v)
    return Bin("-", u, v)


def _mul(u, v):
    if _is_num(u) and _is_num(v):
        return Num(u.value * v.value)
    if _is_num(u, 0.0) or _is_num(v, 0.0):
        return Num(0.0)
    if _is_num(u, 1.0):
        return v
    if _is_num(v, 1.0):
        return u
    return Bin("*", u, v)


def _div(u, v):
    if _is_num(u, 0.0):
        return Num(0.0)
    if _is_num(v, 1.0):
        return u
    if _is_num(u) and _is_num(v) and v.value != 0.0:
        return Num(u.value / v.value)
    return Bin("/", u, v)


def _pow(u, v):
    if _is_num(v, 1.0):
        return u
    if _is_num(v, 0.0):
        return Num(1.0)
    if _is_num(u) and _is_num(v):
        try:
            return Num(math.pow(u.value, v.value))
        except (ValueError, OverflowError):
            pass
    return Bin("^", u, v)


def fold_constants(e):
    """Collapse constant subtrees to literals and apply the arithmetic
    identities (x+0, x*1, x*0, x^1, ...).  Constant subtrees whose
    evaluation hits a domain error are left symbolic."""
    if isinstance(e, (Num, Var)):
        return e
    if isinstance(e, Neg):
        out = _neg(fold_constants(e.arg))
    elif isinstance(e, Func):
        out = Func(e.name, fold_constants(e.arg))
    elif isinstance(e, Bin):
        a, b = fold_constants(e.lhs), fold_constants(e.rhs)
        out = {"+": _add, "-": _sub, "*": _mul, "/": _div, "^": _pow}[e.op](a, b)
    elif isinstance(e, MinMax):
        out = MinMax(e.op, tuple(fold_constants(a) for a in e.args))
    elif isinstance(e, Cmp):
        out = Cmp(e.op, fold_constants(e.lhs), fold_constants(e.rhs))
    elif isinstance(e, Piecewise):
        out = Piecewise(tuple((fold_constants(c), fold_constants(v))
                              for c, v in e.branches),
                        fold_constants(e.otherwise))
    else:
        raise TypeError(f"not an expression: {e!r}")
    if not isinstance(out, (Num, Cmp, Piecewise)) and not free_vars(out):
        try:
            return Num(evaluate(out, {}))
        except ExprError:
            pass
    return out


def differentiate(e, var):
    """Exact symbolic derivative d(e)/d(var) over the smooth grammar subset.

    abs/min/max/piecewise nodes whose subtree mentions ``var`` raise
    NonSmoothError; nodes not involving ``var`` differentiate to zero.
    The result is folded (constants and arithmetic identities) so that e.g.
    d(p*V)/dV comes back as ``p``.
    """
    return fold_constants(_diff(e, var))


def _diff(e, var):
    if isinstance(e, Num):
        return Num(0.0)
    if isinstance(e, Var):
        return Num(1.0) if e.name == var else Num(0.0)
    if var not in free_vars(e):
        return Num(0.0)
    if isinstance(e, Neg):
        return _neg(_diff(e.arg, var))
    if isinstance(e, Func):
        u, du = e.arg, _diff(e.arg, var)
        if e.name == "abs":
            raise NonSmoothError("abs", e)
        if e.name == "sqrt":
            return _div(du, _mul(Num(2.0), Func("sqrt", u)))
        if e.name == "sin":
            return _mul(Func("cos", u), du)
        if e.name == "cos":
            return _neg(_mul(Func("sin", u), du))
        if e.name == "tanh":
            return _mul(_sub(Num(1.0), _pow(Func("tanh", u), Num(2.0))), du)
        if e.name == "exp":
            return _mul(Func("exp", u), du)
        if e.name == "ln":
            return _div(du, u)
        raise EvalError(f"unknown function '{e.name}'", e)
    if isinstance(e, Bin):
        u, v = e.lhs, e.rhs
        if e.op == "+":
            return _add(_diff(u, var), _diff(v, var))
        if e.op == "-":
            return _sub(_diff(u, var), _diff(v, var))
        if e.op == "*":
            return _add(_mul(_diff(u, var), v), _mul(u, _diff(v, var)))
        if e.op == "/":
            num = _sub(_mul(_diff(u, var), v), _mul(u, _diff(v, var)))
            return _div(num, _pow(v, Num(2.0)))
        # power: split on which side involves var
        u_has = var in free_vars(u)
        v_has = var in free_vars(v)
        if u_has and not v_has:
            du = _diff(u, var)
            return _mul(_mul(v, _pow(u, _sub(v, Num(1.0)))), du)
        if v_has and not u_has:
            dv = _diff(v, var)
            return _mul(_mul(Bin("^", u, v), Func("ln", u)), dv)
        du, dv = _diff(u, var), _diff(v, var)
        inner = _add(_mul(dv, Func("ln", u)), _div(_mul(v, du), u))
        return _mul(Bin("^", u, v), inner)
    if isinstance(e, MinMax):
        raise NonSmoothError(e.op, e)
    if isinstance(e, Piecewise):
        raise NonSmoothError("piecewise", e)
    if isinstance(e, Cmp):
        raise NonSmoothError("comparison", e)
    raise TypeError(f"not an expression: {e!r}")


_FD_H0 = sys.float_info.epsilon ** (1.0 / 3.0)


def fd_derivative(f, v):
    """Central finite difference (f(v+h)-f(v-h))/(2h), h = cbrt(eps)*max(1,|v|)."""
    h = _FD_H0 * max(1.0, abs(v))
    return (f(v + h) - f(v - h)) / (2.0 * h)

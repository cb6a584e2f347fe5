"""Immutable expression trees with parsing, differentiation and canonical simplification.

Node kinds: constants, variables, n-ary sums and products, powers with rational
exponents, quotients, and the unary functions sin, cos, exp, log, sqrt, tanh.
Trees are hashable values; every operation returns a new tree.

Canonical form (as produced by :func:`simplify`): sums and products are
flattened and sorted by a total node ordering, constants are folded, like
terms/factors are collected, quotients become negative powers and ``sqrt``
becomes ``^(1/2)``.  ``simplify`` is idempotent and value-preserving.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Iterable, Mapping, Union

__all__ = [
    "Expr",
    "Const",
    "Var",
    "Sum",
    "Prod",
    "Pow",
    "Quot",
    "Call",
    "EvalError",
    "ParseError",
    "FUNCTIONS",
    "parse_expr",
    "to_str",
    "simplify",
    "diff",
    "substitute",
    "evaluate",
    "free_variables",
    "is_identically_zero",
    "compile_exprs",
]

FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt", "tanh")

Number = Union[int, float, Fraction]


class EvalError(ValueError):
    """Evaluation failed: missing binding or domain error (sqrt of a negative,
    log of a non-positive, division by zero).  Carries the offending subtree."""

    def __init__(self, message: str, subtree: "Expr | None" = None):
        super().__init__(message if subtree is None else f"{message}: {to_str(subtree)}")
        self.subtree = subtree


class ParseError(ValueError):
    """Syntax or symbol error, with the 0-based position in the source text."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class Expr:
    """Base class for expression nodes.  Arithmetic operators build new trees."""

    __slots__ = ()

    def __add__(self, other):
        return Sum((self, _coerce(other)))

    def __radd__(self, other):
        return Sum((_coerce(other), self))

    def __sub__(self, other):
        return Sum((self, Prod((Const(-1.0), _coerce(other)))))

    def __rsub__(self, other):
        return Sum((_coerce(other), Prod((Const(-1.0), self))))

    def __mul__(self, other):
        return Prod((self, _coerce(other)))

    def __rmul__(self, other):
        return Prod((_coerce(other), self))

    def __truediv__(self, other):
        return Quot(self, _coerce(other))

    def __rtruediv__(self, other):
        return Quot(_coerce(other), self)

    def __pow__(self, exponent):
        return Pow(self, Fraction(exponent))

    def __neg__(self):
        return Prod((Const(-1.0), self))

    def __str__(self):
        return to_str(self)


def _coerce(value) -> Expr:
    if isinstance(value, Expr):
        return value
    if isinstance(value, (int, float, Fraction)):
        return Const(float(value))
    raise TypeError(f"cannot use {type(value).__name__} in an expression")


@dataclass(frozen=True, slots=True)
class Const(Expr):
    value: float

    def __post_init__(self):
        # normalise -0.0 and integral floats so equal values hash equally
        object.__setattr__(self, "value", float(self.value) + 0.0)


@dataclass(frozen=True, slots=True)
class Var(Expr):
    name: str


@dataclass(frozen=True, slots=True)
class Sum(Expr):
    terms: tuple


@dataclass(frozen=True, slots=True)
class Prod(Expr):
    factors: tuple


@dataclass(frozen=True, slots=True)
class Pow(Expr):
    base: Expr
    exponent: Fraction


@dataclass(frozen=True, slots=True)
class Quot(Expr):
    num: Expr
    den: Expr


@dataclass(frozen=True, slots=True)
class Call(Expr):
    fn: str
    arg: Expr


ZERO = Const(0.0)
ONE = Const(1.0)
HALF = Fraction(1, 2)


# ---------------------------------------------------------------------------
# total node ordering


@lru_cache(maxsize=None)
def _key(e: Expr) -> str:
    if isinstance(e, Const):
        return f"c:{e.value!r}"
    if isinstance(e, Var):
        return f"v:{e.name}"
    if isinstance(e, Pow):
        return f"p({_key(e.base)};{e.exponent})"
    if isinstance(e, Call):
        return f"f:{e.fn}({_key(e.arg)})"
    if isinstance(e, Prod):
        return "m(" + ";".join(_key(f) for f in e.factors) + ")"
    if isinstance(e, Sum):
        return "s(" + ";".join(_key(t) for t in e.terms) + ")"
    if isinstance(e, Quot):
        return f"q({_key(e.num)};{_key(e.den)})"
    raise TypeError(type(e))


# ---------------------------------------------------------------------------
# simplification


def simplify(e: Expr) -> Expr:
    """Return the canonical form of ``e`` (idempotent, value-preserving)."""
    return _canon(e)


def _as_fraction(value: float) -> Fraction | None:
    """Exact small-denominator rational for a float, or None."""
    if value != value or value in (math.inf, -math.inf):
        return None
    frac = Fraction(value).limit_denominator(64)
    return frac if float(frac) == value else None


def _fold_pow(base: float, exponent: Fraction) -> float | None:
    """Constant power when exactly defined over the reals, else None."""
    if exponent.denominator == 1:
        n = exponent.numerator
        if base == 0.0 and n < 0:
            return None
        try:
            return float(base**n)
        except OverflowError:
            return math.inf if base > 0 or n % 2 == 0 else -math.inf
    if base > 0.0:
        root = base ** (1.0 / exponent.denominator)
        if abs(round(root) ** exponent.denominator - base) < 1e-12 and round(root) > 0:
            return float(round(root) ** exponent.numerator)
        return None  # keep e.g. sqrt(3) symbolic
    if base == 0.0:
        return 0.0 if exponent > 0 else None
    return None


_CALL_FOLD = {
    "sin": math.sin,
    "cos": math.cos,
    "exp": math.exp,
    "log": math.log,
    "tanh": math.tanh,
}


@lru_cache(maxsize=200_000)
def _canon(e: Expr) -> Expr:
    if isinstance(e, (Const, Var)):
        return Const(e.value) if isinstance(e, Const) else e

    if isinstance(e, Quot):
        return _canon(Prod((e.num, Pow(e.den, Fraction(-1)))))

    if isinstance(e, Call):
        if e.fn == "sqrt":
            return _canon(Pow(e.arg, HALF))
        arg = _canon(e.arg)
        if isinstance(arg, Const):
            try:
                return Const(_CALL_FOLD[e.fn](arg.value))
            except (ValueError, OverflowError):
                pass  # e.g. log(0): keep symbolic, fails at evaluation
        return Call(e.fn, arg)

    if isinstance(e, Pow):
        return _canon_pow(_canon(e.base), e.exponent)

    if isinstance(e, Prod):
        return _canon_prod(e.factors)

    if isinstance(e, Sum):
        return _canon_sum(e.terms)

    raise TypeError(type(e))


def _canon_pow(base: Expr, exponent: Fraction) -> Expr:
    if exponent == 0:
        return ONE
    if exponent == 1:
        return base
    if isinstance(base, Const):
        folded = _fold_pow(base.value, exponent)
        if folded is not None:
            return Const(folded)
        return Pow(base, exponent)
    if isinstance(base, Pow):
        # (u^a)^b -> u^(ab) only when sign information cannot be lost
        if exponent.denominator == 1 or base.exponent.numerator % 2 == 1:
            return _canon_pow(base.base, base.exponent * exponent)
        return Pow(base, exponent)
    if isinstance(base, Prod) and exponent.denominator == 1:
        return _canon_prod(tuple(Pow(f, exponent) for f in base.factors))
    return Pow(base, exponent)


def _canon_prod(factors: Iterable[Expr]) -> Expr:
    coeff = 1.0
    powers: dict[str, tuple[Expr, Fraction]] = {}

    def absorb(f: Expr):
        nonlocal coeff
        if isinstance(f, Const):
            coeff *= f.value
            return
        if isinstance(f, Prod):
            for sub in f.factors:
                absorb(sub)
            return
        base, exp = (f.base, f.exponent) if isinstance(f, Pow) else (f, Fraction(1))
        k = _key(base)
        if k in powers:
            powers[k] = (base, powers[k][1] + exp)
        else:
            powers[k] = (base, exp)

    for f in factors:
        absorb(_canon(f))

    if coeff == 0.0:
        return ZERO

    rebuilt = []
    for base, exp in powers.values():
        piece = _canon_pow(base, exp)
        if isinstance(piece, Const):
            coeff *= piece.value
        elif isinstance(piece, Prod):  # a merged power may itself expand
            for sub in piece.factors:
                if isinstance(sub, Const):
                    coeff *= sub.value
                else:
                    rebuilt.append(sub)
        else:
            rebuilt.append(piece)
    if coeff == 0.0:
        return ZERO

    rebuilt.sort(key=_key)
    if not rebuilt:
        return Const(coeff)
    # distribute a bare constant over a lone sum: c*(a+b) -> c*a + c*b
    if coeff != 1.0 and len(rebuilt) == 1 and isinstance(rebuilt[0], Sum):
        return _canon_sum(tuple(Prod((Const(coeff), t)) for t in rebuilt[0].terms))
    if len(rebuilt) == 1 and coeff == 1.0:
        return rebuilt[0]
    if coeff != 1.0:
        return Prod(tuple([Const(coeff)] + rebuilt))
    return Prod(tuple(rebuilt))


def _split_coeff(term: Expr) -> tuple[float, Expr | None]:
    """Split a canonical term into (constant coefficient, remaining part)."""
    if isinstance(term, Const):
        return term.value, None
    if isinstance(term, Prod) and isinstance(term.factors[0], Const):
        rest = term.factors[1:]
        return term.factors[0].value, rest[0] if len(rest) == 1 else Prod(rest)
    return 1.0, term


def _canon_sum(terms: Iterable[Expr]) -> Expr:
    const_part = 0.0
    collected: dict[str, tuple[Expr, float]] = {}

    def absorb(t: Expr):
        nonlocal const_part
        if isinstance(t, Sum):
            for sub in t.terms:
                absorb(sub)
            return
        coeff, rest = _split_coeff(t)
        if rest is None:
            const_part += coeff
            return
        k = _key(rest)
        if k in collected:
            collected[k] = (rest, collected[k][1] + coeff)
        else:
            collected[k] = (rest, coeff)

    for t in terms:
        absorb(_canon(t))

    rebuilt = []
    for rest, coeff in collected.values():
        if coeff == 0.0:
            continue
        if coeff == 1.0:
            rebuilt.append(rest)
        elif isinstance(rest, Prod):
            rebuilt.append(Prod((Const(coeff),) + rest.factors))
        else:
            rebuilt.append(Prod((Const(coeff), rest)))
    rebuilt.sort(key=_key)

    if const_part != 0.0 or not rebuilt:
        rebuilt.insert(0, Const(const_part))
    if len(rebuilt) == 1:
        return rebuilt[0]
    return Sum(tuple(rebuilt))


# ---------------------------------------------------------------------------
# differentiation


def diff(e: Expr, name: str, order: int = 1) -> Expr:
    """Exact partial derivative of ``e`` with respect to the variable ``name``.

    The result is simplified.  Subtrees that do not depend on ``name``
    differentiate to zero, so the operation is total.
    """
    result = simplify(e)
    for _ in range(order):
        result = _canon(_diff(result, name))
    return result


@lru_cache(maxsize=200_000)
def _diff(e: Expr, name: str) -> Expr:
    if isinstance(e, Const):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.name == name else ZERO
    if isinstance(e, Sum):
        return Sum(tuple(_diff(t, name) for t in e.terms))
    if isinstance(e, Prod):
        pieces = []
        for i, f in enumerate(e.factors):
            pieces.append(Prod(e.factors[:i] + (_diff(f, name),) + e.factors[i + 1 :]))
        return Sum(tuple(pieces))
    if isinstance(e, Pow):
        du = _diff(e.base, name)
        return Prod((Const(float(e.exponent)), Pow(e.base, e.exponent - 1), du))
    if isinstance(e, Quot):
        n, d = e.num, e.den
        return Quot(
            Sum((Prod((_diff(n, name), d)), Prod((Const(-1.0), n, _diff(d, name))))),
            Pow(d, Fraction(2)),
        )
    if isinstance(e, Call):
        du = _diff(e.arg, name)
        u = e.arg
        if e.fn == "sin":
            outer = Call("cos", u)
        elif e.fn == "cos":
            outer = Prod((Const(-1.0), Call("sin", u)))
        elif e.fn == "exp":
            outer = Call("exp", u)
        elif e.fn == "log":
            outer = Pow(u, Fraction(-1))
        elif e.fn == "sqrt":
            outer = Prod((Const(0.5), Pow(u, Fraction(-1, 2))))
        elif e.fn == "tanh":
            outer = Sum((ONE, Prod((Const(-1.0), Pow(Call("tanh", u), Fraction(2))))))
        else:
            raise TypeError(e.fn)
        return Prod((outer, du))
    raise TypeError(type(e))


# ---------------------------------------------------------------------------
# substitution, free variables, evaluation


def substitute(e: Expr, replacements: Mapping[str, Expr]) -> Expr:
    """Replace variables by expressions, then simplify."""
    return simplify(_subst(e, tuple(sorted(replacements.items()))))


def _subst(e: Expr, items: tuple) -> Expr:
    table = dict(items)

    def walk(node: Expr) -> Expr:
        if isinstance(node, Var):
            return table.get(node.name, node)
        if isinstance(node, Const):
            return node
        if isinstance(node, Sum):
            return Sum(tuple(walk(t) for t in node.terms))
        if isinstance(node, Prod):
            return Prod(tuple(walk(f) for f in node.factors))
        if isinstance(node, Pow):
            return Pow(walk(node.base), node.exponent)
        if isinstance(node, Quot):
            return Quot(walk(node.num), walk(node.den))
        if isinstance(node, Call):
            return Call(node.fn, walk(node.arg))
        raise TypeError(type(node))

    return walk(e)


@lru_cache(maxsize=200_000)
def free_variables(e: Expr) -> frozenset[str]:
    if isinstance(e, Var):
        return frozenset((e.name,))
    if isinstance(e, Const):
        return frozenset()
    if isinstance(e, Sum):
        return frozenset().union(*(free_variables(t) for t in e.terms))
    if isinstance(e, Prod):
        return frozenset().union(*(free_variables(f) for f in e.factors))
    if isinstance(e, Pow):
        return free_variables(e.base)
    if isinstance(e, Quot):
        return free_variables(e.num) | free_variables(e.den)
    if isinstance(e, Call):
        return free_variables(e.arg)
    raise TypeError(type(e))


def _rational_pow(base: float, exponent: Fraction, node: Expr) -> float:
    if exponent.denominator == 1:
        n = exponent.numerator
        if base == 0.0 and n < 0:
            raise EvalError("division by zero", node)
        try:
            return float(base**n)
        except OverflowError:
            return math.inf if base > 0 or n % 2 == 0 else -math.inf
    if base > 0.0:
        try:
            return base ** float(exponent)
        except OverflowError:
            return math.inf
    if base == 0.0:
        if exponent > 0:
            return 0.0
        raise EvalError("division by zero", node)
    if exponent.denominator % 2 == 1:
        sign = -1.0 if exponent.numerator % 2 == 1 else 1.0
        return sign * (-base) ** float(exponent)
    raise EvalError("fractional power of a negative value", node)


def evaluate(e: Expr, binding: Mapping[str, float]) -> float:
    """Evaluate ``e`` at a total binding using IEEE double arithmetic.

    Raises :class:`EvalError` for a missing binding or a domain error,
    reporting the offending subtree.
    """
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        try:
            return float(binding[e.name])
        except KeyError:
            raise EvalError(f"missing binding for '{e.name}'", e) from None
    if isinstance(e, Sum):
        return math.fsum(evaluate(t, binding) for t in e.terms)
    if isinstance(e, Prod):
        out = 1.0
        for f in e.factors:
            out *= evaluate(f, binding)
        return out
    if isinstance(e, Pow):
        return _rational_pow(evaluate(e.base, binding), e.exponent, e)
    if isinstance(e, Quot):
        den = evaluate(e.den, binding)
        if den == 0.0:
            raise EvalError("division by zero", e)
        return evaluate(e.num, binding) / den
    if isinstance(e, Call):
        v = evaluate(e.arg, binding)
        if e.fn == "sqrt":
            if v < 0.0:
                raise EvalError("sqrt of a negative value", e)
            return math.sqrt(v)
        if e.fn == "log":
            if v <= 0.0:
                raise EvalError("log of a non-positive value", e)
            return math.log(v)
        if e.fn == "exp":
            try:
                return math.exp(v)
            except OverflowError:
                return math.inf
        return getattr(math, e.fn)(v)
    raise TypeError(type(e))


# ---------------------------------------------------------------------------
# zero testing


_PROBE_SEED = 0xFB1C5EED


def probe_values(
    e: Expr,
    count: int = 16,
    include_zero_axes: bool = False,
    seed: int = _PROBE_SEED,
) -> list[float]:
    """Evaluate ``e`` at deterministic pseudo-random bindings.

    Bindings triggering domain errors are skipped.  With
    ``include_zero_axes`` the samples also pin each free variable to zero in
    turn (used to detect coefficients vanishing on part of the domain).
    """
    names = sorted(free_variables(e))
    rng = random.Random(seed)
    values: list[float] = []

    def sample() -> dict[str, float]:
        return {n: rng.uniform(-2.3, 2.9) for n in names}

    attempts = 0
    while len(values) < count and attempts < 16 * count:
        attempts += 1
        try:
            values.append(evaluate(e, sample()))
        except EvalError:
            continue
    if include_zero_axes:
        for pinned in names:
            for _ in range(4):
                b = sample()
                b[pinned] = 0.0
                try:
                    values.append(evaluate(e, b))
                    break
                except EvalError:
                    continue
    return values


def is_identically_zero(e: Expr) -> bool:
    """Conservative zero test: canonical form is the literal constant 0,
    confirmed by probing 16 random bindings (|value| < 1e-10).

    A ``False`` result means "not provably zero"."""
    if _canon(e) != ZERO:
        return False
    return all(abs(v) < 1e-10 for v in probe_values(e))


# ---------------------------------------------------------------------------
# parsing


class _Token:
    __slots__ = ("kind", "text", "pos")

    def __init__(self, kind, text, pos):
        self.kind, self.text, self.pos = kind, text, pos


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    i, n = 0, len(text)
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
            tokens.append(_Token("num", text[i:j], i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(_Token("name", text[i:j], i))
            i = j
            continue
        if c in "+-*/^(),":
            tokens.append(_Token(c, c, i))
            i += 1
            continue
        raise ParseError(f"unexpected character {c!r}", i)
    tokens.append(_Token("end", "", n))
    return tokens


class _Parser:
    def __init__(self, text: str, symbols: frozenset[str]):
        self.tokens = _tokenize(text)
        self.i = 0
        self.symbols = symbols

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def take(self, kind: str | None = None) -> _Token:
        tok = self.tokens[self.i]
        if kind is not None and tok.kind != kind:
            raise ParseError(f"expected {kind!r}, found {tok.text or 'end of input'!r}", tok.pos)
        self.i += 1
        return tok

    def expression(self) -> Expr:
        node = self.term()
        while self.peek().kind in ("+", "-"):
            op = self.take()
            rhs = self.term()
            node = node + rhs if op.kind == "+" else node - rhs
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.peek().kind in ("*", "/"):
            op = self.take()
            rhs = self.unary()
            node = Prod((node, rhs)) if op.kind == "*" else Quot(node, rhs)
        return node

    def unary(self) -> Expr:
        if self.peek().kind == "-":
            self.take()
            return Prod((Const(-1.0), self.unary()))
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.peek().kind == "^":
            tok = self.take()
            exponent = self.unary()  # right-associative, binds unary minus
            return _make_power(base, exponent, tok.pos)
        return base

    def atom(self) -> Expr:
        tok = self.peek()
        if tok.kind == "num":
            self.take()
            return Const(float(tok.text))
        if tok.kind == "name":
            self.take()
            if self.peek().kind == "(":
                if tok.text not in FUNCTIONS:
                    raise ParseError(f"unknown function '{tok.text}'", tok.pos)
                self.take("(")
                arg = self.expression()
                self.take(")")
                return Call(tok.text, arg)
            if tok.text not in self.symbols:
                raise ParseError(f"undeclared symbol '{tok.text}'", tok.pos)
            return Var(tok.text)
        if tok.kind == "(":
            self.take("(")
            node = self.expression()
            self.take(")")
            return node
        raise ParseError(f"expected a value, found {tok.text or 'end of input'!r}", tok.pos)


def _make_power(base: Expr, exponent: Expr, pos: int) -> Expr:
    exp_canon = _canon(exponent)
    if isinstance(exp_canon, Const):
        frac = _as_fraction(exp_canon.value)
        if frac is not None:
            return Pow(base, frac)
    # general a^b with non-rational exponent
    return Call("exp", Prod((exponent, Call("log", base))))


def parse_expr(text: str, symbols: Iterable[str] = ()) -> Expr:
    """Parse an infix expression over the declared symbol names (plus ``t``).

    Supports ``+ - * / ^`` (``^`` right-associative with rational exponents),
    function calls and numeric literals.  Raises :class:`ParseError` with the
    offending position for syntax errors and undeclared symbols.
    """
    parser = _Parser(text, frozenset(symbols) | {"t"})
    node = parser.expression()
    trailing = parser.peek()
    if trailing.kind != "end":
        raise ParseError(f"unexpected trailing input {trailing.text!r}", trailing.pos)
    return node


# ---------------------------------------------------------------------------
# printing


def _fmt_const(v: float) -> str:
    if v == math.inf:
        return "1e400"
    if v == -math.inf:
        return "-1e400"
    if v.is_integer() and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def to_str(e: Expr) -> str:
    """Deterministic infix rendering that parses back to an equivalent tree."""
    return _render(e, 0)


# precedence levels: sum=1, product=2, unary=3, power=4, atom=5
def _render(e: Expr, context: int) -> str:
    if isinstance(e, Const):
        s = _fmt_const(e.value)
        if e.value < 0 and context >= 2:
            return f"({s})"
        return s
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Call):
        return f"{e.fn}({_render(e.arg, 0)})"
    if isinstance(e, Sum):
        parts = []
        for i, term in enumerate(e.terms):
            coeff, rest = _split_coeff(term)
            if i > 0 and (coeff < 0 or (rest is None and coeff < 0)):
                neg = _canon_prod((Const(-1.0), term)) if rest is not None else Const(-coeff)
                parts.append(" - " + _render(neg, 2))
            elif i > 0:
                parts.append(" + " + _render(term, 2))
            else:
                parts.append(_render(term, 1))
        s = "".join(parts)
        return f"({s})" if context >= 2 else s
    if isinstance(e, Prod):
        num_parts, den_parts = [], []
        for f in e.factors:
            if isinstance(f, Pow) and f.exponent < 0:
                den_parts.append(_render(_canon_pow(f.base, -f.exponent), 3))
            else:
                num_parts.append(_render(f, 2))
        if num_parts and num_parts[0] == "-1" and len(num_parts) > 1:
            num = "-" + "*".join(num_parts[1:])
        else:
            num = "*".join(num_parts) if num_parts else "1"
        if den_parts:
            den = "*".join(den_parts)
            s = f"{num}/({den})" if len(den_parts) > 1 else f"{num}/{den_parts[0]}"
        else:
            s = num
        if context >= 3 or (context >= 2 and s.startswith("-")):
            return f"({s})"
        return s
    if isinstance(e, Quot):
        return _wrap(f"{_render(e.num, 2)}/{_render(e.den, 3)}", context >= 3)
    if isinstance(e, Pow):
        if e.exponent == HALF:
            return f"sqrt({_render(e.base, 0)})"
        base = _render(e.base, 4)
        if e.exponent.denominator == 1:
            n = e.exponent.numerator
            exp_s = str(n) if n >= 0 else f"(-{-n})"
        else:
            exp_s = f"({e.exponent.numerator}/{e.exponent.denominator})"
        return f"{base}^{exp_s}"
    raise TypeError(type(e))


def _wrap(s: str, needed: bool) -> str:
    return f"({s})" if needed else s


# ---------------------------------------------------------------------------
# compilation to plain Python (used by the simulator's inner loop)


def _codegen(e: Expr, names: Mapping[str, str]) -> str:
    if isinstance(e, Const):
        return f"({_fmt_const(e.value)})"
    if isinstance(e, Var):
        try:
            return names[e.name]
        except KeyError:
            raise EvalError(f"missing binding for '{e.name}'", e) from None
    if isinstance(e, Sum):
        return "(" + "+".join(_codegen(t, names) for t in e.terms) + ")"
    if isinstance(e, Prod):
        return "(" + "*".join(_codegen(f, names) for f in e.factors) + ")"
    if isinstance(e, Pow):
        base = _codegen(e.base, names)
        if e.exponent.denominator == 1:
            return f"({base}**({e.exponent.numerator}))"
        return f"_rpow({base},{e.exponent.numerator},{e.exponent.denominator})"
    if isinstance(e, Quot):
        return f"({_codegen(e.num, names)}/{_codegen(e.den, names)})"
    if isinstance(e, Call):
        return f"_{e.fn}({_codegen(e.arg, names)})"
    raise TypeError(type(e))


def _guarded_exp(v: float) -> float:
    try:
        return math.exp(v)
    except OverflowError:
        return math.inf


def _guarded_sqrt(v: float) -> float:
    if v < 0.0:
        raise EvalError("sqrt of a negative value")
    return math.sqrt(v)


def _guarded_log(v: float) -> float:
    if v <= 0.0:
        raise EvalError("log of a non-positive value")
    return math.log(v)


def _compiled_rpow(base: float, num: int, den: int) -> float:
    return _rational_pow(base, Fraction(num, den), None)


def compile_exprs(exprs: Iterable[Expr], params: Iterable[str]) -> Callable[..., tuple]:
    """Compile expressions into one positional-argument Python function.

    The returned callable takes the parameter values in the given order and
    returns a tuple of floats.  Domain failures raise :class:`EvalError`,
    matching :func:`evaluate` semantics.
    """
    params = list(params)
    names = {p: f"_a{i}" for i, p in enumerate(params)}
    bodies = [_codegen(simplify(e), names) for e in exprs]
    src = f"def _compiled({', '.join(names.values())}):\n    return ({', '.join(bodies)}{',' if len(bodies) == 1 else ''})\n"
    namespace = {
        "_sin": math.sin,
        "_cos": math.cos,
        "_tanh": math.tanh,
        "_exp": _guarded_exp,
        "_sqrt": _guarded_sqrt,
        "_log": _guarded_log,
        "_rpow": _compiled_rpow,
    }
    exec(compile(src, "<fblc-expr>", "exec"), namespace)
    raw = namespace["_compiled"]

    def call(*values):
        try:
            return raw(*values)
        except ZeroDivisionError:
            raise EvalError("division by zero") from None
        except OverflowError:
            raise EvalError("overflow") from None

    return call

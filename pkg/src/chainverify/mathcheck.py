"""Extraction and evaluation of arithmetic claims in reasoning steps.

Grammar accepted by :func:`eval_expr`::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | 'x' | '×' | '/' | '÷') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?          # right-associative, binds tighter than unary minus
    atom   := number | '(' expr ')'
    number := ['$'] digits [',' ddd]* ['.' digits] ['%']

so ``-2^2`` is ``-4`` and ``2^-1`` is ``0.5``. A trailing ``%`` scales only
the number it follows by 0.01. There is no implicit multiplication.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import re
from dataclasses import dataclass
from typing import Optional

from .errors import (
    DivisionByZero,
    EvalError,
    JsonParseError,
    MathDomainError,
    Overflow,
    ParseError,
    UnknownOperator,
)

log = logging.getLogger(__name__)

OPERATORS = ("=", "<", ">", "<=", ">=", "!=")
_OP_ALIASES = {"==": "=", "≠": "!=", "≤": "<=", "≥": ">=", "=<": "<=", "=>": ">="}


class Origin(str, enum.Enum):
    MARKER = "marker"
    LLM_JSON = "llm_json"


@dataclass(frozen=True)
class Formula:
    lhs: str
    op: str
    rhs: str
    origin: Origin = Origin.MARKER

    def __post_init__(self):
        if not self.lhs.strip() or not self.rhs.strip():
            raise ValueError("formula sides must be non-empty")
        if self.op not in OPERATORS:
            raise UnknownOperator(self.op)

    def to_dict(self) -> dict:
        return {"lhs": self.lhs, "op": self.op, "rhs": self.rhs, "origin": self.origin.value}

    def __str__(self):
        return f"{self.lhs}{self.op}{self.rhs}"


@dataclass(frozen=True)
class ToleranceSpec:
    abs_tol: float = 0.005
    rel_tol: float = 1e-4

    def __post_init__(self):
        if self.abs_tol < 0 or self.rel_tol < 0:
            raise ValueError("tolerances must be non-negative")
        if self.abs_tol == 0 and self.rel_tol == 0:
            raise ValueError("abs_tol and rel_tol cannot both be zero")

    def to_dict(self) -> dict:
        return {"abs_tol": self.abs_tol, "rel_tol": self.rel_tol}


# ---------------------------------------------------------------- tokenizer

_NUMBER = re.compile(r"\$?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d*)?%?|\$?\.\d+%?")
_SYMBOLS = {
    "+": "+", "-": "-", "\u2212": "-", "\u2013": "-",
    "*": "*", "x": "*", "X": "*", "×": "*", "·": "*",
    "/": "/", "÷": "/", "^": "^", "(": "(", ")": ")",
}


def _number_value(lexeme: str) -> float:
    s = lexeme.lstrip("$")
    pct = s.endswith("%")
    s = s.rstrip("%").replace(",", "")
    v = float(s)
    if pct:
        v = v * 0.01
    return v


def tokenize(expr: str) -> list[tuple[str, object]]:
    out: list[tuple[str, object]] = []
    i, n = 0, len(expr)
    while i < n:
        c = expr[i]
        if c.isspace():
            i += 1
            continue
        m = _NUMBER.match(expr, i)
        if m:
            end = m.end()
            # "1,2" style grouping is ambiguous; reject rather than guess
            if end < n and (expr[end].isdigit() or (expr[end] == "," and end + 1 < n and expr[end + 1].isdigit())):
                raise ParseError(f"malformed number near {expr[i:end + 2]!r}")
            out.append(("num", _number_value(m.group())))
            i = end
            continue
        if c in _SYMBOLS:
            out.append(("op", _SYMBOLS[c]))
            i += 1
            continue
        raise ParseError(f"unexpected character {c!r} in {expr!r}")
    return out


# ------------------------------------------------------------------ parser


class _Parser:
    def __init__(self, tokens):
        self.toks = tokens
        self.i = 0

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else (None, None)

    def take(self):
        t = self.peek()
        self.i += 1
        return t

    def expr(self) -> float:
        v = self.term()
        while self.peek() in (("op", "+"), ("op", "-")):
            _, op = self.take()
            r = self.term()
            v = v + r if op == "+" else v - r
        return v

    def term(self) -> float:
        v = self.unary()
        while self.peek() in (("op", "*"), ("op", "/")):
            _, op = self.take()
            r = self.unary()
            if op == "*":
                v = v * r
            else:
                if r == 0:
                    raise DivisionByZero("division by zero")
                v = v / r
        return v

    def unary(self) -> float:
        if self.peek() == ("op", "-"):
            self.take()
            return -self.unary()
        return self.power()

    def power(self) -> float:
        base = self.atom()
        if self.peek() == ("op", "^"):
            self.take()
            exp = self.unary()
            return _pow(base, exp)
        return base

    def atom(self) -> float:
        kind, val = self.take()
        if kind == "num":
            return val
        if (kind, val) == ("op", "("):
            v = self.expr()
            if self.take() != ("op", ")"):
                raise ParseError("missing closing parenthesis")
            return v
        raise ParseError(f"unexpected token {val!r}" if kind else "unexpected end of expression")


def _pow(base: float, exp: float) -> float:
    if base == 0 and exp < 0:
        raise DivisionByZero("zero raised to a negative power")
    try:
        return math.pow(base, exp)
    except OverflowError as exc:
        raise Overflow(f"{base}^{exp} overflows") from exc
    except ValueError as exc:
        raise MathDomainError(f"{base}^{exp} is not real") from exc


def eval_expr(expr: str) -> float:
    toks = tokenize(expr)
    if not toks:
        raise ParseError("empty expression")
    p = _Parser(toks)
    v = p.expr()
    if p.i != len(toks):
        raise ParseError(f"trailing input in {expr!r}")
    if not math.isfinite(v):
        raise Overflow(f"non-finite result for {expr!r}")
    return v


# --------------------------------------------------------------- extraction

_MARKER = re.compile(r"<<(.*?)>>", re.S)
_SPLIT = re.compile(r"<=|>=|!=|=|<|>")


def extract_marked_formulas(text: str, warnings: Optional[list] = None) -> list[Formula]:
    """Formulas written as ``<<lhs op rhs>>`` calculator annotations."""
    out = []
    for m in _MARKER.finditer(text):
        body = m.group(1)
        sm = _SPLIT.search(body)
        lhs, rhs = (body[: sm.start()].strip(), body[sm.end():].strip()) if sm else ("", "")
        if not lhs or not rhs:
            msg = f"skipping malformed marker <<{body}>>"
            log.warning(msg)
            if warnings is not None:
                warnings.append(msg)
            continue
        out.append(Formula(lhs, sm.group(), rhs, Origin.MARKER))
    return out


_FENCE = re.compile(r"```(?:json)?", re.I)


def parse_formula_json(raw: str) -> list[Formula]:
    """Parse the extraction model's JSON output into formulas.

    Accepts a bare array of ``{lhs, op, rhs}`` objects, the same array wrapped
    in braces (``{[...]}``), or a single object, optionally inside code fences.
    """
    s = raw.strip()
    if s.startswith("```"):
        s = _FENCE.sub("", s, count=1)
    s = s.split("```", 1)[0].strip()
    if s.startswith("{") and s[1:].lstrip().startswith("["):
        inner = s[1:].lstrip()
        end = inner.rfind("]")
        s = inner[: end + 1] if end >= 0 else inner
    try:
        data, _ = json.JSONDecoder().raw_decode(s)
    except json.JSONDecodeError as exc:
        raise JsonParseError(f"not JSON: {raw[:80]!r}") from exc
    if isinstance(data, dict):
        data = [data]
    if not isinstance(data, list):
        raise JsonParseError("expected a list of formulas")
    out = []
    for item in data:
        if not isinstance(item, dict) or not {"lhs", "op", "rhs"} <= item.keys():
            raise JsonParseError(f"formula object missing fields: {item!r}")
        op = str(item["op"]).strip()
        op = _OP_ALIASES.get(op, op)
        if op not in OPERATORS:
            raise UnknownOperator(op)
        lhs, rhs = str(item["lhs"]).strip(), str(item["rhs"]).strip()
        if not lhs or not rhs:
            raise JsonParseError(f"empty formula side: {item!r}")
        out.append(Formula(lhs, op, rhs, Origin.LLM_JSON))
    return out


# ------------------------------------------------------------------- checks


def compare(lhs: float, op: str, rhs: float, tol: ToleranceSpec = ToleranceSpec()) -> bool:
    # symmetric scale keeps "a < b" equivalent to "b > a"
    scale = max(1.0, abs(lhs), abs(rhs))
    equal = abs(lhs - rhs) <= max(tol.abs_tol, tol.rel_tol * scale)
    if op == "=":
        return equal
    if op == "!=":
        return not equal
    if op == "<":
        return lhs < rhs and not equal
    if op == ">":
        return lhs > rhs and not equal
    if op == "<=":
        return lhs < rhs or equal
    if op == ">=":
        return lhs > rhs or equal
    raise UnknownOperator(op)


@dataclass(frozen=True)
class FormulaCheck:
    formula: Formula
    ok: bool
    lhs_value: Optional[float] = None
    rhs_value: Optional[float] = None
    error: Optional[str] = None

    def to_dict(self) -> dict:
        d = self.formula.to_dict()
        d.update(ok=self.ok, lhs_value=self.lhs_value, rhs_value=self.rhs_value, error=self.error)
        return d


def check_formula_detail(f: Formula, tol: ToleranceSpec = ToleranceSpec()) -> FormulaCheck:
    try:
        lv = eval_expr(f.lhs)
        rv = eval_expr(f.rhs)
    except EvalError as exc:
        return FormulaCheck(f, False, error=f"{type(exc).__name__}: {exc}")
    return FormulaCheck(f, compare(lv, f.op, rv, tol), lv, rv)


def check_formula(f: Formula, tol: ToleranceSpec = ToleranceSpec()) -> bool:
    """True iff both sides evaluate and satisfy ``op`` within tolerance.

    A side that cannot be evaluated makes the claim unconfirmed (False).
    """
    return check_formula_detail(f, tol).ok

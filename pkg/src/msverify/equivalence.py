"""Answer canonicalization and equivalence partitions.

Answers are compared by exact canonical form, never by numeric tolerance:
canonical-form equality is a true equivalence relation, which the equivalence
attention mask and the vote fractions both rely on.

Canonicalization grammar (normative, also documented in the README):

    EXPR   := TERM (('+'|'-') TERM)*
    TERM   := FACTOR (('*'|'/') FACTOR)*
    FACTOR := ('+'|'-')* POWER
    POWER  := ATOM ('^' FACTOR)?
    ATOM   := NUMBER | '\\frac' '{' EXPR '}' '{' EXPR '}' | '(' EXPR ')'
    NUMBER := digits ('.' digits)?

Expressions evaluate in exact rational arithmetic; the canonical form is the
reduced fraction "p/q" (just "p" when q = 1, sign on the numerator).  Decimal
literals are exact rationals (0.5 = 5/10).  Exponents must evaluate to
integers.  Anything unparseable (including division by zero) falls back to
the case-folded, whitespace-collapsed raw string, so canonicalize is total.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .traces import ProblemTrace


class _ParseFailure(Exception):
    pass


class _Parser:
    """Recursive-descent evaluator over a whitespace-free expression string."""

    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def parse(self) -> Fraction:
        value = self.expr()
        if self.pos != len(self.text):
            raise _ParseFailure(f"trailing input at {self.pos}")
        return value

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def take(self, ch: str) -> None:
        if self.peek() != ch:
            raise _ParseFailure(f"expected {ch!r} at {self.pos}")
        self.pos += 1

    def expr(self) -> Fraction:
        value = self.term()
        while self.peek() in ("+", "-"):
            op = self.text[self.pos]
            self.pos += 1
            rhs = self.term()
            value = value + rhs if op == "+" else value - rhs
        return value

    def term(self) -> Fraction:
        value = self.factor()
        while self.peek() in ("*", "/"):
            op = self.text[self.pos]
            self.pos += 1
            rhs = self.factor()
            if op == "*":
                value *= rhs
            else:
                if rhs == 0:
                    raise _ParseFailure("division by zero")
                value /= rhs
        return value

    def factor(self) -> Fraction:
        sign = 1
        while self.peek() in ("+", "-"):
            if self.text[self.pos] == "-":
                sign = -sign
            self.pos += 1
        return sign * self.power()

    def power(self) -> Fraction:
        base = self.atom()
        if self.peek() != "^":
            return base
        self.pos += 1
        exponent = self.factor()
        if exponent.denominator != 1:
            raise _ParseFailure("non-integer exponent")
        e = exponent.numerator
        if base == 0 and e < 0:
            raise _ParseFailure("zero to a negative power")
        return base ** e

    def atom(self) -> Fraction:
        ch = self.peek()
        if ch == "(":
            self.pos += 1
            value = self.expr()
            self.take(")")
            return value
        if self.text.startswith("\\frac", self.pos):
            self.pos += len("\\frac")
            self.take("{")
            numer = self.expr()
            self.take("}")
            self.take("{")
            denom = self.expr()
            self.take("}")
            if denom == 0:
                raise _ParseFailure("division by zero")
            return numer / denom
        return self.number()

    def number(self) -> Fraction:
        start = self.pos
        while self.peek().isdigit():
            self.pos += 1
        if self.pos == start:
            raise _ParseFailure(f"expected number at {start}")
        if self.peek() == ".":
            self.pos += 1
            frac_start = self.pos
            while self.peek().isdigit():
                self.pos += 1
            if self.pos == frac_start:
                raise _ParseFailure("dangling decimal point")
        return Fraction(self.text[start:self.pos])


def _unwrap_boxed(text: str) -> str:
    """Strip one outer \\boxed{...} whose braces balance over the whole string."""
    if not text.startswith("\\boxed{") or not text.endswith("}"):
        return text
    depth = 0
    for i, ch in enumerate(text[len("\\boxed"):], start=len("\\boxed")):
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                # The matching brace must be the final character.
                if i == len(text) - 1:
                    return text[len("\\boxed{"):-1]
                return text
    return text


def canonicalize(text: str) -> str:
    """Canonical form of an answer string; total and deterministic."""
    stripped = _unwrap_boxed(text.strip()).strip()
    compact = "".join(stripped.split())
    if compact:
        try:
            value = _Parser(compact).parse()
        except _ParseFailure:
            pass
        else:
            if value.denominator == 1:
                return str(value.numerator)
            return f"{value.numerator}/{value.denominator}"
    return " ".join(stripped.casefold().split())


def equivalent(a: str, b: str) -> bool:
    return canonicalize(a) == canonicalize(b)


@dataclass
class EquivalencePartition:
    """Grouping of a trace's answers by canonical form.

    class_of maps (n, k) to a class id; members inverts it.  Class ids are
    assigned by first appearance in sequence-major answer order.
    """

    class_of: dict[tuple[int, int], int] = field(default_factory=dict)
    members: dict[int, list[tuple[int, int]]] = field(default_factory=dict)

    def class_size(self, cls: int) -> int:
        return len(self.members[cls])


def partition(trace: "ProblemTrace") -> EquivalencePartition:
    part = EquivalencePartition()
    by_canonical: dict[str, int] = {}
    for rec in trace.answers():
        cls = by_canonical.setdefault(rec.canonical, len(by_canonical))
        part.class_of[(rec.seq_index, rec.step)] = cls
        part.members.setdefault(cls, []).append((rec.seq_index, rec.step))
    return part


def vote_fraction(
    trace: "ProblemTrace", n: int, k: int, part: EquivalencePartition
) -> float:
    """Fraction of sequences currently agreeing with answer (n, k).

    Terminal mode counts agreement among the N terminal answers.  Streaming
    mode counts sequences whose latest answer emitted by tau(n, k) is
    equivalent to answer (n, k); sequences silent so far do not count.  The
    denominator is N in both modes, and the answer's own sequence always
    agrees, so the result is at least 1/N.
    """
    if (n, k) not in part.class_of:
        raise KeyError(f"no answer ({n},{k}) in partition")
    own = part.class_of[(n, k)]
    rec = trace.answer(n, k)
    agree = 0
    for m, seq in enumerate(trace.sequences, start=1):
        if trace.mode == "terminal":
            latest = seq[-1]
        else:
            latest = None
            for cand in seq:
                if cand.tau <= rec.tau:
                    latest = cand
        if latest is not None and part.class_of[(m, latest.step)] == own:
            agree += 1
    return agree / trace.n_sequences

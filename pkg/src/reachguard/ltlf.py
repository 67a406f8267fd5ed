"""LTL over finite traces: formulas, trace semantics and automata for the G / FG fragment.

Supported automaton fragment: conjunctions of ``G(b)`` and ``FG(b)`` where ``b`` is
propositional. Over a finite trace ``FG(b)`` holds exactly when ``b`` holds at the
last position, so each ``FG`` conjunct needs one bit of memory ("b held at the most
recent symbol") and each ``G`` conjunct only needs a shared rejecting sink.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from functools import reduce
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

from .errors import FormulaError, UnsupportedFragmentError

Assignment = Mapping[str, bool]
Trace = Sequence[Assignment]


class Formula:
    __slots__ = ()

    def __and__(self, other: "Formula") -> "Formula":
        return And(self, other)

    def __or__(self, other: "Formula") -> "Formula":
        return Or(self, other)

    def __invert__(self) -> "Formula":
        return Not(self)

    def __str__(self) -> str:
        return format_formula(self)


@dataclass(frozen=True)
class Const(Formula):
    value: bool


@dataclass(frozen=True)
class Atom(Formula):
    name: str


@dataclass(frozen=True)
class Not(Formula):
    arg: Formula


@dataclass(frozen=True)
class And(Formula):
    left: Formula
    right: Formula


@dataclass(frozen=True)
class Or(Formula):
    left: Formula
    right: Formula


@dataclass(frozen=True)
class Implies(Formula):
    left: Formula
    right: Formula


@dataclass(frozen=True)
class Globally(Formula):
    arg: Formula


@dataclass(frozen=True)
class Finally(Formula):
    arg: Formula


TRUE = Const(True)
FALSE = Const(False)


def G(f: Formula) -> Formula:
    return Globally(f)


def F(f: Formula) -> Formula:
    return Finally(f)


def FG(f: Formula) -> Formula:
    return Finally(Globally(f))


def atoms(formula: Formula) -> FrozenSet[str]:
    if isinstance(formula, Atom):
        return frozenset([formula.name])
    if isinstance(formula, Const):
        return frozenset()
    if isinstance(formula, (Not, Globally, Finally)):
        return atoms(formula.arg)
    return atoms(formula.left) | atoms(formula.right)


def is_propositional(formula: Formula) -> bool:
    if isinstance(formula, (Atom, Const)):
        return True
    if isinstance(formula, Not):
        return is_propositional(formula.arg)
    if isinstance(formula, (And, Or, Implies)):
        return is_propositional(formula.left) and is_propositional(formula.right)
    return False


def eval_prop(formula: Formula, label: Assignment) -> bool:
    """Truth value of a propositional formula under one assignment."""
    if isinstance(formula, Atom):
        try:
            return bool(label[formula.name])
        except KeyError:
            raise FormulaError(f"unknown atom {formula.name!r}") from None
    if isinstance(formula, Const):
        return formula.value
    if isinstance(formula, Not):
        return not eval_prop(formula.arg, label)
    if isinstance(formula, And):
        return eval_prop(formula.left, label) and eval_prop(formula.right, label)
    if isinstance(formula, Or):
        return eval_prop(formula.left, label) or eval_prop(formula.right, label)
    if isinstance(formula, Implies):
        return (not eval_prop(formula.left, label)) or eval_prop(formula.right, label)
    raise FormulaError(f"temporal operator in propositional context: {format_formula(formula)}")


def evaluate_trace(formula: Formula, trace: Trace) -> bool:
    """Finite-trace satisfaction of ``formula`` at position 0."""
    if len(trace) == 0:
        raise FormulaError("trace must be non-empty")
    return bool(_truth(formula, trace, (1 << len(trace)) - 1, {}) & 1)


def _truth(f: Formula, trace: Trace, full: int, atom_bits: Dict[str, int]) -> int:
    """Bitmask of the trace positions where ``f`` holds (bit i is position i)."""
    kind = type(f)
    if kind is Atom:
        bits = atom_bits.get(f.name)
        if bits is None:
            bits = 0
            for i, label in enumerate(trace):
                try:
                    if label[f.name]:
                        bits |= 1 << i
                except KeyError:
                    raise FormulaError(f"unknown atom {f.name!r} at step {i}") from None
            atom_bits[f.name] = bits
        return bits
    if kind is Not:
        return ~_truth(f.arg, trace, full, atom_bits) & full
    if kind is And:
        return _truth(f.left, trace, full, atom_bits) & _truth(f.right, trace, full, atom_bits)
    if kind is Or:
        return _truth(f.left, trace, full, atom_bits) | _truth(f.right, trace, full, atom_bits)
    if kind is Implies:
        return (~_truth(f.left, trace, full, atom_bits) | _truth(f.right, trace, full, atom_bits)) & full
    if kind is Const:
        return full if f.value else 0
    if kind is Globally or kind is Finally:
        sub = _truth(f.arg, trace, full, atom_bits)
        out = 0
        for i in range(len(trace)):
            # G: every position from i on holds; F: some position from i on holds
            if (sub >> i == full >> i) if kind is Globally else (sub >> i != 0):
                out |= 1 << i
        return out
    raise FormulaError(f"unknown formula node {f!r}")


def conjoin(formulas: Sequence[Formula]) -> Formula:
    """Right-folded conjunction; a singleton list returns its element."""
    if not formulas:
        raise FormulaError("conjoin needs at least one formula")
    items = list(formulas)
    return reduce(lambda acc, f: And(f, acc), reversed(items[:-1]), items[-1])


def conjuncts(formula: Formula) -> List[Formula]:
    if isinstance(formula, And):
        return conjuncts(formula.left) + conjuncts(formula.right)
    return [formula]


# ---------------------------------------------------------------- automata


@dataclass(frozen=True)
class Dfa:
    """Product automaton of G / FG patterns.

    Non-sink states ``0 .. 2**n_fg - 1`` encode, bit ``i``, whether the ``i``-th FG
    operand held at the latest symbol; ``reject_sink`` (if any G pattern exists) is
    absorbing.
    """

    g_operands: Tuple[Formula, ...]
    fg_operands: Tuple[Formula, ...]
    states: Tuple[int, ...]
    initial: int
    accepting: FrozenSet[int]
    reject_sink: Optional[int]
    alphabet: FrozenSet[str]

    def step(self, state: int, label: Assignment) -> int:
        return dfa_step(self, state, label)

    def accepts(self, trace: Trace) -> bool:
        q = self.initial
        for label in trace:
            q = dfa_step(self, q, label)
        return q in self.accepting


def _collect_patterns(formula: Formula, g: List[Formula], fg: List[Formula]) -> None:
    for c in conjuncts(formula):
        if isinstance(c, Const):
            if c.value:
                continue
            g.append(FALSE)
        elif isinstance(c, Globally) and is_propositional(c.arg):
            g.append(c.arg)
        elif isinstance(c, Finally) and isinstance(c.arg, Globally) and is_propositional(c.arg.arg):
            fg.append(c.arg.arg)
        else:
            _unsupported(c)


def _unsupported(sub: Formula) -> None:
    raise UnsupportedFragmentError(
        f"unsupported subformula {format_formula(sub)}: expected a conjunction of G(b) and FG(b) with propositional b"
    )


def to_dfa(formula: Formula) -> Dfa:
    g: List[Formula] = []
    fg: List[Formula] = []
    _collect_patterns(formula, g, fg)
    n_live = 2 ** len(fg)
    sink = n_live if g else None
    states = tuple(range(n_live + (1 if g else 0)))
    full = n_live - 1  # every FG bit set
    return Dfa(
        g_operands=tuple(g),
        fg_operands=tuple(fg),
        states=states,
        initial=0,
        accepting=frozenset([full]) if fg else frozenset([0]),
        reject_sink=sink,
        alphabet=atoms(formula),
    )


def dfa_step(dfa: Dfa, state: int, label: Assignment) -> int:
    if dfa.reject_sink is not None and state == dfa.reject_sink:
        return state
    if state not in dfa.states:
        raise FormulaError(f"state {state} does not exist")
    for b in dfa.g_operands:
        if not eval_prop(b, label):
            return dfa.reject_sink
    q = 0
    for i, b in enumerate(dfa.fg_operands):
        if eval_prop(b, label):
            q |= 1 << i
    return q


# ---------------------------------------------------------------- text syntax

_TOKEN = re.compile(r"\s*(->|FG(?=\s*\()|G(?=\s*\()|F(?=\s*\()|[()!&|]|[A-Za-z_][A-Za-z0-9_]*(?:\[[^\]]*\])?)")


def _tokenize(text: str) -> List[str]:
    pos = 0
    out = []
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise FormulaError(f"unexpected character at {pos}: {text[pos:pos + 10]!r}")
        out.append(m.group(1))
        pos = m.end()
    return out


def parse_formula(text: str) -> Formula:
    """Parse ``G(p)``, ``FG(p)``, ``F(p)``, ``!``, ``&``, ``|``, ``->`` and parentheses.

    Atoms are identifiers with an optional bracketed argument, e.g. ``in_lane[3]``.
    """
    toks = _tokenize(text)
    pos = 0

    def peek() -> Optional[str]:
        return toks[pos] if pos < len(toks) else None

    def eat(tok: Optional[str] = None) -> str:
        nonlocal pos
        if pos >= len(toks):
            raise FormulaError("unexpected end of formula")
        t = toks[pos]
        if tok is not None and t != tok:
            raise FormulaError(f"expected {tok!r}, found {t!r}")
        pos += 1
        return t

    def implication() -> Formula:
        left = disjunction()
        if peek() == "->":
            eat("->")
            return Implies(left, implication())
        return left

    def disjunction() -> Formula:
        f = conjunction()
        while peek() == "|":
            eat("|")
            f = Or(f, conjunction())
        return f

    def conjunction() -> Formula:
        f = unary()
        while peek() == "&":
            eat("&")
            f = And(f, unary())
        return f

    def unary() -> Formula:
        t = peek()
        if t == "!":
            eat()
            return Not(unary())
        if t in ("G", "F", "FG"):
            eat()
            eat("(")
            inner = implication()
            eat(")")
            return {"G": Globally, "F": Finally}.get(t, FG)(inner)
        if t == "(":
            eat()
            inner = implication()
            eat(")")
            return inner
        if t is None:
            raise FormulaError("unexpected end of formula")
        if t in (")", "&", "|", "->"):
            raise FormulaError(f"unexpected token {t!r}")
        eat()
        if t == "true":
            return TRUE
        if t == "false":
            return FALSE
        return Atom(t)

    f = implication()
    if pos != len(toks):
        raise FormulaError(f"trailing input starting at token {toks[pos]!r}")
    return f


def format_formula(f: Formula) -> str:
    if isinstance(f, Atom):
        return f.name
    if isinstance(f, Const):
        return "true" if f.value else "false"
    if isinstance(f, Not):
        return f"!{_wrap(f.arg)}"
    if isinstance(f, Finally) and isinstance(f.arg, Globally):
        return f"FG({format_formula(f.arg.arg)})"
    if isinstance(f, Globally):
        return f"G({format_formula(f.arg)})"
    if isinstance(f, Finally):
        return f"F({format_formula(f.arg)})"
    op = {And: "&", Or: "|", Implies: "->"}[type(f)]
    return f"{_wrap(f.left)} {op} {_wrap(f.right)}"


def _wrap(f: Formula) -> str:
    s = format_formula(f)
    return f"({s})" if isinstance(f, (And, Or, Implies)) else s


def all_assignments(names: Iterable[str]) -> List[Dict[str, bool]]:
    names = sorted(names)
    out = []
    for bits in range(2 ** len(names)):
        out.append({n: bool(bits >> i & 1) for i, n in enumerate(names)})
    return out

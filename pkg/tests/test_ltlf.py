import itertools

import pytest
from hypothesis import given, settings, strategies as st

from reachguard.errors import FormulaError, UnsupportedFragmentError
from reachguard.ltlf import (
    FG,
    TRUE,
    And,
    Atom,
    F,
    G,
    Implies,
    Not,
    Or,
    all_assignments,
    conjoin,
    dfa_step,
    evaluate_trace,
    format_formula,
    parse_formula,
    to_dfa,
)

p, q, r = Atom("p"), Atom("q"), Atom("r")


def tr(*labels):
    """Trace from strings like 'pq' (p and q true) or '' (all false)."""
    return [{n: n in lab for n in "pqr"} for lab in labels]


def all_traces(names, max_len):
    assigns = all_assignments(names)
    for n in range(1, max_len + 1):
        yield from itertools.product(assigns, repeat=n)


class TestEvaluate:
    def test_globally(self):
        assert evaluate_trace(G(p), tr("p", "p", "p"))
        assert not evaluate_trace(G(p), tr("p", "", "p"))

    def test_eventually_always(self):
        assert evaluate_trace(FG(p), tr("", "p"))
        assert not evaluate_trace(FG(p), tr("p", ""))

    def test_implication(self):
        assert evaluate_trace(G(Implies(p, q)), tr("pq", ""))
        assert not evaluate_trace(G(Implies(p, q)), tr("pq", "p"))

    def test_unknown_atom(self):
        with pytest.raises(FormulaError):
            evaluate_trace(G(Atom("z")), tr("p"))

    def test_empty_trace(self):
        with pytest.raises(FormulaError):
            evaluate_trace(G(p), [])


class TestDfa:
    def test_globally_shape(self):
        dfa = to_dfa(G(p))
        assert len(dfa.states) == 2
        for trace in all_traces("p", 5):
            assert dfa.accepts(trace) == evaluate_trace(G(p), list(trace))
        assert sum(1 for t in itertools.product(all_assignments("p"), repeat=5) if dfa.accepts(t)) == 1

    def test_fg_is_last_symbol(self):
        dfa = to_dfa(FG(p))
        for trace in all_traces("p", 5):
            assert dfa.accepts(trace) == trace[-1]["p"]

    def test_product(self):
        f = And(G(p), FG(q))
        dfa = to_dfa(f)
        traces = list(itertools.product(all_assignments("pq"), repeat=4))
        assert len(traces) == 4**4
        for trace in traces:
            assert dfa.accepts(trace) == evaluate_trace(f, list(trace))

    def test_step(self):
        g = to_dfa(G(p))
        acc = next(iter(g.accepting))
        assert dfa_step(g, acc, {"p": True}) == acc
        assert dfa_step(g, acc, {"p": False}) == g.reject_sink
        assert dfa_step(g, g.reject_sink, {"p": True}) == g.reject_sink
        fg = to_dfa(FG(p))
        for state in fg.states:
            assert dfa_step(fg, state, {"p": True}) in fg.accepting
            assert dfa_step(fg, state, {"p": False}) not in fg.accepting

    def test_missing_state(self):
        with pytest.raises(FormulaError):
            dfa_step(to_dfa(G(p)), 17, {"p": True})

    @pytest.mark.parametrize("f", [F(p), G(F(p)), Or(G(p), G(q)), Not(G(p)), G(G(p)), p])
    def test_unsupported(self, f):
        with pytest.raises(UnsupportedFragmentError):
            to_dfa(f)

    def test_true_conjunct(self):
        dfa = to_dfa(And(TRUE, G(p)))
        assert dfa.accepts(tr("p")) and not dfa.accepts(tr(""))


class TestConjoin:
    def test_single(self):
        assert conjoin([G(p)]) == G(p)

    def test_many(self):
        f = conjoin([G(p), FG(q), G(Implies(p, r))])
        for trace in all_traces("pqr", 3):
            want = all(evaluate_trace(g, list(trace)) for g in (G(p), FG(q), G(Implies(p, r))))
            assert evaluate_trace(f, list(trace)) == want

    def test_empty(self):
        with pytest.raises(FormulaError):
            conjoin([])


class TestSyntax:
    @pytest.mark.parametrize(
        "text",
        ["G(p)", "FG(p & q)", "G(p -> q) & FG(!r)", "G((p | q) & !r)", "G(in_lane[3]) & FG(in_standstill)"],
    )
    def test_round_trip(self, text):
        f = parse_formula(text)
        assert parse_formula(format_formula(f)) == f

    def test_garbage(self):
        with pytest.raises(FormulaError):
            parse_formula("G(p")


def props(names):
    leaf = st.sampled_from([Atom(n) for n in names])
    return st.recursive(
        leaf,
        lambda kids: st.one_of(
            kids.map(Not),
            st.tuples(kids, kids).map(lambda t: And(*t)),
            st.tuples(kids, kids).map(lambda t: Or(*t)),
            st.tuples(kids, kids).map(lambda t: Implies(*t)),
        ),
        max_leaves=4,
    )


fragment = st.lists(
    st.tuples(st.sampled_from([G, FG]), props("pq")).map(lambda t: t[0](t[1])), min_size=1, max_size=3
).map(conjoin)


@settings(max_examples=60, deadline=None)
@given(fragment)
def test_dfa_matches_semantics(f):
    dfa = to_dfa(f)
    for trace in all_traces("pq", 4):
        assert dfa.accepts(trace) == evaluate_trace(f, list(trace))

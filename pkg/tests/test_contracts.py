import itertools

import pytest
from hypothesis import given, strategies as st

from madlab import contracts
from madlab.contracts import (
    MAD_PATHS, And, Or, RedeemWitness, TimeUndefined, UnknownPath, VPreImg, VSig, VTime, evaluate,
    evaluate_node, r_predicate, redeeming_entities,
)
from madlab.ledger import ALICE, BOB, Hasher, Party

H = Hasher()
PRE_A, PRE_B = b"\x01" * 32, b"\x02" * 32
DA, DB = H.digest(PRE_A), H.digest(PRE_B)
M1 = Party.miner(1)
PARTIES = {"A": ALICE, "B": BOB, "M": M1}

# Hand-enumerated true cells of the relaxed predicate: (path, party, wa, wb).
R_TRUE = {
    ("dep-A", "A", 1, 0), ("dep-A", "A", 1, 1),
    ("dep-B", "B", 0, 1), ("dep-B", "B", 1, 1),
    ("dep-M", "A", 1, 1), ("dep-M", "B", 1, 1), ("dep-M", "M", 1, 1),
    ("col-M", "A", 1, 1), ("col-M", "B", 1, 1), ("col-M", "M", 1, 1),
    ("col-B", "B", 0, 0), ("col-B", "B", 0, 1), ("col-B", "B", 1, 0), ("col-B", "B", 1, 1),
}


def test_r_predicate_truth_table():
    cases = list(itertools.product(MAD_PATHS, "ABM", (0, 1), (0, 1)))
    assert len(cases) == 60
    for path, p, wa, wb in cases:
        assert r_predicate(path, PARTIES[p], wa, wb) == ((path, p, wa, wb) in R_TRUE), (path, p, wa, wb)
    with pytest.raises(UnknownPath):
        r_predicate("htlc-A", ALICE, 1, 1)


# Possible redeeming entity once the timeout has passed, keyed by (a published, b published).
TABLE_DEP = {(1, 1): "ABM", (1, 0): "A", (0, 1): "B", (0, 0): ""}
TABLE_COL = {(1, 1): "ABM", (1, 0): "B", (0, 1): "B", (0, 0): "B"}


@pytest.mark.parametrize("ast,table", [
    (contracts.make_mh_dep(ALICE, BOB, 4, DA, DB, H), TABLE_DEP),
    (contracts.make_mh_col(BOB, 4, DA, DB, H), TABLE_COL),
])
def test_redeeming_entity_tables(ast, table):
    for (pa, pb), who in table.items():
        got = redeeming_entities(ast, PRE_A, PRE_B, bool(pa), bool(pb), init_height=10, at_height=14)
        assert got == frozenset(who), (ast.label, pa, pb)


def test_timeout_gates():
    dep = contracts.make_mh_dep(ALICE, BOB, 4, DA, DB, H)
    w = RedeemWitness("dep-B", pre2=PRE_B, signer=BOB)
    assert not evaluate(dep, w, 10, 13)
    assert evaluate(dep, w, 10, 14)
    assert dep.earliest_height(w, 10) == 14
    col = contracts.make_mh_col(BOB, 4, DA, DB, H)
    assert redeeming_entities(col, PRE_A, PRE_B, True, True, 10, 13) == frozenset()
    with pytest.raises(TimeUndefined):
        evaluate(dep, w, None, 13)


def test_htlc_paths():
    h = contracts.make_htlc(ALICE, BOB, 3, DA, H)
    assert h.path_names() == ("htlc-A", "htlc-B")
    assert evaluate(h, RedeemWitness("htlc-A", PRE_A, None, ALICE), 1, 1)
    assert not evaluate(h, RedeemWitness("htlc-A", PRE_B, None, ALICE), 1, 1)
    assert not evaluate(h, RedeemWitness("htlc-B", None, None, BOB), 1, 3)
    assert evaluate(h, RedeemWitness("htlc-B", None, None, BOB), 1, 4)
    with pytest.raises(UnknownPath):
        h.path("dep-A")


def test_constructor_guards():
    with pytest.raises(ValueError):
        contracts.make_mh_dep(ALICE, BOB, 0, DA, DB, H)
    with pytest.raises(ValueError):
        contracts.make_mh_col(BOB, 2, DA, DA, H)


def test_canonical_form():
    col = contracts.make_mh_col(BOB, 2, DA, DB, H)
    text = col.canonical()
    assert text.startswith("(predicate mh-col (path col-B (and (vtime 2) (vsig B)))")
    assert f"(vpreimg 2 0x{DB.hex()})" in text


def test_constant_true():
    t = contracts.always_true()
    assert evaluate(t, RedeemWitness("any"), None, 0)


leaf = st.one_of(
    st.builds(VSig, st.sampled_from([ALICE, BOB, M1])),
    st.builds(VPreImg, st.sampled_from([1, 2]), st.sampled_from([DA, DB])),
    st.builds(VTime, st.integers(0, 5)),
)
tree = st.recursive(leaf, lambda ch: st.one_of(
    st.builds(And, st.lists(ch, max_size=3).map(tuple)),
    st.builds(Or, st.lists(ch, max_size=3).map(tuple)),
), max_leaves=8)


@given(tree, st.sampled_from([None, PRE_A, PRE_B]), st.sampled_from([None, PRE_A, PRE_B]),
       st.sampled_from([ALICE, BOB, M1]), st.integers(0, 12))
def test_monotone_in_time(node, p1, p2, signer, at):
    """A predicate true at height h stays true at every later height."""
    w = RedeemWitness("x", p1, p2, signer)
    if evaluate_node(node, w, H, 0, at):
        assert evaluate_node(node, w, H, 0, at + 1)


@given(tree, st.sampled_from([ALICE, BOB, M1]), st.integers(0, 12))
def test_more_preimages_never_hurt(node, signer, at):
    """Supplying a correct preimage instead of nothing cannot turn true into false."""
    less = RedeemWitness("x", None, PRE_B, signer)
    more = RedeemWitness("x", PRE_A, PRE_B, signer)
    if evaluate_node(node, less, H, 0, at):
        assert evaluate_node(node, more, H, 0, at)

import pytest

from madlab.protocol import (
    ALPHABET, Action, ProtocolParams, brute_force_divergent, lemma1_expected, model_check_lemma1,
    run_frmh, run_protocol, scripts_upto,
)

HAPPY = ["setup-B", "setup-A", "share", "publish(A)", "init"]


def test_alphabet_and_parsing():
    assert len(ALPHABET) == 21
    for a in ALPHABET:
        assert Action.parse(str(a)) == a
    with pytest.raises(ValueError):
        Action.parse("mine")


def test_happy_path_alice_redeems():
    for run in (run_protocol, run_frmh):
        out = run(HAPPY + ["redeem(A,dep-A)"])
        assert out.results == ((5, "redeem(A,dep-A)", True),)
        assert out.triple() == (True, False, True)


def test_miner_needs_both_preimages():
    script = HAPPY + ["redeem(M,dep-M)", "redeem(A,dep-A)", "redeem(B,dep-B)", "redeem(M,col-M)"]
    for run in (run_protocol, run_frmh):
        assert [r for _, _, r in run(script).results] == [False, True, True, True]


def test_without_share_alice_cannot_redeem():
    script = ["setup-B", "setup-A", "publish(B)", "init", "redeem(A,dep-A)"]
    assert run_protocol(script, with_share=False).results == ((4, "redeem(A,dep-A)", False),)


def test_b_dep_a_reveals_pre_a_in_both_models():
    script = ["setup-B", "setup-A", "publish(B)", "init", "redeem(B,dep-A)"]
    for run in (run_protocol, run_frmh):
        out = run(script)
        assert out.results[-1][2] is False and out.w1


def test_actions_before_init_are_ignored():
    script = ["redeem(A,dep-A)", "setup-A", "init", "share"]
    for run in (run_protocol, run_frmh):
        assert run(script).results == ()


@pytest.mark.parametrize("party,path,w1,w2,shared,want", [
    ("A", "dep-A", False, False, True, True),
    ("A", "dep-A", False, False, False, False),
    ("A", "dep-M", False, True, True, True),
    ("A", "dep-B", True, True, True, False),
    ("B", "dep-B", False, False, False, True),
    ("B", "dep-A", True, True, True, False),
    ("M", "col-M", True, True, False, True),
    ("M", "dep-M", True, False, False, False),
    ("M", "col-B", True, True, True, False),
])
def test_lemma1_expectations(party, path, w1, w2, shared, want):
    assert lemma1_expected(party, path, w1, w2, shared) is want


def test_short_scripts_agree_by_both_routes():
    rep = model_check_lemma1(4)
    assert rep.scripts_checked == scripts_upto(4) == 204204
    assert rep.ok and rep.divergent_scripts == 0
    assert brute_force_divergent(3) == (scripts_upto(3), 0)


@pytest.mark.slow
def test_divergence_count_matches_brute_force_at_length_5():
    rep = model_check_lemma1(5)
    assert brute_force_divergent(5) == (rep.scripts_checked, rep.divergent_scripts) == (4288305, 2)


# Shortest scripts separating the real protocol from the ideal functionality.
def test_share_after_init_only_counts_in_the_ideal_model():
    script = ["setup-B", "setup-A", "publish(A)", "init", "share"]
    assert run_protocol(script).shared is False
    assert run_frmh(script).shared is True
    script += ["redeem(A,dep-A)"]
    assert run_protocol(script).results[-1][2] is False
    assert run_frmh(script).results[-1][2] is True


@pytest.mark.parametrize("path", ["dep-M", "col-M"])
def test_alice_miner_path_reveals_pre_a_only_in_the_protocol(path):
    script = ["setup-B", "setup-A", "share", "publish(A)", "init", f"redeem(A,{path})"]
    assert run_protocol(script).w1 is True
    assert run_frmh(script).w1 is False


def test_length6_report_lists_both_gaps():
    rep = model_check_lemma1(6)
    assert rep.scripts_checked == scripts_upto(6)
    assert rep.divergent_scripts == 246
    first = rep.discrepancies[0]
    assert first["kind"] == "triple" and first["script"][-1] == "share"
    kinds = {(d["kind"], d["script"][-1]) for d in rep.discrepancies}
    assert ("triple", "redeem(A,dep-M)") in kinds and ("triple", "redeem(A,col-M)") in kinds
    assert rep.counts["flag_b_dep_a_protocol"] == rep.counts["flag_b_dep_a_frmh"] > 0


def test_dropped_w2_update_is_caught():
    rep = model_check_lemma1(5, faults=frozenset({"skip-w2"}))
    assert not rep.ok and rep.discrepancies

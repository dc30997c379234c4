import random
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from gamegrid import htlc_grid, mad_grid, population
from madlab.games import (
    HTLC, HTLC_A, HTLC_B, MAD, UNRELATED, GameConfig, NotApplicable, SubgameId, closed_form_utility,
    enumerate_actions, simulate, solve_spe, solver_threshold, sweep, verify_mad,
)
from madlab.ledger import ConfigError, MinerPopulation

BOTH = frozenset(HTLC_A + HTLC_B)


def pop(*xs):
    return MinerPopulation.of([Fraction(x) for x in xs])


def mad_example(**kw):
    base = dict(f=1, v_dep=100, v_col=10, f_a_dep=2, f_b_dep=5, f_b_col=2, f_b_3=3)
    base.update(kw)
    return GameConfig(MAD, 3, pop("9/10", "1/10"), **base)


def htlc(T=3, f_b=12, powers=("1/10", "9/10"), **kw):
    return GameConfig(HTLC, T, pop(*powers), f=1, v_dep=100, f_a_htlc=2, f_b_htlc=f_b, **kw)


# --- actions ---------------------------------------------------------------------------


def test_action_availability():
    cfg = mad_example()
    last = SubgameId(3, True, frozenset({"txA_dep", "txB_dep"}))
    assert "txM_3" in enumerate_actions(last, cfg, 1)
    assert enumerate_actions(SubgameId(1, True), cfg, 1) == (UNRELATED,)
    early = SubgameId(2, True, frozenset({"txB_htlc"}))
    assert enumerate_actions(early, htlc(), 1) == (UNRELATED,)
    assert enumerate_actions(SubgameId(1, True), cfg, "A") == ("publish:txA_dep", "pass")
    assert "publish:txB_3" in enumerate_actions(SubgameId(1, True), cfg, "B")
    irred = SubgameId(3, False, frozenset({"txA_dep"}))
    assert enumerate_actions(irred, cfg, "B") == ("pass", "publish:txB_col")


def test_config_bounds_name_the_key():
    with pytest.raises(ConfigError, match="fees.f_a_dep"):
        mad_example(f_a_dep=1)
    with pytest.raises(ConfigError, match="fees.f_b_htlc"):
        htlc(f_b=100)
    with pytest.raises(ConfigError, match="timeout"):
        htlc(T=0)


# --- MAD-HTLC -------------------------------------------------------------------------


def test_mad_prescribed_outcome():
    sol = solve_spe(mad_example())
    assert (sol.u_A, sol.u_B) == (98, 8)
    assert sol.unique
    assert sol.outcomes == {"include:txA_dep,include:txB_col": 1}


def test_mad_alice_silent():
    sol = solve_spe(mad_example(alice_knows=False))
    assert sol.u_B == 100 + 10 - 3


def test_verify_mad_deviation_values():
    rep = verify_mad(mad_example())
    assert rep.ok
    by = {d.name: d for d in rep.deviations}
    assert by["never publish"].utility == 0 and by["never publish"].observed_strict
    assert by["txB_dep in round 1"].utility == 0
    assert all(x["action"] == x["expected"] for x in rep.destruction)


def test_verify_mad_flags_a_bad_fee_choice():
    """When txB_3 costs more than it is worth, a silent-A game has a better B strategy."""
    cfg = mad_example(alice_knows=False, f_b_3=105, f_b_dep=50)
    rep = verify_mad(cfg)
    assert not rep.ok and rep.profitable


@pytest.mark.parametrize("cfg", mad_grid(9, seed=3), ids=lambda c: f"T{c.T}n{c.n}")
def test_mad_grid_sample(cfg):
    assert verify_mad(cfg).ok


def test_myopic_miners_include_alice_in_mad():
    cfg = mad_example(myopic=frozenset({1, 2}))
    sol = solve_spe(cfg)
    assert sol.outcome_probability(lambda o: "include:txA_dep" in o) == 1


# --- HTLC ---------------------------------------------------------------------------


def test_htlc_attack_and_lemma_examples():
    cfg = htlc()
    sol = solve_spe(cfg)
    assert sol.attack_spe and sol.withholds_everywhere()
    assert sol.u_B == 100 - 12
    assert closed_form_utility(cfg, 1, 1, False) == Fraction(3, 10)
    assert closed_form_utility(cfg, 1, 3, True) == Fraction(12, 10)
    assert closed_form_utility(cfg, 1, 1, True) == Fraction(14, 10)


def test_htlc_below_threshold_alice_wins():
    sol = solve_spe(htlc(f_b=10))
    assert not sol.attack_spe
    assert sol.solver.miner_choice(SubgameId(1, True, BOTH), 1)[0] == "include:txA_htlc"


def test_threshold_examples():
    assert solver_threshold(htlc()) == 12
    cfg = GameConfig(HTLC, 3, pop("1/100", "99/100"), f=1, v_dep=100, f_a_htlc=2, f_b_htlc=3)
    assert solver_threshold(cfg) is None


def test_closed_form_guards():
    with pytest.raises(NotApplicable):
        closed_form_utility(htlc(f_b=10), 1, 1, True)
    with pytest.raises(NotApplicable):
        closed_form_utility(mad_example(), 1, 1, True)
    with pytest.raises(NotApplicable):
        closed_form_utility(htlc(), 1, 1, True, published=HTLC_A)


def naive_htlc_values(cfg):
    """Independent recursion with both HTLC txs published from the start."""
    lam = cfg.population.powers
    n = len(lam)
    memo = {}

    def V(k, red):
        if k > cfg.T:
            return [Fraction(0)] * n
        if (k, red) in memo:
            return memo[(k, red)]
        out = [Fraction(0)] * n
        for j in range(n):
            opts = [(cfg.f, red)]
            if red:
                opts.append((cfg.f_a_htlc, False))
                if k == cfg.T:
                    opts.append((cfg.f_b_htlc, False))
            best = opts[0]
            for o in opts[1:]:
                if o[0] + V(k + 1, o[1])[j] > best[0] + V(k + 1, best[1])[j]:
                    best = o
            nxt = V(k + 1, best[1])
            for i in range(n):
                out[i] += lam[j] * ((best[0] if i == j else 0) + nxt[i])
        memo[(k, red)] = out
        return out

    return V


@pytest.mark.parametrize("cfg", htlc_grid(12, seed=21) + htlc_grid(12, seed=22, above=False),
                         ids=lambda c: f"T{c.T}n{c.n}fb{c.f_b_htlc}")
def test_solver_matches_naive_recursion(cfg):
    V = naive_htlc_values(cfg)
    sol = solve_spe(cfg)
    for k in range(1, cfg.T + 1):
        for red in (True, False):
            got = sol.solver.pre(SubgameId(k, red, BOTH))
            assert list(got[2:]) == V(k, red)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_closed_forms_on_random_htlc(seed):
    cfg = htlc_grid(1, seed=seed)[0]
    sol = solve_spe(cfg)
    for i in range(1, cfg.n + 1):
        for k in range(1, cfg.T + 1):
            for red in (True, False):
                want = closed_form_utility(cfg, i, k, red)
                assert sol.solver.pre(SubgameId(k, red, BOTH))[i + 1] == want


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_revelation_is_monotone_on_paths(seed):
    cfg = (mad_grid(1, seed=seed) + htlc_grid(1, seed=seed))[seed % 2]
    sol = solve_spe(cfg)
    for outcome in sol.outcomes:
        events = [e for e in outcome.split(",") if e != "none"]
        assert len(events) == len(set(events))
    for a in sol.reachable_post:
        for b in sol.reachable_post:
            if b.k == a.k + 1 and b.published >= a.published:
                assert a.revealed <= b.revealed


def test_ties_are_reported():
    # Exactly at the threshold the smallest miner is indifferent in round 1.
    sol = solve_spe(htlc(f_b=11))
    assert sol.ties or sol.offpath_ties


def test_sweep_rows():
    rows = sweep(htlc(), "f_b_htlc", [10, 12])
    assert [r["attack_spe"] for r in rows] == [False, True]


# --- Monte Carlo ------------------------------------------------------------------------


def test_simulation_matches_solver_within_4_sigma():
    cfg = GameConfig(HTLC, 3, pop("1/4", "3/4"), f=1, v_dep=100, f_a_htlc=3, f_b_htlc=20,
                     myopic=frozenset({1}))
    sol = solve_spe(cfg)
    rep = simulate(cfg, "spe", "spe", trials=4000, seed=3)
    for i, u in enumerate(sol.utilities):
        sd = rep.ci(i) / 1.96
        assert abs(rep.mean(i) - float(u)) <= 4 * sd + 1e-9, i


def test_simulation_attack_is_deterministic_without_myopic():
    rep = simulate(htlc(), "prescribed", "bribe", trials=500, seed=1)
    assert rep.rate("attack_success") == 1.0


def test_simulation_independent_of_jobs():
    cfg = htlc(myopic=frozenset({1}))
    a = simulate(cfg, "prescribed", "bribe", trials=300, seed=9, jobs=1).to_dict()
    b = simulate(cfg, "prescribed", "bribe", trials=300, seed=9, jobs=3).to_dict()
    assert a == b


def test_mad_simulation_confirms_alice():
    cfg = mad_example(myopic=frozenset({2}))
    rep = simulate(cfg, "prescribed", "prescribed", trials=300, seed=2)
    assert rep.rate("a_confirmed") == 1.0 and rep.rate("miner_seizure") == 0.0


def test_simulate_rejects_bad_strategy():
    with pytest.raises(ConfigError):
        simulate(htlc(), "sneaky", "none", trials=1)

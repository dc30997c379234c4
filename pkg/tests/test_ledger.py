import random
from collections import Counter
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from madlab import contracts
from madlab.contracts import RedeemWitness
from madlab.ledger import (
    ALICE, BOB, EXTERNAL, Chain, ConfigError, Conflicting, Contract, HashUnavailable, Hasher,
    InvariantViolation, Mempool, MinerPopulation, MyopicPolicy, Overspend, Party, PredicateFalse,
    RoundView, TimeLocked, Transaction, UnknownContract, UnrelatedStream, Valid, advance_round,
    dump_trace, includable, validate_transaction,
)

H = Hasher()
PRE_A, PRE_B = b"a" * 32, b"b" * 32


def htlc_chain(v=100, T=3):
    ast = contracts.make_htlc(ALICE, BOB, T, H.digest(PRE_A), H)
    init = Transaction("init", EXTERNAL, (), (Contract("dep", v, ast),), 0, v, "init")
    return Chain.genesis(init)


def tx_a(fee=2, v=100):
    w = RedeemWitness("htlc-A", pre1=PRE_A, signer=ALICE)
    return Transaction("txA", ALICE, (("dep", w),), (Contract("oa", v - fee, contracts.owned_by(ALICE), ALICE),), fee)


def tx_b(fee=5, v=100):
    w = RedeemWitness("htlc-B", signer=BOB)
    return Transaction("txB", BOB, (("dep", w),), (Contract("ob", v - fee, contracts.owned_by(BOB), BOB),), fee)


def test_party_strings_and_order():
    assert [str(p) for p in (ALICE, BOB, Party.miner(3), EXTERNAL)] == ["A", "B", "M3", "X"]
    with pytest.raises(ValueError):
        Party("M", 0)
    with pytest.raises(ValueError):
        Party("Q")


def test_hasher_truncation_and_hash160():
    assert len(Hasher(mu=128).digest(b"x")) == 16
    with pytest.raises(ConfigError):
        Hasher(mu=12)
    try:
        d = Hasher(algorithm="hash160").digest(b"x")
    except HashUnavailable:
        pytest.skip("ripemd160 not provided by this hashlib")
    assert len(d) == 20


def test_genesis_sets_init_height():
    chain = htlc_chain()
    assert chain.height == 1
    assert chain.contract("dep").init_height == 1
    with pytest.raises(UnknownContract):
        chain.contract("nope")


def test_verdicts():
    chain = htlc_chain(T=3)
    assert isinstance(validate_transaction(tx_a(), chain, 2), Valid)
    assert validate_transaction(tx_b(), chain, 3) == TimeLocked(4)
    assert isinstance(validate_transaction(tx_b(), chain, 4), Valid)
    bad = Transaction("x", BOB, (("dep", RedeemWitness("htlc-A", pre1=PRE_B, signer=BOB)),),
                      (Contract("o", 98, contracts.owned_by(BOB), BOB),), 2)
    assert isinstance(validate_transaction(bad, chain, 2), PredicateFalse)
    over = Transaction("y", ALICE, (("dep", RedeemWitness("htlc-A", pre1=PRE_A, signer=ALICE)),), (), 99)
    assert validate_transaction(over, chain, 2) == Overspend(1)
    chain.append(Party.miner(1), tx_a())
    assert validate_transaction(tx_b(), chain, 9) == Conflicting("txA")
    assert not Conflicting("txA") and bool(Valid())


def test_unrelated_stream():
    s = UnrelatedStream(3)
    assert s.peek().id == "u00000001" and s.peek().fee == 3
    assert s.fresh().id == "u00000001" and s.peek().id == "u00000002"
    with pytest.raises(ConfigError):
        UnrelatedStream(0)


def test_includable_and_myopic_choice():
    chain = htlc_chain(T=1)
    pool = Mempool(H, UnrelatedStream(1))
    pool.publish(tx_a(2))
    pool.publish(tx_b(5))
    assert pool.knows(H.digest(PRE_A))
    cands = includable(chain, pool, 2)
    assert [t.id for t in cands] == ["u00000001", "txA", "txB"]
    view = RoundView(2, Party.miner(1), chain, pool, cands)
    assert MyopicPolicy().select(view).id == "txB"


def test_population_validation(pop3):
    assert pop3.lambda_min == Fraction(1, 4)
    with pytest.raises(ConfigError):
        MinerPopulation.of([Fraction(1, 2)])
    with pytest.raises(ConfigError):
        MinerPopulation.of([])
    with pytest.raises(ConfigError):
        MinerPopulation.of([Fraction(3, 2), Fraction(-1, 2)])


def test_sampling_is_proportional(pop3):
    rng = random.Random(1)
    c = Counter(pop3.sample(rng).index for _ in range(40000))
    for i, p in enumerate(pop3.powers, start=1):
        assert abs(c[i] / 40000 - float(p)) < 0.01


def test_invalid_choice_is_invariant_violation(pop3):
    chain = htlc_chain(T=5)
    pool = Mempool(H, UnrelatedStream(1))

    class Cheater:
        def select(self, view):
            return tx_b()

    with pytest.raises(InvariantViolation):
        advance_round(chain, pool, pop3, lambda m: Cheater(), random.Random(0))


def test_trace_records(pop3):
    chain = htlc_chain(T=5)
    pool = Mempool(H, UnrelatedStream(1))
    pool.publish(tx_a())
    out = advance_round(chain, pool, pop3, lambda m: MyopicPolicy(), random.Random(0))
    rec = out.trace_record()
    assert rec["schema"] == "trace-v1" and rec["tx_id"] == "txA" and rec["redeemed_contracts"] == ["dep"]
    assert dump_trace([out]).count("\n") == 1


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 6), st.integers(2, 40), st.integers(1, 60), st.booleans())
def test_token_conservation(seed, T, fa, fb, publish_b):
    """Unredeemed contracts plus all balances stay at zero through any round sequence."""
    v = 100
    chain = htlc_chain(v, T)
    pool = Mempool(H, UnrelatedStream(1))
    pool.publish(tx_a(fa, v))
    if publish_b:
        pool.publish(tx_b(fb, v))
    pop = MinerPopulation.of([Fraction(1, 3), Fraction(2, 3)])
    rng = random.Random(seed)
    for _ in range(T + 2):
        advance_round(chain, pool, pop, lambda m: MyopicPolicy(), rng)
        assert chain.conserved_total() == 0
    assert chain.is_redeemed("dep")

"""Abstract blockchain: contracts, transactions, mempool and round-based mining.

Every block carries exactly one transaction. Miner revenue is fees only, and
all token arithmetic is on integers (one unit is the smallest quantum).
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Protocol, Sequence


class LedgerError(Exception):
    """Base class for ledger failures."""


class ConfigError(LedgerError):
    """A configuration value is outside its allowed domain."""


class UnknownContract(LedgerError, KeyError):
    """A transaction references a contract id the chain has never seen."""


class InvariantViolation(LedgerError):
    """A policy or caller broke a ledger invariant."""


class HashUnavailable(LedgerError):
    """The requested hash composition is not provided by this Python build."""


# --- parties -----------------------------------------------------------------


@dataclass(frozen=True, order=True)
class Party:
    """A protocol participant: Alice, Bob, miner i, or the outside world."""

    kind: str
    index: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("A", "B", "M", "X"):
            raise ValueError(f"unknown party kind {self.kind!r}")
        if self.kind == "M" and self.index < 1:
            raise ValueError("miner indices start at 1")
        if self.kind != "M" and self.index != 0:
            raise ValueError("only miners carry an index")

    @staticmethod
    def miner(i: int) -> "Party":
        return Party("M", i)

    @property
    def is_miner(self) -> bool:
        return self.kind == "M"

    def ident(self) -> bytes:
        return str(self).encode()

    def __str__(self) -> str:
        return f"M{self.index}" if self.kind == "M" else self.kind


ALICE = Party("A")
BOB = Party("B")
EXTERNAL = Party("X")


# --- hashing -----------------------------------------------------------------


@dataclass(frozen=True)
class Hasher:
    """Digest function used by predicates and scripts.

    ``sha256`` truncates to ``mu`` bits. ``hash160`` is RIPEMD160 over SHA256,
    which needs an OpenSSL build that still ships RIPEMD160.
    """

    mu: int = 256
    algorithm: str = "sha256"

    def __post_init__(self) -> None:
        if self.algorithm not in ("sha256", "hash160"):
            raise ConfigError(f"hash.algorithm: unsupported {self.algorithm!r}")
        if self.mu % 8 or not 8 <= self.mu <= 256:
            raise ConfigError("hash.mu: must be a multiple of 8 in [8, 256]")

    def digest(self, preimage: bytes) -> bytes:
        inner = hashlib.sha256(preimage).digest()
        if self.algorithm == "sha256":
            return inner[: self.mu // 8]
        try:
            return hashlib.new("ripemd160", inner).digest()
        except ValueError as exc:
            raise HashUnavailable("ripemd160 is not available in this hashlib build") from exc


def random_preimage(rng: random.Random, mu: int = 256) -> bytes:
    return rng.getrandbits(mu).to_bytes(mu // 8, "big")


# --- contracts and transactions ---------------------------------------------


class Predicate(Protocol):
    def evaluate(self, witness, init_height: int | None, at_height: int) -> bool: ...

    def path_names(self) -> tuple[str, ...]: ...


@dataclass(frozen=True)
class Contract:
    id: str
    amount: int
    predicate: Predicate
    owner: Party | None = None
    init_height: int | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.amount, int) or self.amount <= 0:
            raise ValueError(f"contract {self.id}: amount must be a positive integer")


@dataclass(frozen=True)
class Transaction:
    """A transaction spending contracts (or outside tokens) into outputs plus a fee.

    ``external_in`` models tokens entering from outside the studied contracts,
    e.g. the unrelated base-fee transactions and the initiating transaction.
    """

    id: str
    creator: Party
    inputs: tuple = ()
    outputs: tuple[Contract, ...] = ()
    fee: int = 0
    external_in: int = 0
    kind: str = ""

    def input_ids(self) -> tuple[str, ...]:
        return tuple(cid for cid, _ in self.inputs)

    def witnesses(self) -> Iterable:
        return (w for _, w in self.inputs)


@dataclass(frozen=True)
class Valid:
    def __bool__(self) -> bool:
        return True


@dataclass(frozen=True)
class Conflicting:
    tx_id: str

    def __bool__(self) -> bool:
        return False


@dataclass(frozen=True)
class PredicateFalse:
    contract_id: str
    path: str

    def __bool__(self) -> bool:
        return False


@dataclass(frozen=True)
class TimeLocked:
    earliest_height: int

    def __bool__(self) -> bool:
        return False


@dataclass(frozen=True)
class Overspend:
    imbalance: int

    def __bool__(self) -> bool:
        return False


ValidityVerdict = Valid | Conflicting | PredicateFalse | TimeLocked | Overspend


@dataclass(frozen=True)
class Block:
    height: int
    miner: Party
    tx: Transaction | None


@dataclass
class Chain:
    """Blocks, known contracts, redemption map and per-party balances.

    Owned by a single caller; ``advance_round`` is the only mutator in normal use.
    """

    blocks: list[Block] = field(default_factory=list)
    contracts: dict[str, Contract] = field(default_factory=dict)
    redeemed: dict[str, str] = field(default_factory=dict)
    balances: dict[Party, int] = field(default_factory=dict)

    @classmethod
    def genesis(cls, init_tx: Transaction | None = None) -> "Chain":
        chain = cls()
        chain.append(EXTERNAL, init_tx)
        return chain

    @property
    def height(self) -> int:
        return len(self.blocks)

    def contract(self, cid: str) -> Contract:
        try:
            return self.contracts[cid]
        except KeyError:
            raise UnknownContract(cid) from None

    def is_redeemed(self, cid: str) -> bool:
        return cid in self.redeemed

    def append(self, miner: Party, tx: Transaction | None) -> Block:
        height = self.height + 1
        block = Block(height, miner, tx)
        self.blocks.append(block)
        if tx is None:
            return block
        for cid in tx.input_ids():
            self.redeemed[cid] = tx.id
        for out in tx.outputs:
            self.contracts[out.id] = Contract(out.id, out.amount, out.predicate, out.owner, height)
        if tx.external_in:
            self._credit(EXTERNAL, -tx.external_in)
        if tx.fee:
            self._credit(miner, tx.fee)
        return block

    def _credit(self, party: Party, amount: int) -> None:
        self.balances[party] = self.balances.get(party, 0) + amount

    def unredeemed_total(self) -> int:
        return sum(c.amount for cid, c in self.contracts.items() if cid not in self.redeemed)

    def holdings(self, party: Party) -> int:
        """Balance plus the value of unredeemed contracts owned by ``party``."""
        owned = sum(
            c.amount
            for cid, c in self.contracts.items()
            if c.owner == party and cid not in self.redeemed
        )
        return self.balances.get(party, 0) + owned

    def conserved_total(self) -> int:
        return sum(self.balances.values()) + self.unredeemed_total()


def validate_transaction(tx: Transaction, chain: Chain, at_height: int) -> ValidityVerdict:
    """Check ``tx`` for inclusion in a block at ``at_height``.

    Unknown input contracts raise ``UnknownContract``; everything else is a verdict.
    """
    in_total = 0
    for cid, witness in tx.inputs:
        contract = chain.contract(cid)
        if cid in chain.redeemed:
            return Conflicting(chain.redeemed[cid])
        in_total += contract.amount
    imbalance = in_total + tx.external_in - sum(o.amount for o in tx.outputs) - tx.fee
    if imbalance != 0 or tx.fee < 0:
        return Overspend(imbalance)
    if len(set(tx.input_ids())) != len(tx.inputs):
        return Conflicting(tx.id)
    earliest = None
    for cid, witness in tx.inputs:
        contract = chain.contract(cid)
        if witness.signer != tx.creator:
            return PredicateFalse(cid, witness.path)
        if contract.predicate.evaluate(witness, contract.init_height, at_height):
            continue
        unlock = _unlock_height(contract, witness, at_height)
        if unlock is None:
            return PredicateFalse(cid, witness.path)
        earliest = unlock if earliest is None else max(earliest, unlock)
    if earliest is not None:
        return TimeLocked(earliest)
    return Valid()


def _unlock_height(contract: Contract, witness, at_height: int) -> int | None:
    """Earliest height where the witness becomes valid, or None if never."""
    probe = getattr(contract.predicate, "earliest_height", None)
    if probe is None:
        return None
    h = probe(witness, contract.init_height)
    return h if h is not None and h > at_height else None


# --- mempool and the unrelated-transaction stream ----------------------------


class UnrelatedStream:
    """Fresh unrelated transactions, each offering exactly the base fee ``f``."""

    def __init__(self, f: int) -> None:
        if not isinstance(f, int) or f <= 0:
            raise ConfigError("fees.f: base fee must be a positive integer")
        self.f = f
        self._n = 0

    def fresh(self) -> Transaction:
        self._n += 1
        return Transaction(
            id=f"u{self._n:08d}", creator=EXTERNAL, fee=self.f, external_in=self.f, kind="unrelated"
        )

    def peek(self) -> Transaction:
        return Transaction(
            id=f"u{self._n + 1:08d}", creator=EXTERNAL, fee=self.f, external_in=self.f, kind="unrelated"
        )


def base_fee_stream(f: int) -> UnrelatedStream:
    return UnrelatedStream(f)


@dataclass
class Mempool:
    """Published transactions plus every preimage their witnesses revealed."""

    hasher: Hasher
    unrelated: UnrelatedStream
    txs: dict[str, Transaction] = field(default_factory=dict)
    revealed: dict[bytes, bytes] = field(default_factory=dict)

    def publish(self, tx: Transaction) -> None:
        self.txs[tx.id] = tx
        for w in tx.witnesses():
            for pre in (w.pre1, w.pre2):
                if pre is not None:
                    self.revealed[self.hasher.digest(pre)] = pre

    def knows(self, digest: bytes) -> bool:
        return digest in self.revealed

    def discard(self, tx_id: str) -> None:
        self.txs.pop(tx_id, None)


# --- miners --------------------------------------------------------------------


@dataclass(frozen=True)
class MinerPopulation:
    powers: tuple[Fraction, ...]

    def __post_init__(self) -> None:
        if not self.powers:
            raise ConfigError("population: at least one miner is required")
        if any(p <= 0 for p in self.powers):
            raise ConfigError("population: every mining power must be positive")
        if sum(self.powers) != 1:
            raise ConfigError(f"population: powers sum to {sum(self.powers)}, expected 1")

    @classmethod
    def of(cls, values: Sequence) -> "MinerPopulation":
        return cls(tuple(Fraction(str(v)) if isinstance(v, float) else Fraction(v) for v in values))

    @property
    def n(self) -> int:
        return len(self.powers)

    @property
    def lambda_min(self) -> Fraction:
        return min(self.powers)

    def miners(self) -> list[Party]:
        return [Party.miner(i + 1) for i in range(self.n)]

    def power(self, miner: Party) -> Fraction:
        return self.powers[miner.index - 1]

    def sample(self, rng: random.Random) -> Party:
        """Draw a miner with probability exactly proportional to its power."""
        denom = math.lcm(*(p.denominator for p in self.powers))
        r = rng.randrange(denom)
        acc = 0
        for i, p in enumerate(self.powers):
            acc += p.numerator * (denom // p.denominator)
            if r < acc:
                return Party.miner(i + 1)
        raise InvariantViolation("sampling fell off the cumulative distribution")


# --- rounds --------------------------------------------------------------------


@dataclass(frozen=True)
class RoundView:
    """What a selection policy sees when its miner wins a round."""

    height: int
    miner: Party
    chain: Chain
    mempool: Mempool
    candidates: tuple[Transaction, ...]


class SelectionPolicy(Protocol):
    def select(self, view: RoundView) -> Transaction: ...


class MyopicPolicy:
    """Highest fee among currently includable transactions; ties by id."""

    def select(self, view: RoundView) -> Transaction:
        return min(view.candidates, key=lambda t: (-t.fee, t.id))


def includable(chain: Chain, mempool: Mempool, at_height: int) -> tuple[Transaction, ...]:
    out = [mempool.unrelated.peek()]
    for tx in sorted(mempool.txs.values(), key=lambda t: t.id):
        try:
            if validate_transaction(tx, chain, at_height):
                out.append(tx)
        except UnknownContract:
            continue
    return tuple(out)


@dataclass(frozen=True)
class RoundOutcome:
    height: int
    miner: Party
    tx: Transaction
    fee: int

    def trace_record(self) -> dict:
        return {
            "schema": "trace-v1",
            "height": self.height,
            "miner": str(self.miner),
            "tx_id": self.tx.id,
            "fee": self.fee,
            "redeemed_contracts": list(self.tx.input_ids()),
        }


def advance_round(
    chain: Chain,
    mempool: Mempool,
    population: MinerPopulation,
    policy_of: Callable[[Party], SelectionPolicy] | Mapping[Party, SelectionPolicy],
    rng: random.Random,
) -> RoundOutcome:
    """Sample a miner, let its policy pick a transaction, append the block."""
    height = chain.height + 1
    miner = population.sample(rng)
    policy = policy_of[miner] if isinstance(policy_of, Mapping) else policy_of(miner)
    view = RoundView(height, miner, chain, mempool, includable(chain, mempool, height))
    tx = policy.select(view)
    verdict = validate_transaction(tx, chain, height)
    if not verdict:
        raise InvariantViolation(f"miner {miner} chose invalid tx {tx.id}: {verdict}")
    if tx.kind == "unrelated":
        mempool.unrelated.fresh()
    else:
        mempool.publish(tx)
    mempool.discard(tx.id)
    chain.append(miner, tx)
    return RoundOutcome(height, miner, tx, tx.fee)


def dump_trace(outcomes: Iterable[RoundOutcome]) -> str:
    return "".join(json.dumps(o.trace_record(), sort_keys=True) + "\n" for o in outcomes)

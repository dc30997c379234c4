"""Contract predicates over vSig, vPreImg and vTime, plus the relaxed predicate.

A predicate is an Or of named redeem paths. Each path is an And of primitive
leaves. Preimage slots are positional: slot 1 holds pre_a, slot 2 holds pre_b.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

from .ledger import ALICE, BOB, Hasher, Party


class PredicateError(Exception):
    pass


class TimeUndefined(PredicateError):
    """vTime was asked about a contract whose initiating block does not exist yet."""


class UnknownPath(PredicateError, KeyError):
    pass


# --- AST -----------------------------------------------------------------------


@dataclass(frozen=True)
class And:
    children: tuple["Node", ...] = ()


@dataclass(frozen=True)
class Or:
    children: tuple["Node", ...] = ()


@dataclass(frozen=True)
class VSig:
    pk: Party


@dataclass(frozen=True)
class VPreImg:
    slot: int
    dig: bytes

    def __post_init__(self) -> None:
        if self.slot not in (1, 2):
            raise ValueError("preimage slot must be 1 or 2")


@dataclass(frozen=True)
class VTime:
    T: int


Node = Union[And, Or, VSig, VPreImg, VTime]


@dataclass(frozen=True)
class RedeemWitness:
    path: str
    pre1: bytes | None = None
    pre2: bytes | None = None
    signer: Party | None = None


@dataclass(frozen=True)
class PredicateAst:
    """Named redeem paths; the whole predicate is the Or of the path subtrees."""

    paths: tuple[tuple[str, Node], ...]
    hasher: Hasher = Hasher()
    label: str = ""

    @property
    def node(self) -> Or:
        return Or(tuple(sub for _, sub in self.paths))

    def path_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.paths)

    def path(self, name: str) -> Node:
        for n, sub in self.paths:
            if n == name:
                return sub
        raise UnknownPath(name)

    def evaluate(self, witness: RedeemWitness, init_height: int | None, at_height: int) -> bool:
        return evaluate(self, witness, init_height, at_height)

    def earliest_height(self, witness: RedeemWitness, init_height: int | None) -> int | None:
        """Smallest height at which ``witness`` satisfies its path, or None."""
        sub = self.path(witness.path)
        if init_height is None:
            return None
        offsets = sorted({0, *(leaf.T for leaf in _leaves(sub) if isinstance(leaf, VTime))})
        for off in offsets:
            if _eval(sub, witness, self.hasher, init_height, init_height + off):
                return init_height + off
        return None

    def canonical(self) -> str:
        body = " ".join(f"(path {name} {render(sub)})" for name, sub in self.paths)
        return f"(predicate {self.label or '-'} {body})"


def render(node: Node) -> str:
    if isinstance(node, And):
        return "(and" + "".join(" " + render(c) for c in node.children) + ")"
    if isinstance(node, Or):
        return "(or" + "".join(" " + render(c) for c in node.children) + ")"
    if isinstance(node, VSig):
        return f"(vsig {node.pk})"
    if isinstance(node, VPreImg):
        return f"(vpreimg {node.slot} 0x{node.dig.hex()})"
    if isinstance(node, VTime):
        return f"(vtime {node.T})"
    raise TypeError(f"not a predicate node: {node!r}")


def _leaves(node: Node):
    if isinstance(node, (And, Or)):
        for c in node.children:
            yield from _leaves(c)
    else:
        yield node


def _eval(node: Node, w: RedeemWitness, hasher: Hasher, init: int | None, at: int) -> bool:
    if isinstance(node, And):
        return all(_eval(c, w, hasher, init, at) for c in node.children)
    if isinstance(node, Or):
        return any(_eval(c, w, hasher, init, at) for c in node.children)
    if isinstance(node, VSig):
        return w.signer == node.pk
    if isinstance(node, VPreImg):
        pre = w.pre1 if node.slot == 1 else w.pre2
        return pre is not None and hasher.digest(pre) == node.dig
    if isinstance(node, VTime):
        return at >= init + node.T
    raise TypeError(f"not a predicate node: {node!r}")


def evaluate_node(node: Node, witness: RedeemWitness, hasher: Hasher, init_height: int | None, at_height: int) -> bool:
    if init_height is None and any(isinstance(x, VTime) for x in _leaves(node)):
        raise TimeUndefined("vTime needs a confirmed initiating transaction")
    return _eval(node, witness, hasher, init_height, at_height)


def evaluate(ast: PredicateAst, witness: RedeemWitness, init_height: int | None, at_height: int) -> bool:
    """Evaluate the path named by ``witness.path`` at ``at_height``."""
    return evaluate_node(ast.path(witness.path), witness, ast.hasher, init_height, at_height)


# --- the three contracts -----------------------------------------------------------


def _check(T: int) -> None:
    if not isinstance(T, int) or T < 1:
        raise ValueError(f"timeout T must be an integer >= 1, got {T!r}")


def make_htlc(pk_a: Party, pk_b: Party, T: int, dig_a: bytes, hasher: Hasher = Hasher()) -> PredicateAst:
    _check(T)
    return PredicateAst(
        (
            ("htlc-A", And((VPreImg(1, dig_a), VSig(pk_a)))),
            ("htlc-B", And((VSig(pk_b), VTime(T)))),
        ),
        hasher,
        "htlc",
    )


def make_mh_dep(
    pk_a: Party, pk_b: Party, T: int, dig_a: bytes, dig_b: bytes, hasher: Hasher = Hasher()
) -> PredicateAst:
    _check(T)
    if dig_a == dig_b:
        raise ValueError("dig_a and dig_b must differ")
    return PredicateAst(
        (
            ("dep-A", And((VPreImg(1, dig_a), VSig(pk_a)))),
            ("dep-B", And((VPreImg(2, dig_b), VSig(pk_b), VTime(T)))),
            ("dep-M", And((VPreImg(1, dig_a), VPreImg(2, dig_b)))),
        ),
        hasher,
        "mh-dep",
    )


def make_mh_col(pk_b: Party, T: int, dig_a: bytes, dig_b: bytes, hasher: Hasher = Hasher()) -> PredicateAst:
    _check(T)
    if dig_a == dig_b:
        raise ValueError("dig_a and dig_b must differ")
    return PredicateAst(
        (
            ("col-B", And((VTime(T), VSig(pk_b)))),
            ("col-M", And((VTime(T), VPreImg(1, dig_a), VPreImg(2, dig_b)))),
        ),
        hasher,
        "mh-col",
    )


def always_true(label: str = "open") -> PredicateAst:
    """Constant-true predicate with a single vacuous path ``any``."""
    return PredicateAst((("any", And(())),), Hasher(), label)


def owned_by(pk: Party) -> PredicateAst:
    return PredicateAst((("owner", VSig(pk)),), Hasher(), f"owner-{pk}")


# --- relaxed predicate ---------------------------------------------------------------

MAD_PATHS = ("dep-A", "dep-B", "dep-M", "col-B", "col-M")


def r_predicate(path: str, party: Party, wa: bool, wb: bool) -> bool:
    if path == "dep-A":
        return party == ALICE and bool(wa)
    if path == "dep-B":
        return party == BOB and bool(wb)
    if path in ("dep-M", "col-M"):
        return bool(wa) and bool(wb)
    if path == "col-B":
        return party == BOB
    raise UnknownPath(path)


# --- possible redeeming entities ---------------------------------------------------


def redeeming_entities(
    ast: PredicateAst,
    pre_a: bytes,
    pre_b: bytes,
    a_published: bool,
    b_published: bool,
    init_height: int,
    at_height: int,
    miner: Party = Party.miner(1),
) -> frozenset[str]:
    """Which of A, B and a miner can redeem ``ast`` when only published preimages are known.

    Each entity holds its own signing key and nothing else beyond the public
    preimages; every path is tried with every available preimage assignment.
    """
    known = ([pre_a] if a_published else []) + ([pre_b] if b_published else [])
    options = [None, *known]
    who = set()
    for party, tag in ((ALICE, "A"), (BOB, "B"), (miner, "M")):
        for name in ast.path_names():
            if any(
                evaluate(ast, RedeemWitness(name, p1, p2, party), init_height, at_height)
                for p1 in options
                for p2 in options
            ):
                who.add(tag)
                break
    return frozenset(who)

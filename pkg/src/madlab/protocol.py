"""The relaxed MAD-HTLC protocol, its ideal functionality, and a bounded model checker.

``run_protocol`` executes the three-party protocol over the mempool/blockchain
projection functionality (G_mbp). ``run_frmh`` executes the ideal functionality
F_rmh. Both are pure step functions over hashable states, so the checker can
merge identical product states while counting scripts exactly.
"""

from __future__ import annotations

import hashlib
import itertools
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

from .contracts import MAD_PATHS, r_predicate
from .ledger import ALICE, BOB, Hasher, Party

MINER = Party.miner(1)
PARTIES = (ALICE, BOB, MINER)
PARTY_NAMES = {ALICE: "A", BOB: "B", MINER: "M"}


@dataclass(frozen=True, order=True)
class Action:
    kind: str
    party: str = ""
    path: str = ""

    def __str__(self) -> str:
        if self.kind == "publish":
            return f"publish({self.party})"
        if self.kind == "redeem":
            return f"redeem({self.party},{self.path})"
        return self.kind

    @staticmethod
    def parse(text: str) -> "Action":
        text = text.replace(" ", "")
        if text.startswith("publish(") and text.endswith(")"):
            return Action("publish", text[8:-1])
        if text.startswith("redeem(") and text.endswith(")"):
            party, path = text[7:-1].split(",")
            return Action("redeem", party, path)
        if text in ("setup-B", "setup-A", "share", "init"):
            return Action(text)
        raise ValueError(f"unknown action {text!r}")


ALPHABET: tuple[Action, ...] = (
    Action("setup-B"),
    Action("setup-A"),
    Action("share"),
    Action("publish", "A"),
    Action("publish", "B"),
    Action("init"),
    *(Action("redeem", p, path) for p in ("A", "B", "M") for path in MAD_PATHS),
)

_PARTY = {"A": ALICE, "B": BOB, "M": MINER}
_NEEDS_PRE1 = {"dep-A", "dep-M", "col-M"}
_NEEDS_PRE2 = {"dep-B", "dep-M", "col-M"}


# --- the real protocol over G_mbp -----------------------------------------------


@dataclass(frozen=True)
class ProtocolState:
    phase_a: str = "setup"
    phase_b: str = "setup"
    phase_m: str = "initiation"
    # B's secrets, A's stored digests and (possibly) shared pre_a
    b_pre_a: bytes | None = None
    b_pre_b: bytes | None = None
    a_dig: tuple[bytes, bytes] | None = None
    a_pre_a: bytes | None = None
    a_tx: str | None = None
    b_tx: str | None = None
    m_received: bool = False
    # G_mbp internals
    g_dig: tuple[bytes, bytes] | None = None
    g_tx: str | None = None
    g_publish: bool = False
    g_init: bool = False
    g_w1: bool = False
    g_w2: bool = False

    @property
    def shared(self) -> bool:
        return self.a_pre_a is not None

    def triple(self) -> tuple[bool, bool, bool]:
        return (self.g_w1, self.g_w2, self.shared)


@dataclass(frozen=True)
class ProtocolParams:
    seed: bytes = b"madlab"
    hasher: Hasher = Hasher()
    with_share: bool = True


def _draw(seed: bytes, label: bytes, mu: int) -> bytes:
    return hashlib.sha256(seed + b"/" + label).digest()[: mu // 8]


def protocol_step(
    s: ProtocolState, act: Action, params: ProtocolParams = ProtocolParams()
) -> tuple[ProtocolState, bool | None]:
    """Deliver one environment input; return the new state and any redeem output."""
    H = params.hasher.digest
    if act.kind == "setup-B":
        if s.phase_b != "setup" or s.b_pre_a is not None:
            return s, None
        pre_a = _draw(params.seed, b"pre_a", params.hasher.mu)
        pre_b = _draw(params.seed, b"pre_b", params.hasher.mu)
        s = replace(s, b_pre_a=pre_a, b_pre_b=pre_b)
        if s.g_dig is None:
            dig = (H(pre_a), H(pre_b))
            # G_mbp stores the digests and forwards them to A
            s = replace(s, g_dig=dig, a_dig=dig if s.phase_a == "setup" else s.a_dig)
        return s, None
    if act.kind == "setup-A":
        if s.phase_a != "setup" or s.a_dig is None or s.g_dig is None:
            return s, None
        tx = "init-" + hashlib.sha256(s.g_dig[0] + s.g_dig[1]).hexdigest()[:16]
        s = replace(s, g_tx=tx, a_tx=tx, phase_a="initiation")
        if s.phase_b == "setup" and s.b_pre_a is not None:
            s = replace(s, b_tx=tx, phase_b="initiation")
        return s, None
    if act.kind == "share":
        if not params.with_share or s.phase_b != "initiation":
            return s, None
        if s.phase_a == "initiation" and s.a_dig is not None and H(s.b_pre_a) == s.a_dig[0]:
            s = replace(s, a_pre_a=s.b_pre_a)
        return s, None
    if act.kind == "publish":
        phase = s.phase_a if act.party == "A" else s.phase_b
        if act.party not in ("A", "B") or phase != "initiation" or s.g_publish:
            return s, None
        s = replace(s, g_publish=True)
        if s.phase_m == "initiation":
            s = replace(s, m_received=True)
        return s, None
    if act.kind == "init":
        if s.phase_m != "initiation" or not s.m_received or not s.g_publish:
            return s, None
        s = replace(s, g_init=True, phase_m="redeeming")
        if s.phase_a == "initiation":
            s = replace(s, phase_a="redeeming")
        if s.phase_b == "initiation":
            s = replace(s, phase_b="redeeming")
        return s, None
    if act.kind == "redeem":
        phase = {"A": s.phase_a, "B": s.phase_b, "M": s.phase_m}[act.party]
        if phase != "redeeming" or act.path not in MAD_PATHS:
            return s, None
        held_a = {"A": s.a_pre_a, "B": s.b_pre_a, "M": None}[act.party]
        held_b = {"A": None, "B": s.b_pre_b, "M": None}[act.party]
        pre1 = held_a if act.path in _NEEDS_PRE1 else None
        pre2 = held_b if act.path in _NEEDS_PRE2 else None
        w1 = s.g_w1 or (pre1 is not None and H(pre1) == s.g_dig[0])
        w2 = s.g_w2 or (pre2 is not None and H(pre2) == s.g_dig[1])
        s = replace(s, g_w1=w1, g_w2=w2)
        return s, r_predicate(act.path, _PARTY[act.party], w1, w2)
    raise ValueError(f"unknown action {act}")


# --- the ideal functionality --------------------------------------------------------


@dataclass(frozen=True)
class FrmhState:
    setup_a: bool = False
    setup_b: bool = False
    shared: bool = False
    published: bool = False
    init: bool = False
    w1: bool = False
    w2: bool = False

    def triple(self) -> tuple[bool, bool, bool]:
        return (self.w1, self.w2, self.shared)


def frmh_step(s: FrmhState, act: Action, faults: frozenset[str] = frozenset()) -> tuple[FrmhState, bool | None]:
    if act.kind == "setup-B":
        return (replace(s, setup_b=True) if not s.setup_b else s), None
    if act.kind == "setup-A":
        return (replace(s, setup_a=True) if s.setup_b and not s.setup_a else s), None
    if act.kind == "share":
        return (replace(s, shared=True) if s.setup_a and not s.shared else s), None
    if act.kind == "publish":
        ok = act.party in ("A", "B") and s.setup_a and not s.published
        return (replace(s, published=True) if ok else s), None
    if act.kind == "init":
        return (replace(s, init=True) if s.published and not s.init else s), None
    if act.kind == "redeem":
        if not s.init or act.path not in MAD_PATHS:
            return s, None
        P, path = act.party, act.path
        w1 = s.w1 or (P == "A" and s.shared and path == "dep-A") or (
            P == "B" and path in ("dep-A", "dep-M", "col-M")
        )
        w2 = s.w2
        if "skip-w2" not in faults:
            w2 = s.w2 or (P == "B" and path in ("dep-B", "dep-M", "col-M"))
        s = replace(s, w1=w1, w2=w2)
        return s, r_predicate(path, _PARTY[P], w1, w2)
    raise ValueError(f"unknown action {act}")


def update(s: FrmhState, i: int) -> FrmhState:
    """The simulator's influence port: force one revelation indicator."""
    return replace(s, w1=True) if i == 0 else replace(s, w2=True)


# --- trace runners -----------------------------------------------------------------


@dataclass(frozen=True)
class TraceOutcome:
    results: tuple[tuple[int, str, bool], ...]
    w1: bool
    w2: bool
    shared: bool
    revealed: frozenset[str]
    phases: tuple[str, str, str] = ("", "", "")

    def triple(self) -> tuple[bool, bool, bool]:
        return (self.w1, self.w2, self.shared)

    def to_dict(self) -> dict:
        return {
            "results": [[i, a, r] for i, a, r in self.results],
            "w1": self.w1,
            "w2": self.w2,
            "shared": self.shared,
            "revealed": sorted(self.revealed),
        }


def _as_actions(script: Iterable[Action | str]) -> list[Action]:
    return [a if isinstance(a, Action) else Action.parse(a) for a in script]


def run_protocol(
    script: Sequence[Action | str], with_share: bool = True, params: ProtocolParams | None = None
) -> TraceOutcome:
    params = params or ProtocolParams(with_share=with_share)
    s = ProtocolState()
    results = []
    for i, act in enumerate(_as_actions(script)):
        s, out = protocol_step(s, act, params)
        if out is not None:
            results.append((i, str(act), out))
    revealed = frozenset(n for n, w in (("pre_a", s.g_w1), ("pre_b", s.g_w2)) if w)
    return TraceOutcome(tuple(results), s.g_w1, s.g_w2, s.shared, revealed, (s.phase_a, s.phase_b, s.phase_m))


def run_frmh(script: Sequence[Action | str], faults: frozenset[str] = frozenset()) -> TraceOutcome:
    s = FrmhState()
    results = []
    for i, act in enumerate(_as_actions(script)):
        s, out = frmh_step(s, act, faults)
        if out is not None:
            results.append((i, str(act), out))
    revealed = frozenset(n for n, w in (("pre_a", s.w1), ("pre_b", s.w2)) if w)
    return TraceOutcome(tuple(results), s.w1, s.w2, s.shared, revealed)


# --- promised validity of each redeem attempt ---------------------------------------


def lemma1_expected(party: str, path: str, w1: bool, w2: bool, shared: bool) -> bool:
    """Validity promised by the lemma, from the indicator values before the attempt."""
    if party == "B":
        return path in ("dep-B", "dep-M", "col-B", "col-M")
    if party == "A":
        if path == "dep-A":
            return w1 or shared
        if path in ("dep-M", "col-M"):
            return (w1 or shared) and w2
        return False
    return path in ("dep-M", "col-M") and w1 and w2


# --- model checker --------------------------------------------------------------------


@dataclass
class EquivalenceReport:
    max_len: int
    scripts_checked: int = 0
    divergent_scripts: int = 0
    discrepancies: list[dict] = field(default_factory=list)
    lemma1_violations: list[dict] = field(default_factory=list)
    flags: list[dict] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.discrepancies and not self.lemma1_violations

    def to_dict(self) -> dict:
        return {
            "max_len": self.max_len,
            "scripts_checked": self.scripts_checked,
            "divergent_scripts": self.divergent_scripts,
            "discrepancies": self.discrepancies,
            "lemma1_violations": self.lemma1_violations,
            "flags": self.flags,
            "counts": dict(sorted(self.counts.items())),
        }


def _abstract(p: ProtocolState) -> tuple:
    # byte values are fixed by the seed, so presence is all that matters
    return (
        p.phase_a, p.phase_b, p.phase_m, p.b_pre_a is not None, p.a_dig is not None,
        p.a_pre_a is not None, p.m_received, p.g_dig is not None, p.g_tx is not None,
        p.g_publish, p.g_init, p.g_w1, p.g_w2,
    )


def model_check_lemma1(
    max_len: int,
    *,
    params: ProtocolParams = ProtocolParams(),
    faults: frozenset[str] = frozenset(),
    max_examples: int = 25,
) -> EquivalenceReport:
    """Exhaustively compare both models on every action script up to ``max_len``.

    Scripts are explored breadth-first with identical product states merged and
    weighted by how many scripts reach them, so counts are exact. A script is
    divergent when some redeem output differs or its final (w1, w2, shared)
    triples differ. Each distinct kind of divergence is reported with the
    first (shortest, alphabet-ordered) script exhibiting it.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    rep = EquivalenceReport(max_len)
    seen_disc: set = set()
    seen_viol: set = set()
    seen_flag: set = set()
    counts: Counter = Counter()
    # frontier: (protocol, frmh, outputs_diverged) -> (script count, first script)
    frontier: dict[tuple, list] = {(ProtocolState(), FrmhState(), False): [1, ()]}
    for depth in range(1, max_len + 1):
        nxt: dict[tuple, list] = {}
        for (ps, fs, diverged), (mult, script) in frontier.items():
            for act in ALPHABET:
                ps2, out_p = protocol_step(ps, act, params)
                fs2, out_f = frmh_step(fs, act, faults)
                path = script + (str(act),)
                step_div = out_p != out_f
                if step_div:
                    key = ("result", str(act), _abstract(ps), fs)
                    counts["result_mismatch_steps"] += mult
                    if key not in seen_disc and len(rep.discrepancies) < max_examples:
                        seen_disc.add(key)
                        rep.discrepancies.append(
                            {"kind": "result", "script": list(path), "protocol": out_p, "frmh": out_f}
                        )
                if act.kind == "redeem":
                    for model, out, (w1, w2, sh) in (
                        ("protocol", out_p, ps.triple()),
                        ("frmh", out_f, fs.triple()),
                    ):
                        if out is None:
                            continue
                        want = lemma1_expected(act.party, act.path, w1, w2, sh)
                        if out != want:
                            counts[f"lemma1_{model}"] += mult
                            key = (model, str(act), w1, w2, sh)
                            if key not in seen_viol and len(rep.lemma1_violations) < max_examples:
                                seen_viol.add(key)
                                rep.lemma1_violations.append(
                                    {"model": model, "script": list(path), "got": out, "expected": want,
                                     "before": {"w1": w1, "w2": w2, "shared": sh}}
                                )
                    for model, before, after in (
                        ("protocol", ps.g_w1, ps2.g_w1),
                        ("frmh", fs.w1, fs2.w1),
                    ):
                        if act.party == "B" and act.path == "dep-A" and after and not before:
                            counts[f"flag_b_dep_a_{model}"] += mult
                            if model not in seen_flag:
                                seen_flag.add(model)
                                rep.flags.append(
                                    {"flag": "b-dep-a-reveals-pre_a", "model": model, "script": list(path)}
                                )
                div2 = diverged or step_div
                if div2 or ps2.triple() != fs2.triple():
                    rep.divergent_scripts += mult
                    fresh = ps.triple() == fs.triple() and ps2.triple() != fs2.triple()
                    if fresh and not div2:
                        counts["triple_mismatch_steps"] += mult
                        key = ("triple", str(act), _abstract(ps), fs)
                        if key not in seen_disc and len(rep.discrepancies) < max_examples:
                            seen_disc.add(key)
                            rep.discrepancies.append(
                                {"kind": "triple", "script": list(path),
                                 "protocol": list(ps2.triple()), "frmh": list(fs2.triple())}
                            )
                rep.scripts_checked += mult
                k = (ps2, fs2, div2)
                if k in nxt:
                    nxt[k][0] += mult
                else:
                    nxt[k] = [mult, path]
        frontier = nxt
    rep.counts = dict(counts)
    rep.discrepancies.sort(key=lambda d: (len(d["script"]), d["script"]))
    rep.lemma1_violations.sort(key=lambda d: (len(d["script"]), d["script"]))
    return rep


def brute_force_divergent(max_len: int, params: ProtocolParams = ProtocolParams()) -> tuple[int, int]:
    """Second route for small bounds: run every script through both runners."""
    checked = divergent = 0
    for n in range(1, max_len + 1):
        for script in itertools.product(ALPHABET, repeat=n):
            p = run_protocol(script, params=params)
            f = run_frmh(script)
            checked += 1
            if p.results != f.results or p.triple() != f.triple():
                divergent += 1
    return checked, divergent


def scripts_upto(max_len: int) -> int:
    return sum(len(ALPHABET) ** k for k in range(1, max_len + 1))

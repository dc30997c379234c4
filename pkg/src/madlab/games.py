"""Extensive-form games for MAD-HTLC and HTLC, solved by backward induction.

A round k runs in three steps: A may publish, then B may publish, then a miner
drawn with probability lambda_j creates the block. Round T is the last one. The
solver works on exact rationals and memoizes every subgame it touches, so any
state can be queried after the fact (``Solver.miner_choice`` and friends).

Player vectors are tuples indexed as (A, B, M1, ..., Mn).
"""

from __future__ import annotations

import hashlib
import itertools
import math
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Iterable, Mapping

from . import contracts
from .contracts import RedeemWitness
from .ledger import (
    ALICE,
    BOB,
    EXTERNAL,
    Chain,
    ConfigError,
    Contract,
    Hasher,
    Mempool,
    MinerPopulation,
    MyopicPolicy,
    Party,
    RoundView,
    Transaction,
    UnrelatedStream,
    advance_round,
    random_preimage,
)

MAD = "mad-htlc"
HTLC = "htlc"
GAMES = (MAD, HTLC)

UNRELATED = "unrelated"
MAD_A = ("txA_dep",)
MAD_B = ("txB_col", "txB_dep", "txB_3")
HTLC_A = ("txA_htlc",)
HTLC_B = ("txB_htlc",)


class NotApplicable(Exception):
    """The closed-form lemma's hypothesis does not hold for this subgame."""


# --- configuration ------------------------------------------------------------------


@dataclass(frozen=True)
class GameConfig:
    game: str
    T: int
    population: MinerPopulation
    f: int
    v_dep: int
    v_col: int = 0
    f_a_dep: int = 0
    f_b_dep: int = 0
    f_b_col: int = 0
    f_b_3: int = 0
    f_a_htlc: int = 0
    f_b_htlc: int = 0
    alice_knows: bool = True
    myopic: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        def need(ok: bool, key: str, msg: str) -> None:
            if not ok:
                raise ConfigError(f"{key}: {msg}")

        need(self.game in GAMES, "game", f"must be one of {GAMES}")
        need(isinstance(self.T, int) and self.T >= 1, "timeout", "T must be an integer >= 1")
        need(isinstance(self.f, int) and self.f > 0, "fees.f", "base fee must be a positive integer")
        need(all(1 <= i <= self.population.n for i in self.myopic), "policies", "myopic miner index out of range")
        f = self.f
        if self.game == MAD:
            need(self.v_col > 0, "game.v_col", "collateral must be positive")
            need(f < self.f_a_dep < self.v_dep, "fees.f_a_dep", "need f < f_A^dep < v_dep (A must outbid unrelated txs)")
            need(f < self.f_b_dep < self.v_dep, "fees.f_b_dep", "need f < f_B^dep < v_dep")
            need(f < self.f_b_col < self.v_col, "fees.f_b_col", "need f < f_B^col < v_col")
            need(f < self.f_b_3 < self.v_dep + self.v_col, "fees.f_b_3", "need f < f_B^3 < v_dep + v_col")
        else:
            need(f < self.f_a_htlc < self.v_dep, "fees.f_a_htlc", "need f < f_A^htlc < v")
            need(f < self.f_b_htlc < self.v_dep, "fees.f_b_htlc", "need f < f_B^htlc < v")

    @property
    def n(self) -> int:
        return self.population.n

    @property
    def kinds_a(self) -> tuple[str, ...]:
        if self.game == HTLC:
            return HTLC_A
        return MAD_A if self.alice_knows else ()

    @property
    def kinds_b(self) -> tuple[str, ...]:
        return HTLC_B if self.game == HTLC else MAD_B

    def fee(self, kind: str) -> int:
        return {
            "txA_dep": self.f_a_dep,
            "txB_dep": self.f_b_dep,
            "txB_col": self.f_b_col,
            "txB_3": self.f_b_3,
            "txA_htlc": self.f_a_htlc,
            "txB_htlc": self.f_b_htlc,
        }[kind]

    def with_(self, **kw) -> "GameConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = {
            "game": self.game,
            "T": self.T,
            "f": self.f,
            "v_dep": self.v_dep,
            "population": [str(p) for p in self.population.powers],
            "myopic": sorted(self.myopic),
        }
        if self.game == MAD:
            d.update(v_col=self.v_col, f_a_dep=self.f_a_dep, f_b_dep=self.f_b_dep,
                     f_b_col=self.f_b_col, f_b_3=self.f_b_3, alice_knows=self.alice_knows)
        else:
            d.update(f_a_htlc=self.f_a_htlc, f_b_htlc=self.f_b_htlc)
        return d


# --- subgames and actions -------------------------------------------------------------


@dataclass(frozen=True, order=True)
class SubgameId:
    k: int
    red: bool
    published: frozenset[str] = frozenset()

    @property
    def revealed(self) -> frozenset[str]:
        out = set()
        if self.published & {"txA_dep", "txA_htlc"}:
            out.add("pre_a")
        if self.published & {"txB_dep", "txB_3"}:
            out.add("pre_b")
        return frozenset(out)

    def label(self) -> str:
        pub = "+".join(sorted(self.published)) or "-"
        return f"k={self.k} {'red' if self.red else 'irred'} pub={pub}"


def miner_actions(sid: SubgameId, cfg: GameConfig) -> tuple[str, ...]:
    """Every action a miner may take in the block of round ``sid.k``."""
    k, red, pub = sid.k, sid.red, sid.published
    last = k == cfg.T
    acts = [UNRELATED]
    if cfg.game == HTLC:
        if red and "txA_htlc" in pub:
            acts.append("include:txA_htlc")
        if red and last and "txB_htlc" in pub:
            acts.append("include:txB_htlc")
        return tuple(acts)
    if red and "txA_dep" in pub:
        acts.append("include:txA_dep")
    if last and "txB_col" in pub:
        acts.append("include:txB_col")
    if last and red:
        acts += [f"include:{x}" for x in ("txB_dep", "txB_3") if x in pub]
    both = sid.revealed == {"pre_a", "pre_b"}
    if both and red:
        acts.append("txM_dep")
    if both and last:
        acts.append("txM_col")
    if both and red and last:
        acts.append("txM_3")
    return tuple(acts)


def _a_options(sid: SubgameId, cfg: GameConfig) -> list[frozenset[str]]:
    avail = [x for x in cfg.kinds_a if x not in sid.published and sid.red]
    return [frozenset(avail)] + [frozenset()] if avail else [frozenset()]


def _b_candidates(sid: SubgameId, cfg: GameConfig) -> list[str]:
    out = []
    for x in cfg.kinds_b:
        if x in sid.published:
            continue
        if x in ("txB_dep", "txB_3", "txB_htlc") and not sid.red:
            continue
        out.append(x)
    return sorted(out)


def _b_options(sid: SubgameId, cfg: GameConfig) -> list[frozenset[str]]:
    cand = _b_candidates(sid, cfg)
    subsets = []
    for r in range(len(cand) + 1):
        subsets += [frozenset(c) for c in itertools.combinations(cand, r)]
    return subsets


def enumerate_actions(sid: SubgameId, cfg: GameConfig, actor) -> tuple[str, ...]:
    """Actions of ``actor`` ("A", "B" or a miner) at ``sid``.

    A and B list publication options as ``publish:<tx>[+<tx>...]`` plus ``pass``.
    """
    if actor in ("A", ALICE):
        return tuple("publish:" + "+".join(sorted(o)) if o else "pass" for o in _a_options(sid, cfg))
    if actor in ("B", BOB):
        return tuple("publish:" + "+".join(sorted(o)) if o else "pass" for o in _b_options(sid, cfg))
    return miner_actions(sid, cfg)


def apply_miner_action(cfg: GameConfig, j: int, action: str, red: bool) -> tuple[tuple[Fraction, ...], bool]:
    """Immediate payoff vector and the next deposit state when miner ``j`` plays ``action``."""
    vec = [0] * (cfg.n + 2)
    m = 1 + j  # miner j (1-based) sits at index j + 1

    def pay(idx: int, amt: int) -> None:
        vec[idx] += amt

    if action == UNRELATED:
        pay(m, cfg.f)
    elif action.startswith("include:"):
        kind = action[8:]
        fee = cfg.fee(kind)
        pay(m, fee)
        if kind == "txA_dep":
            pay(0, cfg.v_dep - fee)
            red = False
        elif kind == "txA_htlc":
            pay(0, cfg.v_dep - fee)
            red = False
        elif kind == "txB_htlc":
            pay(1, cfg.v_dep - fee)
            red = False
        elif kind == "txB_dep":
            pay(1, cfg.v_dep - fee)
            red = False
        elif kind == "txB_col":
            pay(1, cfg.v_col - fee)
        elif kind == "txB_3":
            pay(1, cfg.v_dep + cfg.v_col - fee)
            red = False
    elif action == "txM_dep":
        pay(m, cfg.v_dep)
        red = False
    elif action == "txM_col":
        pay(m, cfg.v_col)
    elif action == "txM_3":
        pay(m, cfg.v_dep + cfg.v_col)
        red = False
    else:
        raise ValueError(f"unknown miner action {action}")
    return tuple(Fraction(x) for x in vec), red


def _immediate_fee(cfg: GameConfig, action: str) -> int:
    if action == UNRELATED:
        return cfg.f
    return cfg.fee(action[8:])


def _vadd(a, b):
    return tuple(x + y for x, y in zip(a, b))


def _vscale(c, a):
    return tuple(c * x for x in a)


# --- solver ----------------------------------------------------------------------------

Policy = Callable[[SubgameId], frozenset]


@dataclass(frozen=True)
class Tie:
    sid: str
    actor: str
    actions: tuple[str, ...]
    chosen: str

    def to_dict(self) -> dict:
        return {"subgame": self.sid, "actor": self.actor, "tied": list(self.actions), "chosen": self.chosen}


class Solver:
    """Memoized backward induction.

    ``a_policy`` / ``b_policy`` pin A's or B's publication choice (as a function of
    the round-start subgame) instead of optimizing it; miners always best-respond
    to whatever A and B do.
    """

    def __init__(self, cfg: GameConfig, a_policy: Policy | None = None, b_policy: Policy | None = None):
        self.cfg = cfg
        self.a_policy = a_policy
        self.b_policy = b_policy
        self._pre: dict[SubgameId, tuple] = {}
        self._post: dict[SubgameId, tuple] = {}
        self._choice: dict[tuple[SubgameId, int], tuple[str, tuple[str, ...]]] = {}
        self.a_choice: dict[SubgameId, frozenset] = {}
        self.b_choice: dict[SubgameId, frozenset] = {}
        self.ab_ties: dict[SubgameId, Tie] = {}
        self._zero = tuple(Fraction(0) for _ in range(cfg.n + 2))

    # values -----------------------------------------------------------------------

    def pre(self, sid: SubgameId) -> tuple:
        """Value of round ``sid.k`` before A and B move."""
        if sid.k > self.cfg.T:
            return self._zero
        if sid in self._pre:
            return self._pre[sid]
        cfg = self.cfg
        if self.a_policy is not None:
            a_opts = [frozenset(self.a_policy(sid)) - sid.published]
        else:
            a_opts = _a_options(sid, cfg)
        best_a = None
        for a in a_opts:
            after_a = replace(sid, published=sid.published | a)
            b, val = self._best_b(sid, after_a)
            if best_a is None or val[0] > best_a[2][0]:
                best_a = (a, b, val)
            elif val[0] == best_a[2][0] and len(a_opts) > 1:
                self.ab_ties.setdefault(sid, Tie(sid.label(), "A", ("publish", "pass"), "publish"))
        a, b, val = best_a
        self.a_choice[sid] = a
        self.b_choice[sid] = b
        self._pre[sid] = val
        return val

    def _best_b(self, start: SubgameId, after_a: SubgameId) -> tuple[frozenset, tuple]:
        if self.b_policy is not None:
            opts = [frozenset(self.b_policy(start)) - after_a.published]
            opts = [frozenset(x for x in opts[0] if x in _b_candidates(after_a, self.cfg))]
        else:
            opts = _b_options(after_a, self.cfg)
        best = None
        tied = []
        for b in opts:
            val = self.post(replace(after_a, published=after_a.published | b))
            if best is None or val[1] > best[1][1]:
                best, tied = (b, val), [b]
            elif val[1] == best[1][1]:
                tied.append(b)
        if len(tied) > 1 and start not in self.ab_ties:
            names = tuple("+".join(sorted(t)) or "pass" for t in tied)
            self.ab_ties[start] = Tie(after_a.label(), "B", names, names[0])
        return best

    def post(self, sid: SubgameId) -> tuple:
        """Value of round ``sid.k`` after publication, before the block is drawn."""
        if sid in self._post:
            return self._post[sid]
        cfg = self.cfg
        total = self._zero
        for j, lam in enumerate(cfg.population.powers, start=1):
            action, _ = self.miner_choice(sid, j)
            delta, red2 = apply_miner_action(cfg, j, action, sid.red)
            cont = self.pre(SubgameId(sid.k + 1, red2, sid.published))
            total = _vadd(total, _vscale(lam, _vadd(delta, cont)))
        self._post[sid] = total
        return total

    def miner_values(self, sid: SubgameId, j: int) -> dict[str, Fraction]:
        """Miner j's total expected utility for each available action."""
        out = {}
        for a in miner_actions(sid, self.cfg):
            delta, red2 = apply_miner_action(self.cfg, j, a, sid.red)
            cont = self.pre(SubgameId(sid.k + 1, red2, sid.published))
            out[a] = delta[j + 1] + cont[j + 1]
        return out

    def miner_choice(self, sid: SubgameId, j: int) -> tuple[str, tuple[str, ...]]:
        """(chosen action, all actions tied at the optimum) for miner j."""
        key = (sid, j)
        if key in self._choice:
            return self._choice[key]
        if j in self.cfg.myopic:
            acts = [a for a in miner_actions(sid, self.cfg) if a == UNRELATED or a.startswith("include:")]
            scores = {a: Fraction(_immediate_fee(self.cfg, a)) for a in acts}
        else:
            scores = self.miner_values(sid, j)
        top = max(scores.values())
        tied = tuple(sorted((a for a, v in scores.items() if v == top), key=lambda a: (a != UNRELATED, a)))
        self._choice[key] = (tied[0], tied)
        return self._choice[key]

    def miner_utility(self, sid: SubgameId, j: int, after_publication: bool = True) -> Fraction:
        v = self.post(sid) if after_publication else self.pre(sid)
        return v[j + 1]


# --- solution ------------------------------------------------------------------------


def _fmt(x: Fraction) -> str:
    return str(x)


@dataclass
class SpeSolution:
    cfg: GameConfig
    solver: Solver
    utilities: tuple
    outcomes: dict[str, Fraction]
    reachable_post: list[SubgameId]
    reachable_pre: list[SubgameId]
    ties: list[Tie] = field(default_factory=list)
    offpath_ties: list[Tie] = field(default_factory=list)
    ab_ties: list[Tie] = field(default_factory=list)

    @property
    def u_A(self) -> Fraction:
        return self.utilities[0]

    @property
    def u_B(self) -> Fraction:
        return self.utilities[1]

    def u_miner(self, j: int) -> Fraction:
        return self.utilities[j + 1]

    @property
    def unique(self) -> bool:
        return not self.ties

    @property
    def attack_spe(self) -> bool | None:
        if self.cfg.game != HTLC:
            return None
        return self.outcome_probability(lambda o: "include:txB_htlc" in o) == 1

    def outcome_probability(self, pred: Callable[[tuple[str, ...]], bool]) -> Fraction:
        return sum((p for o, p in self.outcomes.items() if pred(tuple(o.split(",")))), Fraction(0))

    def miner_choice(self, sid: SubgameId, j: int) -> str:
        return self.solver.miner_choice(sid, j)[0]

    def withholds_everywhere(self, strict: bool = True) -> bool:
        """Every miner withholds A's tx before T and includes B's at T (both published).

        With ``strict`` a miner that is merely indifferent does not count.
        """
        cfg = self.cfg
        if cfg.game != HTLC:
            raise NotApplicable("withholding is defined for the HTLC game")
        both = frozenset(HTLC_A + HTLC_B)
        for k in range(1, cfg.T + 1):
            want = UNRELATED if k < cfg.T else "include:txB_htlc"
            for j in range(1, cfg.n + 1):
                if j in cfg.myopic:
                    continue
                act, tied = self.solver.miner_choice(SubgameId(k, True, both), j)
                if act != want or (strict and len(tied) > 1):
                    return False
        return True

    def profile_rows(self) -> list[dict]:
        rows = []
        reach = set(self.reachable_post)
        for sid in sorted(self.solver._post):
            for j in range(1, self.cfg.n + 1):
                act, tied = self.solver.miner_choice(sid, j)
                rows.append({
                    "k": sid.k,
                    "state": "red" if sid.red else "irred",
                    "published": "+".join(sorted(sid.published)),
                    "miner": f"M{j}",
                    "action": act,
                    "utility": _fmt(self.solver.post(sid)[j + 1]),
                    "reachable": sid in reach,
                    "unique": len(tied) == 1,
                })
        return rows

    def to_dict(self) -> dict:
        names = ["A", "B"] + [f"M{j}" for j in range(1, self.cfg.n + 1)]
        out = {
            "config": self.cfg.to_dict(),
            "u_A": _fmt(self.u_A),
            "u_B": _fmt(self.u_B),
            "utilities": {n: _fmt(u) for n, u in zip(names, self.utilities)},
            "unique": self.unique,
            "ties": [t.to_dict() for t in self.ties],
            "offpath_ties": [t.to_dict() for t in self.offpath_ties],
            "ab_ties": [t.to_dict() for t in self.ab_ties],
            "outcomes": {k: _fmt(v) for k, v in sorted(self.outcomes.items())},
            "a_choices": {s.label(): "+".join(sorted(self.solver.a_choice[s])) or "pass" for s in self.reachable_pre},
            "b_choices": {s.label(): "+".join(sorted(self.solver.b_choice[s])) or "pass" for s in self.reachable_pre},
            "profile": self.profile_rows(),
        }
        if self.cfg.game == HTLC:
            out["attack_spe"] = self.attack_spe
        return out


def solve_spe(cfg: GameConfig, a_policy: Policy | None = None, b_policy: Policy | None = None) -> SpeSolution:
    """Solve the game by backward induction and trace the equilibrium path."""
    solver = Solver(cfg, a_policy, b_policy)
    root = SubgameId(1, True, frozenset())
    utilities = solver.pre(root)
    outcomes, post_reach, pre_reach = _forward(solver, root)
    ties, off = [], []
    reach = set(post_reach)
    for sid in sorted(solver._post):
        for j in range(1, cfg.n + 1):
            if j in cfg.myopic:
                continue
            act, tied = solver.miner_choice(sid, j)
            if len(tied) > 1:
                (ties if sid in reach else off).append(Tie(sid.label(), f"M{j}", tied, act))
    ab = [solver.ab_ties[s] for s in pre_reach if s in solver.ab_ties]
    return SpeSolution(cfg, solver, utilities, outcomes, post_reach, pre_reach, ties, off, ab)


def _forward(solver: Solver, root: SubgameId):
    cfg = solver.cfg
    layer: dict[tuple[SubgameId, tuple[str, ...]], Fraction] = {(root, ()): Fraction(1)}
    outcomes: dict[str, Fraction] = {}
    post_seen: dict[SubgameId, None] = {}
    pre_seen: dict[SubgameId, None] = {}
    while layer:
        nxt: dict = {}
        for (sid, hist), p in sorted(layer.items(), key=lambda kv: (kv[0][0], kv[0][1])):
            if sid.k > cfg.T:
                key = ",".join(hist) or "none"
                outcomes[key] = outcomes.get(key, Fraction(0)) + p
                continue
            pre_seen[sid] = None
            solver.pre(sid)
            pub = sid.published | solver.a_choice[sid] | solver.b_choice[sid]
            post = replace(sid, published=pub)
            post_seen[post] = None
            for j, lam in enumerate(cfg.population.powers, start=1):
                act = solver.miner_choice(post, j)[0]
                _, red2 = apply_miner_action(cfg, j, act, sid.red)
                h2 = hist if act == UNRELATED else hist + (act,)
                key = (SubgameId(sid.k + 1, red2, pub), h2)
                nxt[key] = nxt.get(key, Fraction(0)) + p * lam
        layer = nxt
    return outcomes, list(post_seen), list(pre_seen)


# --- closed forms --------------------------------------------------------------------


def bribe_threshold_exact(cfg: GameConfig, lam: Fraction | None = None) -> Fraction:
    lam = cfg.population.lambda_min if lam is None else lam
    return Fraction(cfg.f_a_htlc - cfg.f) / lam + cfg.f


def closed_form_utility(cfg: GameConfig, i: int, k: int, red: bool, published: Iterable[str] | None = None) -> Fraction:
    """Miner i's utility in the HTLC subgame at round k from the closed-form lemmas."""
    if cfg.game != HTLC:
        raise NotApplicable("closed forms cover the HTLC game")
    if cfg.myopic:
        raise NotApplicable("closed forms assume every miner is non-myopic")
    if not 1 <= k <= cfg.T:
        raise NotApplicable("round outside [1, T]")
    lam = cfg.population.powers[i - 1]
    if not red:
        return lam * (cfg.T - k + 1) * cfg.f
    pub = set(HTLC_A + HTLC_B) if published is None else set(published)
    if pub != set(HTLC_A + HTLC_B):
        raise NotApplicable("both transactions must be published")
    if not cfg.f_b_htlc > bribe_threshold_exact(cfg):
        raise NotApplicable("bribe does not exceed (f_A - f)/lambda_min + f")
    if k == cfg.T:
        return lam * cfg.f_b_htlc
    return lam * ((cfg.T - k) * cfg.f + cfg.f_b_htlc)


def solver_threshold(cfg: GameConfig) -> int | None:
    """Smallest integer f_B^htlc at which every miner strictly prefers withholding, by bisection."""
    lo, hi = cfg.f + 1, cfg.v_dep - 1

    def attack(fb: int) -> bool:
        return solve_spe(cfg.with_(f_b_htlc=fb)).withholds_everywhere()

    if lo > hi or not attack(hi):
        return None
    while lo < hi:
        mid = (lo + hi) // 2
        if attack(mid):
            hi = mid
        else:
            lo = mid + 1
    return lo


def sweep(cfg: GameConfig, key: str, values: Iterable[int]) -> list[dict]:
    """Re-solve for each value of one fee parameter."""
    rows = []
    for v in values:
        sol = solve_spe(cfg.with_(**{key: v}))
        rows.append({key: v, "u_A": _fmt(sol.u_A), "u_B": _fmt(sol.u_B), "attack_spe": sol.attack_spe})
    return rows


# --- deviation checks for MAD-HTLC ---------------------------------------------------------


def prescribed_a(cfg: GameConfig) -> Policy:
    return lambda sid: frozenset(cfg.kinds_a) if sid.red else frozenset()


def prescribed_b(cfg: GameConfig) -> Policy:
    """B acts only in round T, from the state at the start of that round."""

    def pol(sid: SubgameId) -> frozenset:
        if sid.k < cfg.T:
            return frozenset()
        return frozenset({"txB_col"}) if "txA_dep" in sid.published else frozenset({"txB_3"})

    return pol


def _at_rounds(kinds: dict[int, Iterable[str]]) -> Policy:
    return lambda sid: frozenset(kinds.get(sid.k, ()))


def play(cfg: GameConfig, a_policy: Policy, b_policy: Policy) -> SpeSolution:
    """Utilities when A and B follow fixed policies and miners best-respond."""
    return solve_spe(cfg, a_policy, b_policy)


@dataclass
class Deviation:
    party: str
    name: str
    utility: Fraction
    prescribed: Fraction
    relation: str
    holds: bool
    observed_strict: bool
    outcomes: dict[str, Fraction]

    def to_dict(self) -> dict:
        return {
            "party": self.party,
            "name": self.name,
            "utility": _fmt(self.utility),
            "prescribed": _fmt(self.prescribed),
            "required": self.relation,
            "holds": self.holds,
            "observed_strict": self.observed_strict,
            "outcomes": {k: _fmt(v) for k, v in sorted(self.outcomes.items())},
        }


@dataclass
class DeviationReport:
    cfg: GameConfig
    u_A: Fraction
    u_B: Fraction
    expected_u_A: Fraction
    expected_u_B: Fraction
    deviations: list[Deviation]
    destruction: list[dict]
    spe_matches_prescribed: bool

    @property
    def profitable(self) -> list[Deviation]:
        return [d for d in self.deviations if not d.holds]

    @property
    def ok(self) -> bool:
        return (
            not self.profitable
            and all(x["holds"] for x in self.destruction)
            and self.spe_matches_prescribed
            and self.u_A == self.expected_u_A
            and self.u_B == self.expected_u_B
        )

    def to_dict(self) -> dict:
        return {
            "config": self.cfg.to_dict(),
            "u_A": _fmt(self.u_A),
            "u_B": _fmt(self.u_B),
            "expected_u_A": _fmt(self.expected_u_A),
            "expected_u_B": _fmt(self.expected_u_B),
            "spe_matches_prescribed": self.spe_matches_prescribed,
            "deviations": [d.to_dict() for d in self.deviations],
            "mutual_destruction": self.destruction,
            "profitable": len(self.profitable),
            "ok": self.ok,
        }


def expected_prescribed(cfg: GameConfig) -> tuple[Fraction, Fraction]:
    if cfg.alice_knows:
        return Fraction(cfg.v_dep - cfg.f_a_dep), Fraction(cfg.v_col - cfg.f_b_col)
    return Fraction(0), Fraction(cfg.v_dep + cfg.v_col - cfg.f_b_3)


def verify_mad(cfg: GameConfig) -> DeviationReport:
    """Check that no unilateral deviation of A or B beats the prescribed strategy."""
    if cfg.game != MAD:
        raise ConfigError("game: verify_mad needs a mad-htlc config")
    T = cfg.T
    pa, pb = prescribed_a(cfg), prescribed_b(cfg)
    base = play(cfg, pa, pb)
    ua, ub = base.u_A, base.u_B
    devs: list[Deviation] = []

    def check(party: str, name: str, a_pol: Policy, b_pol: Policy, relation: str) -> None:
        sol = play(cfg, a_pol, b_pol)
        u, ref = (sol.u_A, ua) if party == "A" else (sol.u_B, ub)
        holds = u < ref if relation == "strict" else u <= ref
        devs.append(Deviation(party, name, u, ref, relation, holds, u < ref, sol.outcomes))

    if cfg.alice_knows:
        check("A", "never publish", _at_rounds({}), pb, "strict")
        if T > 1:
            check("A", "publish in the last round", _at_rounds({T: MAD_A}), pb, "weak")
        check("B", "txB_dep in round 1", pa, _at_rounds({1: ["txB_dep"], T: ["txB_col"]}), "weak")
        check("B", "txB_3 in round 1", pa, _at_rounds({1: ["txB_3"], T: ["txB_col"]}), "weak")
        check("B", "txB_dep with txB_col in round T", pa, _at_rounds({T: ["txB_dep", "txB_col"]}), "weak")
        check("B", "txB_3 in round T", pa, _at_rounds({T: ["txB_3"]}), "weak")
        check("B", "txB_col in round 1", pa, _at_rounds({1: ["txB_col"]}), "weak")
        check("B", "no txB_col", pa, _at_rounds({}), "weak")
    else:
        check("B", "txB_3 in round 1", pa, _at_rounds({1: ["txB_3"]}), "weak")
        check("B", "txB_dep with txB_col in round T", pa, _at_rounds({T: ["txB_dep", "txB_col"]}), "weak")
        check("B", "txB_dep in round T", pa, _at_rounds({T: ["txB_dep"]}), "weak")
        check("B", "txB_col in round T", pa, _at_rounds({T: ["txB_col"]}), "weak")
        check("B", "never publish", pa, _at_rounds({}), "weak")

    destruction = []
    solver = base.solver
    cases = [
        (True, frozenset({"txA_dep", "txB_dep"}), "txM_3"),
        (True, frozenset({"txA_dep", "txB_3"}), "txM_3"),
        (True, frozenset({"txA_dep", "txB_dep", "txB_col"}), "txM_3"),
        (False, frozenset({"txA_dep", "txB_dep"}), "txM_col"),
        (False, frozenset({"txA_dep", "txB_dep", "txB_col"}), "txM_col"),
        (False, frozenset({"txA_dep", "txB_3", "txB_col"}), "txM_col"),
    ]
    for red, pub, want in cases:
        sid = SubgameId(T, red, pub)
        for j in range(1, cfg.n + 1):
            if j in cfg.myopic:
                continue
            act, tied = solver.miner_choice(sid, j)
            destruction.append({
                "subgame": sid.label(), "miner": f"M{j}", "action": act,
                "expected": want, "unique": len(tied) == 1, "holds": act == want and len(tied) == 1,
            })

    spe = solve_spe(cfg)
    eua, eub = expected_prescribed(cfg)
    return DeviationReport(cfg, ua, ub, eua, eub, devs, destruction,
                           spe.u_A == ua and spe.u_B == ub)


# --- Monte Carlo over the ledger ------------------------------------------------------------

A_STRATEGIES = ("prescribed", "spe", "withhold", "last-round")
B_STRATEGIES = ("prescribed", "spe", "bribe", "none")


@dataclass
class _Setup:
    cfg: GameConfig
    hasher: Hasher
    pre_a: bytes
    pre_b: bytes
    init_tx: Transaction
    txs: dict[str, Transaction]


def _build(cfg: GameConfig, seed: int) -> _Setup:
    h = Hasher()
    rng = random.Random(int.from_bytes(hashlib.sha256(f"{seed}/setup".encode()).digest()[:8], "big"))
    pre_a, pre_b = random_preimage(rng), random_preimage(rng)
    while pre_b == pre_a:
        pre_b = random_preimage(rng)
    da, db = h.digest(pre_a), h.digest(pre_b)
    T = cfg.T
    txs: dict[str, Transaction] = {}

    def out(owner: Party, amount: int, cid: str) -> tuple[Contract, ...]:
        return (Contract(cid, amount, contracts.owned_by(owner), owner),)

    if cfg.game == MAD:
        dep = Contract("dep", cfg.v_dep, contracts.make_mh_dep(ALICE, BOB, T, da, db, h))
        col = Contract("col", cfg.v_col, contracts.make_mh_col(BOB, T, da, db, h))
        init = Transaction("init", EXTERNAL, (), (dep, col), 0, cfg.v_dep + cfg.v_col, "init")
        fa, fd, fc, f3 = cfg.f_a_dep, cfg.f_b_dep, cfg.f_b_col, cfg.f_b_3
        txs["txA_dep"] = Transaction("txA_dep", ALICE, (("dep", RedeemWitness("dep-A", pre1=pre_a, signer=ALICE)),),
                                     out(ALICE, cfg.v_dep - fa, "outA_dep"), fa, 0, "txA_dep")
        txs["txB_dep"] = Transaction("txB_dep", BOB, (("dep", RedeemWitness("dep-B", pre2=pre_b, signer=BOB)),),
                                     out(BOB, cfg.v_dep - fd, "outB_dep"), fd, 0, "txB_dep")
        txs["txB_col"] = Transaction("txB_col", BOB, (("col", RedeemWitness("col-B", signer=BOB)),),
                                     out(BOB, cfg.v_col - fc, "outB_col"), fc, 0, "txB_col")
        txs["txB_3"] = Transaction(
            "txB_3", BOB,
            (("dep", RedeemWitness("dep-B", pre2=pre_b, signer=BOB)), ("col", RedeemWitness("col-B", signer=BOB))),
            out(BOB, cfg.v_dep + cfg.v_col - f3, "outB_3"), f3, 0, "txB_3",
        )
    else:
        htlc = Contract("dep", cfg.v_dep, contracts.make_htlc(ALICE, BOB, T, da, h))
        init = Transaction("init", EXTERNAL, (), (htlc,), 0, cfg.v_dep, "init")
        fa, fb = cfg.f_a_htlc, cfg.f_b_htlc
        txs["txA_htlc"] = Transaction("txA_htlc", ALICE, (("dep", RedeemWitness("htlc-A", pre1=pre_a, signer=ALICE)),),
                                      out(ALICE, cfg.v_dep - fa, "outA_htlc"), fa, 0, "txA_htlc")
        txs["txB_htlc"] = Transaction("txB_htlc", BOB, (("dep", RedeemWitness("htlc-B", signer=BOB)),),
                                      out(BOB, cfg.v_dep - fb, "outB_htlc"), fb, 0, "txB_htlc")
    return _Setup(cfg, h, pre_a, pre_b, init, txs)


def _miner_tx(setup: _Setup, action: str, miner: Party, revealed: Mapping[bytes, bytes]) -> Transaction:
    h = setup.hasher
    pa = revealed.get(h.digest(setup.pre_a))
    pb = revealed.get(h.digest(setup.pre_b))
    cfg = setup.cfg
    tag = f"{action}@{miner}"
    if action == "txM_dep":
        return Transaction(tag, miner, (("dep", RedeemWitness("dep-M", pa, pb, miner)),), (), cfg.v_dep, 0, action)
    if action == "txM_col":
        return Transaction(tag, miner, (("col", RedeemWitness("col-M", pa, pb, miner)),), (), cfg.v_col, 0, action)
    if action == "txM_3":
        return Transaction(
            tag, miner,
            (("dep", RedeemWitness("dep-M", pa, pb, miner)), ("col", RedeemWitness("col-M", pa, pb, miner))),
            (), cfg.v_dep + cfg.v_col, 0, action,
        )
    raise ValueError(action)


class NonMyopicSpePolicy:
    """Plays the miner strategy of a solved game, read off the live ledger state."""

    def __init__(self, setup: _Setup, solution: SpeSolution, published: set[str]):
        self.setup = setup
        self.solution = solution
        self.published = published

    def select(self, view: RoundView) -> Transaction:
        k = view.height - 1
        red = not view.chain.is_redeemed("dep")
        sid = SubgameId(k, red, frozenset(self.published))
        action = self.solution.miner_choice(sid, view.miner.index)
        if action == UNRELATED:
            return view.candidates[0]
        if action.startswith("include:"):
            return self.setup.txs[action[8:]]
        return _miner_tx(self.setup, action, view.miner, view.mempool.revealed)


def _strategy_a(name: str, cfg: GameConfig, sol: SpeSolution, k: int, sid: SubgameId) -> frozenset:
    if name == "prescribed":
        return frozenset(cfg.kinds_a) if sid.red and k == 1 else frozenset()
    if name == "spe":
        sol.solver.pre(sid)
        return sol.solver.a_choice[sid]
    if name == "withhold":
        return frozenset()
    if name == "last-round":
        return frozenset(cfg.kinds_a) if sid.red and k == cfg.T else frozenset()
    raise ConfigError(f"policies.a: unknown strategy {name!r}")


def _strategy_b(name: str, cfg: GameConfig, sol: SpeSolution, k: int, start: SubgameId, after_a: SubgameId) -> frozenset:
    if name == "prescribed":
        if cfg.game == HTLC:
            return frozenset(HTLC_B) if k == cfg.T and start.red else frozenset()
        return prescribed_b(cfg)(start)
    if name == "spe":
        sol.solver.pre(start)
        return sol.solver.b_choice[start]
    if name == "bribe":
        if k != 1:
            return frozenset()
        return frozenset(HTLC_B) if cfg.game == HTLC else frozenset({"txB_3"})
    if name == "none":
        return frozenset()
    raise ConfigError(f"policies.b: unknown strategy {name!r}")


_TRACKED = ("A", "B")


def _trial(setup: _Setup, sol: SpeSolution, a_strat: str, b_strat: str, seed: int, trial: int) -> tuple:
    cfg = setup.cfg
    rng = random.Random(int.from_bytes(hashlib.sha256(f"{seed}/{trial}".encode()).digest()[:8], "big"))
    chain = Chain.genesis(setup.init_tx)
    pool = Mempool(setup.hasher, UnrelatedStream(cfg.f))
    published: set[str] = set()
    spe_pol = NonMyopicSpePolicy(setup, sol, published)
    myo = MyopicPolicy()
    policies = {m: (myo if m.index in cfg.myopic else spe_pol) for m in cfg.population.miners()}
    confirmed = []
    for k in range(1, cfg.T + 1):
        start = SubgameId(k, not chain.is_redeemed("dep"), frozenset(published))
        a = _strategy_a(a_strat, cfg, sol, k, start) - published
        after_a = replace(start, published=start.published | a)
        b = _strategy_b(b_strat, cfg, sol, k, start, after_a) - after_a.published
        for kind in sorted(a | b):
            pool.publish(setup.txs[kind])
            published.add(kind)
        outcome = advance_round(chain, pool, cfg.population, policies, rng)
        if outcome.tx.kind != "unrelated":
            confirmed.append(outcome.tx.kind)
    utils = [chain.holdings(ALICE), chain.holdings(BOB)] + [
        chain.balances.get(m, 0) for m in cfg.population.miners()
    ]
    return tuple(confirmed), tuple(utils)


def _chunk(args) -> dict:
    cfg, a_strat, b_strat, seed, lo, hi = args
    setup = _build(cfg, seed)
    sol = solve_spe(cfg)
    counts: dict[str, int] = {}
    sums = [0] * (cfg.n + 2)
    sq = [0] * (cfg.n + 2)
    for t in range(lo, hi):
        conf, utils = _trial(setup, sol, a_strat, b_strat, seed, t)
        for key in _events(cfg, conf):
            counts[key] = counts.get(key, 0) + 1
        for i, u in enumerate(utils):
            sums[i] += u
            sq[i] += u * u
    return {"counts": counts, "sums": sums, "sq": sq}


def _events(cfg: GameConfig, conf: tuple[str, ...]) -> list[str]:
    ev = []
    b_dep = {"txB_htlc"} if cfg.game == HTLC else {"txB_dep", "txB_3"}
    a_dep = {"txA_htlc"} if cfg.game == HTLC else {"txA_dep"}
    if any(c in b_dep for c in conf):
        ev.append("attack_success")
    if any(c in a_dep for c in conf):
        ev.append("a_confirmed")
    if any(c.startswith("txM") for c in conf):
        ev.append("miner_seizure")
    if "txB_col" in conf or "txB_3" in conf:
        ev.append("b_collateral")
    return ev


@dataclass
class SimReport:
    cfg: GameConfig
    a_strategy: str
    b_strategy: str
    trials: int
    seed: int
    counts: dict[str, int]
    sums: list[int]
    sq: list[int]

    def rate(self, key: str) -> float:
        return self.counts.get(key, 0) / self.trials

    def rate_ci(self, key: str) -> float:
        p = self.rate(key)
        return 1.96 * math.sqrt(p * (1 - p) / self.trials)

    def mean(self, i: int) -> float:
        return self.sums[i] / self.trials

    def ci(self, i: int) -> float:
        n = self.trials
        if n < 2:
            return float("nan")
        var = (self.sq[i] - self.sums[i] ** 2 / n) / (n - 1)
        return 1.96 * math.sqrt(max(var, 0.0) / n)

    def to_dict(self) -> dict:
        names = ["A", "B"] + [f"M{j}" for j in range(1, self.cfg.n + 1)]
        keys = ("attack_success", "a_confirmed", "miner_seizure", "b_collateral")
        return {
            "config": self.cfg.to_dict(),
            "a_strategy": self.a_strategy,
            "b_strategy": self.b_strategy,
            "trials": self.trials,
            "seed": self.seed,
            "counts": {k: self.counts.get(k, 0) for k in keys},
            "rates": {k: round(self.rate(k), 12) for k in keys},
            "rate_ci95": {k: round(self.rate_ci(k), 12) for k in keys},
            "utility_sums": dict(zip(names, self.sums)),
            "utility_means": {n: round(self.mean(i), 12) for i, n in enumerate(names)},
            "utility_ci95": {n: round(self.ci(i), 12) for i, n in enumerate(names)},
        }


def simulate(
    cfg: GameConfig,
    a_strategy: str = "prescribed",
    b_strategy: str = "prescribed",
    trials: int = 1000,
    seed: int = 0,
    jobs: int = 1,
) -> SimReport:
    """Monte Carlo over the ledger's round process.

    Miners listed in ``cfg.myopic`` use the myopic policy; the rest play the
    SPE miner strategy. Every trial draws from its own RNG derived from
    (seed, trial index), so results do not depend on ``jobs``.
    """
    if trials < 1:
        raise ConfigError("trials: must be >= 1")
    if a_strategy not in A_STRATEGIES:
        raise ConfigError(f"policies.a: unknown strategy {a_strategy!r}")
    if b_strategy not in B_STRATEGIES:
        raise ConfigError(f"policies.b: unknown strategy {b_strategy!r}")
    jobs = max(1, min(jobs, trials))
    bounds = [trials * i // jobs for i in range(jobs + 1)]
    tasks = [(cfg, a_strategy, b_strategy, seed, bounds[i], bounds[i + 1]) for i in range(jobs)]
    if jobs == 1:
        parts = [_chunk(tasks[0])]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(_chunk, tasks))
    counts: dict[str, int] = {}
    sums = [0] * (cfg.n + 2)
    sq = [0] * (cfg.n + 2)
    for p in parts:
        for k, v in p["counts"].items():
            counts[k] = counts.get(k, 0) + v
        for i in range(len(sums)):
            sums[i] += p["sums"][i]
            sq[i] += p["sq"][i]
    return SimReport(cfg, a_strategy, b_strategy, trials, seed, counts, sums, sq)

"""Bribery economics for HTLC: attack threshold, defensive fee and resistance ratios."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from decimal import Decimal
from fractions import Fraction
from importlib import resources
from typing import Iterable

from .ledger import ConfigError

DEFAULT_LAMBDA_MIN = Fraction(1, 100)
RATIO_TOLERANCE = Fraction(5, 1000)


def exact(x) -> Fraction:
    """Exact rational from an int, Fraction or decimal string (floats go through repr)."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    if isinstance(x, float):
        x = repr(x)
    try:
        return Fraction(Decimal(str(x).strip()))
    except Exception:
        try:
            return Fraction(str(x).strip())
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"not a number: {x!r}") from None


@dataclass(frozen=True)
class BribeScenario:
    v: Fraction
    f: Fraction
    f_A: Fraction
    lambda_min: Fraction = DEFAULT_LAMBDA_MIN
    label: str = ""

    def __post_init__(self) -> None:
        for name in ("v", "f", "f_A", "lambda_min"):
            object.__setattr__(self, name, exact(getattr(self, name)))
        if not 0 < self.lambda_min <= 1:
            raise ConfigError("lambda_min: must lie in (0, 1]")
        if not self.f < self.f_A < self.v:
            raise ConfigError("fees.f_a: need f < f_A < v")


@dataclass(frozen=True)
class Threshold:
    value: Fraction
    feasible: bool


def bribe_threshold(s: BribeScenario) -> Threshold:
    """Smallest bribe (exclusive) that makes every miner withhold A's tx; feasible iff below v."""
    t = (s.f_A - s.f) / s.lambda_min + s.f
    return Threshold(t, t < s.v)


def safe_fee(v, f, lambda_min=DEFAULT_LAMBDA_MIN) -> Fraction:
    """Fee for A above which no bribe below v can buy withholding."""
    v, f, lam = exact(v), exact(f), exact(lambda_min)
    return lam * (v - f) + f


# --- resistance table --------------------------------------------------------------------


@dataclass(frozen=True)
class ResistanceRow:
    label: str
    chain: str
    v: Fraction
    f: Fraction
    lambda_min: Fraction
    ratio: Fraction
    published_ratio: Fraction | None

    @property
    def relative_error(self) -> Fraction | None:
        if self.published_ratio is None:
            return None
        return abs(self.ratio - self.published_ratio) / self.published_ratio

    @property
    def matches(self) -> bool | None:
        err = self.relative_error
        return None if err is None else err <= RATIO_TOLERANCE

    def to_dict(self) -> dict:
        err = self.relative_error
        return {
            "label": self.label,
            "chain": self.chain,
            "v": _dec(self.v),
            "f": _dec(self.f),
            "lambda_min": _dec(self.lambda_min),
            "safe_fee": _dec(safe_fee(self.v, self.f, self.lambda_min)),
            "ratio": f"{float(self.ratio):.6g}",
            "published_ratio": "" if self.published_ratio is None else _dec(self.published_ratio),
            "relative_error": "" if err is None else f"{float(err):.4f}",
            "status": {None: "no-reference", True: "match", False: "mismatch"}[self.matches],
        }


def _dec(x: Fraction) -> str:
    if x.denominator == 1:
        return str(x.numerator)
    return f"{float(x):.10g}"


def load_table5_rows(text: str | None = None) -> list[dict]:
    """Rows of the bundled data file (or of ``text``), with comment lines stripped."""
    if text is None:
        text = resources.files("madlab").joinpath("data/table5.csv").read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    return list(csv.DictReader(io.StringIO("\n".join(lines))))


def table5(rows: Iterable[dict] | None = None, lambda_min=DEFAULT_LAMBDA_MIN) -> list[ResistanceRow]:
    """Required-fee multiple (lambda_min*(v-f)+f)/f for each row, against the published one."""
    lam = exact(lambda_min)
    out = []
    for r in load_table5_rows() if rows is None else rows:
        v, f = exact(r["v"]), exact(r["f"])
        if not 0 < f < v:
            raise ConfigError(f"table5 row {r.get('label')!r}: need 0 < f < v")
        pub = r.get("published_ratio") or None
        out.append(ResistanceRow(
            r.get("label", ""), r.get("chain", ""), v, f, lam,
            safe_fee(v, f, lam) / f, exact(pub) if pub else None,
        ))
    return out


def format_table(rows: list[ResistanceRow]) -> str:
    """Aligned plain-text rendering."""
    head = ["label", "chain", "v", "f", "ratio", "published_ratio", "status"]
    body = [[str(r.to_dict()[h]) for h in head] for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(head)]
    fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([fmt(head), fmt(["-" * w for w in widths])] + [fmt(b) for b in body]) + "\n"


# --- myopic miners ------------------------------------------------------------------------


@dataclass(frozen=True)
class CurvePoint:
    T: int
    success_probability: Fraction
    required_bribe: Fraction | None
    expected_profit: Fraction | None

    def to_dict(self) -> dict:
        opt = lambda x: None if x is None else f"{float(x):.10g}"
        return {
            "T": self.T,
            "success_probability": f"{float(self.success_probability):.10g}",
            "required_bribe": opt(self.required_bribe),
            "expected_profit": opt(self.expected_profit),
        }


def myopic_cost_curve(s: BribeScenario, p_myopic, T_range: Iterable[int]) -> list[CurvePoint]:
    """Attack success and bribe cost when a fraction p of mining power is myopic.

    Model extension: myopic miners include A's tx whenever they mine before T, so
    the attack needs every block in rounds 1..T-1 from a non-myopic miner. The
    non-myopic miner of power lambda_min then withholds in round 1 only if
    f_B > (f_A - f) / (lambda_min (1-p)^(T-2)) + f, which grows exponentially in T.
    ``expected_profit`` is B's risk-neutral gain q (v - f_B) at that bribe.
    """
    p = exact(p_myopic)
    if not 0 <= p <= 1:
        raise ConfigError("p_myopic: must lie in [0, 1]")
    out = []
    for T in T_range:
        if T < 1:
            raise ConfigError("T: must be >= 1")
        q = (1 - p) ** (T - 1)
        if T == 1:
            req = s.f_A
        elif p == 1:
            req = None
        else:
            req = (s.f_A - s.f) / (s.lambda_min * (1 - p) ** (T - 2)) + s.f
        profit = None if req is None else q * (s.v - req)
        out.append(CurvePoint(T, q, req, profit))
    return out

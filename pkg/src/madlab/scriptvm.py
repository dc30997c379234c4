"""Stack machine for the small opcode subset used by the MH-Dep, MH-Col and HTLC scripts.

Witness items are pushed left to right, so the last item ends on top, and the
script runs on the resulting stack. Success means exactly one truthy item
remains. Runtime faults never raise; they return a failed ``ExecResult``.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Union

from . import contracts
from .contracts import RedeemWitness
from .ledger import ALICE, BOB, Hasher, Party, random_preimage

OPCODES = (
    "OP_0",
    "OP_1",
    "OP_HASH160",
    "OP_EQUAL",
    "OP_SWAP",
    "OP_IF",
    "OP_ELSE",
    "OP_ENDIF",
    "OP_CHECKSIG",
    "OP_CHECKSEQUENCEVERIFY",
    "OP_DROP",
    "OP_VERIFY",
)

Token = Union[str, bytes]
SIG_TAG = b"SIG:"


class ScriptError(Exception):
    pass


class MissingSecret(ScriptError):
    def __init__(self, slot: str) -> None:
        super().__init__(f"missing secret {slot}")
        self.slot = slot


@dataclass(frozen=True)
class ScriptProgram:
    tokens: tuple[Token, ...]
    name: str = ""

    def __post_init__(self) -> None:
        depth = 0
        for tok in self.tokens:
            if isinstance(tok, str) and tok not in OPCODES:
                raise ScriptError(f"unknown opcode {tok}")
            if tok == "OP_IF":
                depth += 1
            elif tok == "OP_ELSE" and depth == 0:
                raise ScriptError("OP_ELSE outside a conditional")
            elif tok == "OP_ENDIF":
                depth -= 1
                if depth < 0:
                    raise ScriptError("unbalanced OP_ENDIF")
        if depth:
            raise ScriptError("unterminated OP_IF")

    def __len__(self) -> int:
        return len(self.tokens)

    def count(self, token: Token) -> int:
        return sum(1 for t in self.tokens if t == token)

    def pushes(self) -> list[bytes]:
        return [t for t in self.tokens if isinstance(t, bytes)]

    def text(self) -> str:
        return disassemble(self)


def assemble(text: str, name: str = "") -> ScriptProgram:
    toks: list[Token] = []
    for word in text.split():
        if word.startswith("0x"):
            toks.append(bytes.fromhex(word[2:]))
        else:
            toks.append(word)
    return ScriptProgram(tuple(toks), name)


def disassemble(program: ScriptProgram) -> str:
    return " ".join("0x" + t.hex() if isinstance(t, bytes) else t for t in program.tokens)


# --- script numbers ------------------------------------------------------------


def encode_num(n: int) -> bytes:
    """Minimal little-endian sign-magnitude encoding."""
    if n == 0:
        return b""
    neg, mag = n < 0, abs(n)
    out = bytearray()
    while mag:
        out.append(mag & 0xFF)
        mag >>= 8
    if out[-1] & 0x80:
        out.append(0x80 if neg else 0x00)
    elif neg:
        out[-1] |= 0x80
    return bytes(out)


def decode_num(b: bytes) -> int:
    if not b:
        return 0
    mag = int.from_bytes(b, "little")
    if b[-1] & 0x80:
        return -(mag & ~(0x80 << (8 * (len(b) - 1))))
    return mag


def truthy(b: bytes) -> bool:
    for i, byte in enumerate(b):
        if byte:
            return not (i == len(b) - 1 and byte == 0x80)
    return False


# --- execution -------------------------------------------------------------------


@dataclass(frozen=True)
class ExecContext:
    init_height: int
    at_height: int
    signer: Party

    def __post_init__(self) -> None:
        if self.at_height < self.init_height:
            raise ValueError("at_height precedes init_height")


@dataclass(frozen=True)
class ExecResult:
    ok: bool
    reason: str = ""
    stack: tuple[bytes, ...] = field(default=())

    def __bool__(self) -> bool:
        return self.ok


def sig_token(signer: Party) -> bytes:
    return SIG_TAG + signer.ident()


def execute(
    script: ScriptProgram, witness, ctx: ExecContext, hasher: Hasher = Hasher()
) -> ExecResult:
    """Run ``witness`` followed by ``script`` and apply the single-item rule."""
    stack: list[bytes] = list(witness.items if isinstance(witness, WitnessStack) else witness)
    cond: list[bool] = []

    def fail(reason: str) -> ExecResult:
        return ExecResult(False, reason, tuple(stack))

    for pc, op in enumerate(script.tokens):
        running = all(cond)
        if op == "OP_IF":
            if running:
                if not stack:
                    return fail(f"OP_IF underflow at {pc}")
                cond.append(truthy(stack.pop()))
            else:
                cond.append(False)
            continue
        if op == "OP_ELSE":
            if not cond:
                return fail(f"OP_ELSE without OP_IF at {pc}")
            cond[-1] = not cond[-1]
            continue
        if op == "OP_ENDIF":
            if not cond:
                return fail(f"OP_ENDIF without OP_IF at {pc}")
            cond.pop()
            continue
        if not running:
            continue
        if isinstance(op, bytes):
            stack.append(op)
        elif op == "OP_0":
            stack.append(b"")
        elif op == "OP_1":
            stack.append(b"\x01")
        elif op == "OP_HASH160":
            if not stack:
                return fail(f"OP_HASH160 underflow at {pc}")
            stack.append(hasher.digest(stack.pop()))
        elif op == "OP_EQUAL":
            if len(stack) < 2:
                return fail(f"OP_EQUAL underflow at {pc}")
            b, a = stack.pop(), stack.pop()
            stack.append(b"\x01" if a == b else b"")
        elif op == "OP_SWAP":
            if len(stack) < 2:
                return fail(f"OP_SWAP underflow at {pc}")
            stack[-1], stack[-2] = stack[-2], stack[-1]
        elif op == "OP_DROP":
            if not stack:
                return fail(f"OP_DROP underflow at {pc}")
            stack.pop()
        elif op == "OP_VERIFY":
            if not stack:
                return fail(f"OP_VERIFY underflow at {pc}")
            if not truthy(stack.pop()):
                return fail(f"OP_VERIFY failed at {pc}")
        elif op == "OP_CHECKSIG":
            if len(stack) < 2:
                return fail(f"OP_CHECKSIG underflow at {pc}")
            pk, sig = stack.pop(), stack.pop()
            good = sig == SIG_TAG + pk and pk == ctx.signer.ident()
            stack.append(b"\x01" if good else b"")
        elif op == "OP_CHECKSEQUENCEVERIFY":
            if not stack:
                return fail(f"OP_CHECKSEQUENCEVERIFY underflow at {pc}")
            rel = decode_num(stack[-1])
            if rel < 0 or ctx.at_height < ctx.init_height + rel:
                return fail(f"OP_CHECKSEQUENCEVERIFY locked until {ctx.init_height + rel}")
        else:
            return fail(f"unsupported opcode {op}")
    if cond:
        return fail("unbalanced conditional")
    if len(stack) != 1:
        return fail(f"final stack depth {len(stack)}")
    if not truthy(stack[0]):
        return fail("final item is false")
    return ExecResult(True, "", tuple(stack))


exec = execute  # noqa: A001


# --- built-in scripts ------------------------------------------------------------

BUILTINS = ("mh-dep", "mh-col", "htlc")


def builtin(
    name: str,
    *,
    T: int,
    dig_a: bytes,
    dig_b: bytes | None = None,
    pk_a: Party = ALICE,
    pk_b: Party = BOB,
) -> ScriptProgram:
    t, pa, pb = encode_num(T), pk_a.ident(), pk_b.ident()
    if name == "mh-dep":
        toks = (
            "OP_HASH160", dig_a, "OP_EQUAL", "OP_SWAP", "OP_HASH160", dig_b, "OP_EQUAL",
            "OP_IF",
            "OP_IF", "OP_1",
            "OP_ELSE", t, "OP_CHECKSEQUENCEVERIFY", "OP_DROP", pb, "OP_CHECKSIG",
            "OP_ENDIF",
            "OP_ELSE", "OP_VERIFY", pa, "OP_CHECKSIG",
            "OP_ENDIF",
        )
    elif name == "mh-col":
        toks = (
            t, "OP_CHECKSEQUENCEVERIFY", "OP_DROP",
            "OP_HASH160", dig_a, "OP_EQUAL",
            "OP_IF", "OP_HASH160", dig_b, "OP_EQUAL",
            "OP_ELSE", pb, "OP_CHECKSIG",
            "OP_ENDIF",
        )
    elif name == "htlc":
        toks = (
            "OP_HASH160", dig_a, "OP_EQUAL",
            "OP_IF", pa,
            "OP_ELSE", t, "OP_CHECKSEQUENCEVERIFY", "OP_DROP", pb,
            "OP_ENDIF", "OP_CHECKSIG",
        )
    else:
        raise ScriptError(f"unknown builtin {name!r}")
    if name != "htlc" and dig_b is None:
        raise ScriptError(f"{name} needs dig_b")
    return ScriptProgram(toks, name)


# --- witnesses ---------------------------------------------------------------------


@dataclass(frozen=True)
class WitnessStack:
    items: tuple[bytes, ...]

    def __iter__(self):
        return iter(self.items)

    def __len__(self) -> int:
        return len(self.items)


# per builtin: path number -> (contract path, item layout)
ROWS: dict[str, dict[int, tuple[str, tuple[str, ...]]]] = {
    "mh-dep": {
        1: ("dep-A", ("sig", "OP_0", "pre_a")),
        2: ("dep-B", ("sig", "pre_b", "OP_0")),
        3: ("dep-M", ("pre_b", "pre_a")),
    },
    "mh-col": {
        1: ("col-B", ("sig", "OP_0")),
        2: ("col-M", ("pre_b", "pre_a")),
    },
    "htlc": {
        1: ("htlc-A", ("sig", "pre_a")),
        2: ("htlc-B", ("sig", "OP_0")),
    },
}


def witness_for(name: str, path: int, secrets: dict[str, bytes], signer: Party) -> WitnessStack:
    """The input-data row for (``name``, ``path``) built from ``secrets``."""
    try:
        _, layout = ROWS[name][path]
    except KeyError:
        raise ScriptError(f"no redeem path {path} for {name}") from None
    items = []
    for slot in layout:
        if slot == "sig":
            items.append(sig_token(signer))
        elif slot == "OP_0":
            items.append(b"")
        else:
            if slot not in secrets:
                raise MissingSecret(slot)
            items.append(secrets[slot])
    return WitnessStack(tuple(items))


# --- differential oracle -------------------------------------------------------------


def _signer_of(item: bytes) -> Party | None:
    if not item.startswith(SIG_TAG):
        return None
    tag = item[len(SIG_TAG):].decode(errors="replace")
    if tag in ("A", "B"):
        return Party(tag)
    if tag.startswith("M") and tag[1:].isdigit() and int(tag[1:]) >= 1:
        return Party.miner(int(tag[1:]))
    return None


def decode_witness(
    name: str, items: tuple[bytes, ...], dig_a: bytes, dig_b: bytes | None, hasher: Hasher
) -> RedeemWitness | None:
    """Map a stack of one of the known layouts to the predicate witness it encodes.

    The redeem path is read from the same selectors the script branches on:
    whether the relevant items hash to dig_a and dig_b. Unknown layouts give None.
    """
    h = hasher.digest
    if name == "mh-dep" and len(items) == 3:
        s, y, x = items
        if h(y) != dig_b:
            return RedeemWitness("dep-A", pre1=x, signer=_signer_of(s))
        if h(x) != dig_a:
            return RedeemWitness("dep-B", pre2=y, signer=_signer_of(s))
        return None
    if name == "mh-dep" and len(items) == 2:
        y, x = items
        if h(y) == dig_b:
            path = "dep-M" if h(x) == dig_a else "dep-B"
        else:
            path = "dep-A"
        return RedeemWitness(path, pre1=x, pre2=y, signer=None)
    if name == "mh-col" and len(items) == 2:
        y, x = items
        if h(x) == dig_a:
            return RedeemWitness("col-M", pre1=x, pre2=y, signer=_signer_of(y))
        return RedeemWitness("col-B", pre1=x, pre2=y, signer=_signer_of(y))
    if name == "htlc" and len(items) == 2:
        s, x = items
        path = "htlc-A" if h(x) == dig_a else "htlc-B"
        return RedeemWitness(path, pre1=x, signer=_signer_of(s))
    return None


def predicate_for(name: str, T: int, dig_a: bytes, dig_b: bytes | None, hasher: Hasher):
    if name == "mh-dep":
        return contracts.make_mh_dep(ALICE, BOB, T, dig_a, dig_b, hasher)
    if name == "mh-col":
        return contracts.make_mh_col(BOB, T, dig_a, dig_b, hasher)
    return contracts.make_htlc(ALICE, BOB, T, dig_a, hasher)


def oracle(
    name: str, items: tuple[bytes, ...], T: int, dig_a: bytes, dig_b: bytes | None,
    init_height: int, at_height: int, signer: Party, hasher: Hasher,
) -> bool:
    """Predicate-side verdict for a stack: decode, then evaluate on the AST."""
    w = decode_witness(name, items, dig_a, dig_b, hasher)
    if w is None:
        return False
    if w.signer is not None and w.signer != signer:
        return False
    ast = predicate_for(name, T, dig_a, dig_b, hasher)
    return contracts.evaluate(ast, w, init_height, at_height)


@dataclass(frozen=True)
class Counterexample:
    name: str
    path: int
    signer: str
    available: tuple[str, ...]
    T: int
    init_height: int
    at_height: int
    items: tuple[str, ...]
    vm: bool
    oracle: bool
    reason: str

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass
class DifferentialReport:
    trials: int = 0
    per_builtin: dict[str, int] = field(default_factory=dict)
    accepted: int = 0
    mismatches: int = 0
    counterexamples: list[Counterexample] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "per_builtin": dict(sorted(self.per_builtin.items())),
            "accepted": self.accepted,
            "mismatches": self.mismatches,
            "counterexamples": [c.to_dict() for c in self.counterexamples],
        }


def differential_check(
    name: str,
    trials: int,
    rng: random.Random,
    *,
    mutate: Callable[[ScriptProgram], ScriptProgram] | None = None,
    hasher: Hasher = Hasher(),
    extra_item_rate: float = 0.1,
    max_reported: int = 20,
) -> DifferentialReport:
    """Compare the VM against the predicate oracle on random redeem attempts.

    ``name`` is a builtin or ``"all"`` (round-robin). Each trial draws a path
    row, a signer, the subset of secrets the signer holds and a height in
    [init, init + 2T]. Unavailable secrets are replaced by fresh garbage.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    names = BUILTINS if name == "all" else (name,)
    report = DifferentialReport()
    for n in range(trials):
        bname = names[n % len(names)]
        T = rng.randint(1, 6)
        init = rng.randint(1, 50)
        at = rng.randint(init, init + 2 * T)
        pre_a = random_preimage(rng, 256)
        pre_b = random_preimage(rng, 256)
        dig_a, dig_b = hasher.digest(pre_a), hasher.digest(pre_b)
        signer = rng.choice((ALICE, BOB, Party.miner(1)))
        avail = tuple(s for s in ("pre_a", "pre_b") if rng.random() < 0.5)
        secrets = {"pre_a": pre_a, "pre_b": pre_b}
        for s in ("pre_a", "pre_b"):
            if s not in avail:
                secrets[s] = random_preimage(rng, 256)
        path = rng.choice(sorted(ROWS[bname]))
        items = witness_for(bname, path, secrets, signer).items
        if rng.random() < extra_item_rate:
            items = items + (random_preimage(rng, 64),)
            expect = False
        else:
            expect = oracle(bname, items, T, dig_a, dig_b, init, at, signer, hasher)
        program = builtin(bname, T=T, dig_a=dig_a, dig_b=dig_b)
        if mutate is not None:
            program = mutate(program)
        got = execute(program, items, ExecContext(init, at, signer), hasher)
        report.trials += 1
        report.per_builtin[bname] = report.per_builtin.get(bname, 0) + 1
        report.accepted += bool(got)
        if bool(got) != expect:
            report.mismatches += 1
        if bool(got) != expect and len(report.counterexamples) < max_reported:
            report.counterexamples.append(
                Counterexample(
                    bname, path, str(signer), avail, T, init, at,
                    tuple("0x" + i.hex() for i in items), bool(got), expect, got.reason,
                )
            )
    return report

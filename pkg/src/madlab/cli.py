"""Command-line front end: ``madlab <command> --config scenario.yaml``.

Exit codes: 0 success, 2 configuration error, 3 invariant violation or a failed
check (the report is still written so it can be inspected).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import random
import sys
from pathlib import Path
from typing import Any

import yaml

from . import __version__, attack, games, protocol, scriptvm
from .ledger import ConfigError, InvariantViolation, MinerPopulation

EXIT_OK, EXIT_CONFIG, EXIT_CHECK = 0, 2, 3

SECTIONS = ("game", "fees", "population", "timeout", "trials", "seed", "policies", "output",
            "table5", "script", "modelcheck")


# --- config loading --------------------------------------------------------------------


class Scenario:
    """Parsed config plus the source line of every key, for error messages."""

    def __init__(self, data: dict, lines: dict[str, int], source: str):
        self.data = data
        self.lines = lines
        self.source = source

    @classmethod
    def empty(cls) -> "Scenario":
        return cls({}, {}, "<defaults>")

    @classmethod
    def load(cls, path: str) -> "Scenario":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"{path}: cannot read config ({e.strerror})") from None
        try:
            node = yaml.compose(text)
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML: {e}") from None
        if data is None:
            data, node = {}, None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}:1: top level must be a mapping")
        lines: dict[str, int] = {}
        if node is not None:
            _index_lines(node, "", lines)
        sc = cls(data, lines, path)
        for key in data:
            if key not in SECTIONS:
                sc.fail(str(key), f"unknown section (expected one of {', '.join(SECTIONS)})")
        return sc

    def where(self, key: str) -> str:
        k = key
        while k and k not in self.lines:
            k = k.rpartition(".")[0]
        line = self.lines.get(k)
        return f"{self.source}:{line}" if line else self.source

    def fail(self, key: str, msg: str):
        raise ConfigError(f"{self.where(key)}: {key}: {msg}")

    def get(self, key: str, default: Any = None) -> Any:
        cur: Any = self.data
        for part in key.split("."):
            if not isinstance(cur, dict) or part not in cur:
                return default
            cur = cur[part]
        return cur

    def require(self, key: str) -> Any:
        val = self.get(key)
        if val is None:
            self.fail(key, "required key is missing")
        return val

    def integer(self, key: str, default: Any = None, required: bool = True) -> int | None:
        val = self.get(key, default)
        if val is None:
            if required:
                self.fail(key, "required key is missing")
            return None
        if isinstance(val, bool) or not isinstance(val, int):
            self.fail(key, f"must be an integer number of fee quanta, got {val!r}")
        return val


def _index_lines(node, prefix: str, out: dict[str, int]) -> None:
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = f"{prefix}.{k.value}" if prefix else str(k.value)
            out[key] = k.start_mark.line + 1
            _index_lines(v, key, out)


def game_config(sc: Scenario) -> games.GameConfig:
    kind = sc.require("game.kind")
    if kind not in games.GAMES:
        sc.fail("game.kind", f"must be one of {', '.join(games.GAMES)}")
    pop_raw = sc.require("population")
    if not isinstance(pop_raw, list):
        sc.fail("population", "must be a list of mining powers")
    try:
        pop = MinerPopulation(tuple(attack.exact(p) for p in pop_raw))
    except ConfigError as e:
        sc.fail("population", str(e).removeprefix("population: "))
    miners = sc.get("policies.miners")
    myopic: frozenset[int] = frozenset()
    if miners is not None:
        if not isinstance(miners, list) or len(miners) != pop.n:
            sc.fail("policies.miners", f"must list one policy per miner ({pop.n})")
        bad = [m for m in miners if m not in ("myopic", "spe")]
        if bad:
            sc.fail("policies.miners", f"unknown miner policy {bad[0]!r} (use myopic or spe)")
        myopic = frozenset(i + 1 for i, m in enumerate(miners) if m == "myopic")
    T = sc.integer("timeout")
    f = sc.integer("fees.f")
    v_dep = sc.integer("game.v_dep")
    kw: dict[str, Any] = dict(game=kind, T=T, population=pop, f=f, v_dep=v_dep, myopic=myopic)
    if kind == games.MAD:
        alice = sc.get("game.alice_knows", True)
        if not isinstance(alice, bool):
            sc.fail("game.alice_knows", "must be true or false")
        kw.update(
            v_col=sc.integer("game.v_col"),
            f_a_dep=sc.integer("fees.f_a"),
            f_b_dep=sc.integer("fees.f_b_dep"),
            f_b_col=sc.integer("fees.f_b_col"),
            f_b_3=sc.integer("fees.f_b_3"),
            alice_knows=alice,
        )
    else:
        kw.update(f_a_htlc=sc.integer("fees.f_a"), f_b_htlc=sc.integer("fees.f_b"))
    try:
        return games.GameConfig(**kw)
    except ConfigError as e:
        key = str(e).split(":", 1)[0]
        key = {"fees.f_a_dep": "fees.f_a", "fees.f_a_htlc": "fees.f_a", "fees.f_b_htlc": "fees.f_b"}.get(key, key)
        raise ConfigError(f"{sc.where(key)}: {e}") from None


# --- output ----------------------------------------------------------------------------


def _config_hash(sc: Scenario, args: argparse.Namespace) -> str:
    payload = {
        "config": sc.data,
        "overrides": {k: getattr(args, k, None) for k in ("seed", "trials", "max_len")},
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _meta(sc: Scenario, args: argparse.Namespace, seed: int | None) -> dict:
    return {
        "tool_version": __version__,
        "command": args.command,
        "config_hash": _config_hash(sc, args),
        "seed": seed,
    }


def render(meta: dict, payload: dict, rows: list[dict], fmt: str) -> str:
    if fmt == "json":
        return json.dumps({"meta": meta, "result": payload}, sort_keys=True, indent=2) + "\n"
    buf = io.StringIO()
    for k in sorted(meta):
        buf.write(f"# {k}: {_cell(meta[k])}\n")
    if rows:
        cols = list(rows[0])
        for r in rows[1:]:
            cols += [c for c in r if c not in cols]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(r.get(k, "")) for k in cols})
    return buf.getvalue()


def _cell(x: Any) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (dict, list)):
        return json.dumps(x, sort_keys=True)
    return "" if x is None else str(x)


def emit(text: str, out: str | None) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        p = Path(out)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")


# --- commands ---------------------------------------------------------------------------


def _seed(sc: Scenario, args) -> int:
    if args.seed is not None:
        return args.seed
    return sc.integer("seed", 0)


def _trials(sc: Scenario, args, default: int) -> int:
    n = args.trials if args.trials is not None else sc.integer("trials", default)
    if n < 1:
        sc.fail("trials", "must be >= 1")
    return n


def cmd_solve(sc: Scenario, args) -> tuple[dict, list[dict], bool]:
    sol = games.solve_spe(game_config(sc))
    d = sol.to_dict()
    return d, d["profile"], True


def cmd_simulate(sc: Scenario, args) -> tuple[dict, list[dict], bool]:
    cfg = game_config(sc)
    a = sc.get("policies.a", "prescribed")
    b = sc.get("policies.b", "prescribed")
    if a not in games.A_STRATEGIES:
        sc.fail("policies.a", f"unknown strategy {a!r} (use {', '.join(games.A_STRATEGIES)})")
    if b not in games.B_STRATEGIES:
        sc.fail("policies.b", f"unknown strategy {b!r} (use {', '.join(games.B_STRATEGIES)})")
    rep = games.simulate(cfg, a, b, _trials(sc, args, 1000), _seed(sc, args), args.jobs)
    d = rep.to_dict()
    rows = [{"metric": f"rate.{k}", "value": v, "ci95": d["rate_ci95"][k]} for k, v in d["rates"].items()]
    rows += [{"metric": f"utility.{k}", "value": v, "ci95": d["utility_ci95"][k]} for k, v in d["utility_means"].items()]
    return d, rows, True


def cmd_verify(sc: Scenario, args) -> tuple[dict, list[dict], bool]:
    cfg = game_config(sc)
    if cfg.game != games.MAD:
        sc.fail("game.kind", "verify needs a mad-htlc game")
    rep = games.verify_mad(cfg)
    d = rep.to_dict()
    rows = [{k: v for k, v in dev.items() if k != "outcomes"} for dev in d["deviations"]]
    return d, rows, rep.ok


def cmd_table5(sc: Scenario, args) -> tuple[dict, list[dict], bool]:
    lam = sc.get("table5.lambda_min", "0.01")
    data = sc.get("table5.data")
    text = None
    if data is not None:
        try:
            text = (Path(sc.source).parent / data).read_text(encoding="utf-8")
        except OSError as e:
            sc.fail("table5.data", f"cannot read {data} ({e.strerror})")
    rows = [r.to_dict() for r in attack.table5(attack.load_table5_rows(text), lam)]
    payload = {
        "lambda_min": str(attack.exact(lam)),
        "tolerance": str(attack.RATIO_TOLERANCE),
        "rows": rows,
        "mismatches": sum(r["status"] == "mismatch" for r in rows),
    }
    return payload, rows, True


def cmd_script(sc: Scenario, args) -> tuple[dict, list[dict], bool]:
    name = sc.get("script.builtin", "all")
    if name != "all" and name not in scriptvm.BUILTINS:
        sc.fail("script.builtin", f"must be all or one of {', '.join(scriptvm.BUILTINS)}")
    seed = _seed(sc, args)
    rep = scriptvm.differential_check(name, _trials(sc, args, 10000), random.Random(seed))
    d = rep.to_dict()
    rows = [{"builtin": k, "trials": v} for k, v in d["per_builtin"].items()]
    rows.append({"builtin": "total", "trials": d["trials"], "accepted": d["accepted"], "mismatches": d["mismatches"]})
    return d, rows, rep.mismatches == 0


def cmd_modelcheck(sc: Scenario, args) -> tuple[dict, list[dict], bool]:
    n = args.max_len if args.max_len is not None else sc.integer("modelcheck.max_len", 6)
    if n < 0:
        sc.fail("modelcheck.max_len", "must be >= 0")
    with_share = sc.get("modelcheck.with_share", True)
    rep = protocol.model_check_lemma1(n, params=protocol.ProtocolParams(with_share=bool(with_share)))
    d = rep.to_dict()
    d["ok"] = rep.ok
    rows = [{"kind": x["kind"], "script": " ".join(x["script"]), "detail": x} for x in d["discrepancies"]]
    rows += [{"kind": "lemma1", "script": " ".join(x["script"]), "detail": x} for x in d["lemma1_violations"]]
    return d, rows, rep.ok


COMMANDS = {
    "solve": (cmd_solve, True, "json"),
    "simulate": (cmd_simulate, True, "json"),
    "verify": (cmd_verify, True, "json"),
    "table5": (cmd_table5, False, "csv"),
    "script": (cmd_script, False, "json"),
    "modelcheck": (cmd_modelcheck, False, "json"),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="madlab", description="HTLC / MAD-HTLC analysis laboratory")
    ap.add_argument("--version", action="version", version=f"madlab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    helps = {
        "solve": "solve the game by backward induction",
        "simulate": "Monte Carlo over the ledger",
        "verify": "check MAD-HTLC prescribed strategies against deviations",
        "table5": "HTLC bribe-resistance ratios",
        "script": "script VM vs predicate differential check",
        "modelcheck": "protocol vs ideal functionality model check",
    }
    for name, (_, needs_cfg, _fmt) in COMMANDS.items():
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=needs_cfg, help="YAML scenario file")
        p.add_argument("--out", help="output file (default: output.path or stdout)")
        p.add_argument("--seed", type=int)
        p.add_argument("--trials", type=int)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--max-len", type=int, dest="max_len")
        p.add_argument("--format", choices=("json", "csv"))
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    fn, _, default_fmt = COMMANDS[args.command]
    try:
        sc = Scenario.load(args.config) if args.config else Scenario.empty()
        fmt = args.format or sc.get("output.format") or default_fmt
        if fmt not in ("json", "csv"):
            sc.fail("output.format", "must be json or csv")
        if args.jobs < 1:
            raise ConfigError("--jobs: must be >= 1")
        payload, rows, ok = fn(sc, args)
        seed = _seed(sc, args) if args.command in ("simulate", "script") else None
        out = args.out or sc.get("output.path")
        if out is not None and args.config and not Path(out).is_absolute() and args.out is None:
            out = str(Path(args.config).parent / out)
        emit(render(_meta(sc, args, seed), payload, rows, fmt), out)
    except ConfigError as e:
        print(f"madlab: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolation as e:
        print(f"madlab: invariant violation: {e}", file=sys.stderr)
        return EXIT_CHECK
    if not ok:
        print(f"madlab: {args.command}: checks failed (see report)", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

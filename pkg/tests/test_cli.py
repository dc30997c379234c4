import json
from pathlib import Path

import pytest

from madlab import __version__
from madlab.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def run(tmp_path, *argv):
    out = tmp_path / f"out{len(list(tmp_path.iterdir()))}"
    code = main([*argv, "--out", str(out)])
    return code, out.read_text() if out.exists() else ""


def test_solve_htlc(tmp_path):
    code, text = run(tmp_path, "solve", "--config", str(CONFIGS / "htlc_bribe.yaml"))
    d = json.loads(text)
    assert code == 0 and d["result"]["attack_spe"] is True
    assert d["meta"]["tool_version"] == __version__ and len(d["meta"]["config_hash"]) == 64


def test_solve_mad_csv(tmp_path):
    code, text = run(tmp_path, "solve", "--config", str(CONFIGS / "mad.yaml"), "--format", "csv")
    assert code == 0 and text.startswith("# command: solve")
    assert "k,state,published,miner,action" in text


def test_verify_and_simulate(tmp_path):
    code, text = run(tmp_path, "verify", "--config", str(CONFIGS / "mad.yaml"))
    assert code == 0 and json.loads(text)["result"]["ok"] is True
    code, text = run(tmp_path, "simulate", "--config", str(CONFIGS / "mad.yaml"), "--trials", "50", "--seed", "4")
    d = json.loads(text)
    assert code == 0 and d["meta"]["seed"] == 4 and d["result"]["trials"] == 50


def test_table5_defaults_to_csv(tmp_path):
    code, text = run(tmp_path, "table5")
    rows = [ln for ln in text.splitlines() if not ln.startswith("#")]
    assert code == 0 and len(rows) == 5 and text.count("mismatch") == 2


def test_script_command(tmp_path):
    code, text = run(tmp_path, "script", "--trials", "300")
    assert code == 0 and json.loads(text)["result"]["mismatches"] == 0


def test_modelcheck_reports_gaps_with_exit_3(tmp_path):
    code, text = run(tmp_path, "modelcheck", "--max-len", "5")
    d = json.loads(text)["result"]
    assert code == 3 and d["scripts_checked"] == 4288305 and d["discrepancies"]
    code, text = run(tmp_path, "modelcheck", "--max-len", "4")
    assert code == 0


@pytest.mark.parametrize("body,key", [
    ("game: {kind: htlc, v_dep: 100}\nfees: {f: 1, f_a: 1, f_b: 5}\npopulation: [1]\ntimeout: 2\n", "fees.f_a"),
    ("game: {kind: mad, v_dep: 100}\n", "game.kind"),
    ("game: {kind: htlc, v_dep: 100}\nfees: {f: 1, f_a: 2, f_b: 5}\npopulation: ['0.5']\ntimeout: 2\n", "population"),
    ("game: {kind: htlc, v_dep: 100}\nfees: {f: 1, f_a: 2}\npopulation: [1]\ntimeout: 2\n", "fees.f_b"),
    ("extra: 1\n", "extra"),
])
def test_config_errors_exit_2(tmp_path, capsys, body, key):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(body)
    assert main(["solve", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert key in err and f"{cfg}:" in err


def test_error_cites_line(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("game:\n  kind: htlc\n  v_dep: 100\nfees:\n  f: 1\n  f_a: 200\n  f_b: 5\npopulation: [1]\ntimeout: 2\n")
    assert main(["solve", "--config", str(cfg)]) == 2
    assert f"{cfg}:6: fees.f_a_htlc" in capsys.readouterr().err


def test_outputs_are_reproducible(tmp_path):
    a = run(tmp_path, "simulate", "--config", str(CONFIGS / "htlc_myopic.yaml"), "--trials", "200")
    b = run(tmp_path, "simulate", "--config", str(CONFIGS / "htlc_myopic.yaml"), "--trials", "200", "--jobs", "2")
    assert a == b

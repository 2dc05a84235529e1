import json
from pathlib import Path

import numpy as np
import pytest

from degen_spde.cli import main
from degen_spde.config import (ConfigParseError, default_config, parse_config,
                               resolve_beta, serialize, validate)


def test_defaults_validate():
    assert validate(default_config()) == []


def test_roundtrip_bit_identical():
    cfg = default_config()
    cfg.set("problem", "alpha", 0.37)
    cfg.set("task", "name", "check")
    cfg.set("task", "estimate", "thm-3.1")
    text = serialize(cfg)
    again = parse_config(text)
    assert again == cfg
    assert serialize(again) == text           # canonical form is a fixed point


def test_parse_accepts_comments_and_blanks():
    text = """
# leading comment
[problem]
alpha = 0.8

# trailing
[run]
seed = 12
"""
    cfg = parse_config(text)
    assert cfg[("problem", "alpha")] == 0.8
    assert cfg[("run", "seed")] == 12


def test_parse_errors_are_exhaustive():
    text = """[problem]
alpha = banana
bogus_key = 1
[nope]
x = 1
naked line
"""
    with pytest.raises(ConfigParseError) as err:
        parse_config(text)
    msgs = err.value.errors
    assert len(msgs) == 5
    assert any("banana" in m for m in msgs)
    assert any("bogus_key" in m for m in msgs)
    assert any("[nope]" in m for m in msgs)


def test_validate_collects_every_violation():
    cfg = default_config()
    cfg.set("problem", "alpha", 3.0)
    cfg.set("problem", "T", -1.0)
    cfg.set("problem", "omega1", (0.4, 0.85))   # breaks nesting
    cfg.set("discretization", "N", 1)
    cfg.set("task", "tau_grid", (1e-4, 1e-3))
    errors = validate(cfg)
    assert len(errors) >= 5
    joined = "\n".join(errors)
    for frag in ("alpha", "T must be positive", "nest", "N must be", "tau_grid"):
        assert frag in joined


def test_validate_alpha_gates():
    cfg = default_config()
    cfg.set("task", "name", "observability")
    cfg.set("problem", "alpha", 0.7)
    assert any("alpha in (0,1/2)" in e for e in validate(cfg))


def test_resolve_beta():
    cfg = default_config()
    cfg.set("problem", "alpha", 0.5)
    assert resolve_beta(cfg) == pytest.approx(1.5)
    assert resolve_beta(cfg, purpose="control") == pytest.approx(1.0)
    cfg.set("weights", "beta", 1.2)
    assert resolve_beta(cfg) == 1.2


# ---------------------------------------------------------------------------
# command line


def run_cli(args):
    return main(args)


def test_cli_invalid_config_no_output(tmp_path, capsys):
    out = tmp_path / "out"
    code = run_cli(["--out", str(out), "hardy", "--alpha", "5.0"])
    captured = capsys.readouterr()
    assert code == 2
    assert "config error" in captured.err
    assert not out.exists()


def test_cli_nested_interval_error(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[problem]\nomega1 = 0.4 0.85\n")
    code = run_cli(["--config", str(cfg), "--out", str(tmp_path / "o"), "hardy"])
    captured = capsys.readouterr()
    assert code == 2 and "nest" in captured.err
    assert not (tmp_path / "o").exists()


def test_cli_unreadable_config(tmp_path, capsys):
    code = run_cli(["--config", str(tmp_path / "missing.cfg"), "hardy"])
    assert code == 2
    assert "cannot read" in capsys.readouterr().err


def test_cli_hardy_runs_and_reproduces(tmp_path):
    out1 = tmp_path / "a"
    out2 = tmp_path / "b"
    args = ["--seed", "3", "hardy", "--profiles", "10", "--N", "32"]
    assert run_cli(["--out", str(out1)] + args) == 0
    assert run_cli(["--out", str(out2)] + args) == 0
    c1 = (out1 / "hardy.csv").read_bytes()
    c2 = (out2 / "hardy.csv").read_bytes()
    assert c1 == c2
    summary = json.loads((out1 / "summary.json").read_text())
    assert summary["pass"] is True
    assert summary["results"]["worst_ratio"] <= summary["results"]["bound"]


def test_cli_seed_changes_output(tmp_path):
    out1 = tmp_path / "a"
    out2 = tmp_path / "b"
    assert run_cli(["--out", str(out1), "--seed", "1", "hardy",
                    "--profiles", "5"]) == 0
    assert run_cli(["--out", str(out2), "--seed", "2", "hardy",
                    "--profiles", "5"]) == 0
    assert (out1 / "hardy.csv").read_bytes() != (out2 / "hardy.csv").read_bytes()


def test_cli_simulate(tmp_path):
    out = tmp_path / "sim"
    code = run_cli(["--out", str(out), "--seed", "0", "simulate",
                    "--N", "16", "--n", "4"])
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["invariants"]["duality_residual_le_1e-10"]
    assert summary["invariants"]["noise_free_dissipative"]
    assert (out / "trajectory.csv").exists()


def test_cli_observability(tmp_path):
    out = tmp_path / "obs"
    code = run_cli(["--out", str(out), "--seed", "0", "observability",
                    "--alpha", "0.3", "--T", "0.25", "--N", "16", "--n", "4",
                    "--draws", "5"])
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["results"]["max_ratio"] > 0.0


def test_cli_inverse_source(tmp_path):
    out = tmp_path / "inv"
    code = run_cli(["--out", str(out), "--seed", "0", "inverse-source",
                    "--N", "16", "--n", "4", "--pairs", "5"])
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["invariants"]["roundtrip_relative_error_le_1e-8"]
    assert summary["invariants"]["causality_exact"]


def test_cli_check_small(tmp_path):
    cfg = tmp_path / "check.cfg"
    cfg.write_text("""[weights]
s_grid = 1.0 4.0 16.0
lambda_grid = 2.0
[task]
ensemble = 3
""")
    out = tmp_path / "chk"
    code = run_cli(["--config", str(cfg), "--out", str(out), "--seed", "0",
                    "check", "--estimate", "thm-3.1", "--N", "16", "--n", "4"])
    assert code == 0
    sweep = (out / "sweep.csv").read_text().splitlines()
    assert sweep[0].startswith("estimate,s,lambda")
    assert len(sweep) == 4


def test_cli_null_control_small(tmp_path):
    cfg = tmp_path / "nc.cfg"
    cfg.write_text("""[problem]
alpha = 0.35
eps = 0.05
omega = 0.1 0.95
omega1 = 0.15 0.9
omega2 = 0.2 0.85
[task]
lambda_control = 0.05
""")
    out = tmp_path / "nc"
    code = run_cli(["--config", str(cfg), "--out", str(out), "--seed", "0",
                    "null-control", "--N", "16", "--n", "4",
                    "--tau-grid", "1e-1:1e-3"])
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["invariants"]["terminal_energy_strictly_decreasing"]
    assert summary["invariants"]["control_supported_on_omega"]
    decay = (out / "decay.csv").read_text().splitlines()
    assert len(decay) == 4


def test_cli_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv("DEGEN_SPDE_THREADS", "2")
    out = tmp_path / "thr"
    assert run_cli(["--out", str(out), "--seed", "0", "hardy",
                    "--profiles", "4"]) == 0
    monkeypatch.setenv("DEGEN_SPDE_THREADS", "zebra")
    assert run_cli(["--out", str(out), "hardy", "--profiles", "4"]) == 2

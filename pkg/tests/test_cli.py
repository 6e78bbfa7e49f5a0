import json

import pytest

from oraclesim import cli
from oraclesim.oracle import Workbench


def test_simulate_pass(tmp_path, capsys):
    code = cli.main(["simulate", "--mode", "quadratic", "--output-path", str(tmp_path)])
    assert code == 0
    assert "quadratic: PASS" in capsys.readouterr().out
    assert (tmp_path / "quadratic.json").exists() and (tmp_path / "quadratic_errors.csv").exists()


def test_simulate_configuration_error(tmp_path, capsys):
    assert cli.main(["simulate", "--mode", "quadratic", "--n", "15", "--output-path", str(tmp_path)]) == 2
    assert "divisible by chunk" in capsys.readouterr().err


def test_config_file_overrides_flags(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n": 8, "chunk": 2, "output-path": str(tmp_path / "o")}))
    assert cli.main(["simulate", "--config", str(cfg), "--n", "16"]) == 0
    doc = json.loads((tmp_path / "o" / "quadratic.json").read_text())
    assert doc["config"]["n"] == 8 and doc["config"]["chunk"] == 2


def test_config_file_unknown_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"colour": "red"}))
    assert cli.main(["simulate", "--config", str(cfg)]) == 2


def test_simulate_all(tmp_path, capsys):
    assert cli.main(["simulate", "--mode", "all", "--trials", "5", "--output-path", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    for mode in ("quadratic", "quadratic-causal", "average", "window", "sink", "reverse"):
        assert f"{mode}: PASS" in out
        assert (tmp_path / f"{mode}.json").exists()


def test_gen_stdout_is_deterministic(capsys):
    cli.main(["gen", "--mode", "window", "--seed", "3", "--stdout"])
    first = capsys.readouterr().out
    cli.main(["gen", "--mode", "window", "--seed", "3", "--stdout"])
    assert capsys.readouterr().out == first
    doc = json.loads(first)
    assert doc["window"]["config"]["seed"] == 3
    assert len(doc["window"]["instance"]["x"]) == 32


def test_gen_writes_to_env_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("ORACLESIM_OUTPUT_DIR", str(tmp_path))
    assert cli.main(["gen", "--mode", "average", "--n", "64", "--chunk", "16"]) == 0
    doc = json.loads((tmp_path / "average_instance.json").read_text())
    assert doc["instance"]["boundedness"]["passed"]


def test_verify_json(capsys):
    assert cli.main(["verify", "--json"]) == 0
    results = json.loads(capsys.readouterr().out)
    assert [r["number"] for r in results] == list(range(1, 10))
    assert all(r["passed"] for r in results)


def test_verify_detects_swapped_recombination_weights(monkeypatch, capsys):
    original = Workbench.weighted_average

    def swapped(self, ratios, weights, signs=None, label="recombine"):
        signs = None if signs is None else list(signs)[::-1]
        return original(self, ratios, list(weights)[::-1], signs, label)

    monkeypatch.setattr(Workbench, "weighted_average", swapped)
    assert cli.main(["verify"]) == 1
    out = capsys.readouterr().out
    assert "[FAIL] 1. quadratic exactness and call count" in out


def test_missing_subcommand():
    with pytest.raises(SystemExit):
        cli.main([])

import json
import sys
from pathlib import Path

import pytest

# Ensure repo root is on PYTHONPATH for imports
sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

import snell_cli


def test_plan_prints_level_and_steps(capsys):
    assert snell_cli.main(["plan", "--e1", "0.40", "--lambda", "0.15", "--hurst", "0.6"]) == 0
    out = capsys.readouterr().out
    assert "k*=1.88" in out
    assert "steps=14" in out


def test_plan_rejects_lambda_outside_window(capsys):
    assert snell_cli.main(["plan", "--e1", "0.40", "--lambda", "0.05", "--hurst", "0.6"]) == 2
    assert "lambda" in capsys.readouterr().err


def test_print_defaults_is_json(capsys):
    assert snell_cli.main(["--print-defaults"]) == 0
    defaults = json.loads(capsys.readouterr().out)
    assert defaults["experiment"]["model"] == "bm_sde"


def test_no_command_prints_help(capsys):
    assert snell_cli.main([]) == 1
    assert "usage" in capsys.readouterr().out.lower()


def test_run_small_config(tmp_path, capsys):
    cfg_path = tmp_path / "small.json"
    cfg_path.write_text(json.dumps({
        "experiment": {"k_list": [1], "train_paths": 500, "fresh_paths": 500},
        "reference": {"kind": "crr", "steps": 200},
    }))
    out_dir = tmp_path / "out"
    assert snell_cli.main(["run", str(cfg_path), "--output-dir", str(out_dir), "--seed", "5"]) == 0
    assert (out_dir / "report.csv").exists()
    assert (out_dir / "models_k1.json").exists()
    assert "levels written" in capsys.readouterr().out


@pytest.mark.parametrize("payload", ['{"experiment": {"k_list": []}}', "{broken"])
def test_bad_config_exits_with_2(tmp_path, payload):
    cfg_path = tmp_path / "bad.json"
    cfg_path.write_text(payload)
    assert snell_cli.main(["run", str(cfg_path)]) == 2


def test_missing_config_exits_with_2(tmp_path):
    assert snell_cli.main(["run", str(tmp_path / "absent.json")]) == 2

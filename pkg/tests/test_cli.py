import json

import pytest
import yaml

from eegleak.cli import EXIT_CONFIG, EXIT_ERROR, EXIT_LEAKAGE, main
from tests.conftest import tiny_run_dict


@pytest.fixture
def config_file(tmp_path):
    def make(**over):
        d = tiny_run_dict(**over)
        d.pop("out_dir")
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump(d))
        return str(path)
    return make


def test_stepwise_cli_matches_run(config_file, tmp_path, capsys):
    cfg = config_file()
    full, steps = tmp_path / "full", tmp_path / "steps"
    assert main(["run", "--config", cfg, "--out", str(full)]) == 0
    assert main(["generate", "--config", cfg, "--out", str(steps)]) == 0
    for cmd in ("split", "preprocess", "audit", "train-stage1", "embed", "train-stage2",
                "evaluate"):
        assert main([cmd, "--config", cfg, "--out", str(steps)]) == 0, cmd
    a, b = (json.loads((d / "results.json").read_text()) for d in (full, steps))
    assert a["config"].pop("out_dir") != b["config"].pop("out_dir")
    assert a == b
    assert "Test" in capsys.readouterr().out


def test_global_options_before_subcommand(config_file, tmp_path):
    assert main(["--config", config_file(), "--out", str(tmp_path), "--seed", "3",
                 "generate"]) == 0
    saved = yaml.safe_load((tmp_path / "config.yaml").read_text())
    assert saved["synth"]["seed"] == 3 and saved["split_seed"] == 3


def test_step_out_of_order(config_file, tmp_path, capsys):
    assert main(["preprocess", "--config", config_file(), "--out", str(tmp_path)]) == EXIT_ERROR
    assert "split" in capsys.readouterr().err


def test_leaky_refusal_exit_code(config_file, tmp_path, capsys):
    cfg = config_file()
    assert main(["run", "--wiring", "leaky", "--config", cfg, "--out", str(tmp_path)]) \
        == EXIT_LEAKAGE
    assert "PatientOverlap" in capsys.readouterr().err
    assert main(["run", "--wiring", "leaky", "--allow-leaky", "--config", cfg,
                 "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "results.json").read_text())["leaky"] is True


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("synth: {n_patients: -5}\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["run", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG


def test_feature_rank_bad_features(config_file, tmp_path):
    feats = tmp_path / "f.yaml"
    feats.write_text(yaml.safe_dump([{"name": "x", "channels": [["aEEG", "nope", "AV17"]]}]))
    assert main(["feature-rank", "--config", config_file(), "--out", str(tmp_path),
                 "--features", str(feats)]) == EXIT_CONFIG

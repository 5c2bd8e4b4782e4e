import json
import os

import pytest

from archxform.cli import EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_DISCONNECTED, EXIT_OK, main
from archxform.discretize import decisions_from_json
from archxform.graph import from_json

TINY_CONFIG = """\
model = tiny
channels = 4
classes = 3
image_size = 8
train_per_class = 12
test_per_class = 6
noise = 0.3
total_epochs = 3
arch_epochs = 1
batch_size = 12
lr_theta = 0.05
"""

OUTPUTS = {"architecture.json", "decisions.json", "checkpoint.json", "metrics.csv", "diff.dot"}


@pytest.fixture
def config(tmp_path):
    def write(extra=""):
        merged = dict(line.split(" = ") for line in TINY_CONFIG.splitlines())
        merged.update(line.split(" = ") for line in extra.splitlines())
        path = tmp_path / "run.cfg"
        path.write_text("".join(f"{k} = {v}\n" for k, v in merged.items()))
        return str(path)
    return write


def _run(*argv):
    return main([str(a) for a in argv])


def test_transform_writes_five_artifacts(config, tmp_path, capsys):
    out = tmp_path / "t"
    assert _run("transform", "--config", config(), "--out", out) == EXIT_OK
    assert OUTPUTS <= set(os.listdir(out))
    h = json.loads((out / "decisions.json").read_text())["config_hash"]
    assert (out / "metrics.csv").read_text().startswith(f"# config_hash: {h}")
    assert f"config_hash: {h}" in (out / "diff.dot").read_text()
    assert json.loads((out / "architecture.json").read_text())["config_hash"] == h
    assert from_json((out / "architecture.json").read_text()).template == "tiny"
    assert "test accuracy" in capsys.readouterr().out


def test_transform_twice_gives_identical_decisions(config, tmp_path):
    texts = []
    for name in ("a", "b"):
        assert _run("transform", "--config", config(), "--out", tmp_path / name, "--seed", 4) == EXIT_OK
        texts.append((tmp_path / name / "decisions.json").read_bytes())
    assert texts[0] == texts[1]


def test_train_baseline_changes_nothing(config, tmp_path):
    out = tmp_path / "b"
    assert _run("train-baseline", "--config", config(), "--out", out) == EXIT_OK
    d, _ = decisions_from_json((out / "decisions.json").read_text())
    assert set(d.choices.values()) == {"same"}


def test_reject_with_all_none_preset_exits_disconnected(config, tmp_path, capsys):
    path = config("repair_policy = reject\ntheta_preset = all-none\nlr_theta = 0.0\n")
    assert _run("transform", "--config", path, "--out", tmp_path / "r") == EXIT_DISCONNECTED
    assert "output node" in capsys.readouterr().err


def test_repair_with_all_none_preset_succeeds(config, tmp_path):
    path = config("theta_preset = all-none\nlr_theta = 0.0\n")
    assert _run("transform", "--config", path, "--out", tmp_path / "r") == EXIT_OK
    d, _ = decisions_from_json((tmp_path / "r" / "decisions.json").read_text())
    assert d.repaired


def test_malformed_key_is_a_config_error(config, tmp_path, capsys):
    assert _run("transform", "--config", config("learnig_rate = 0.1\n"), "--out", tmp_path) == EXIT_CONFIG
    assert "learnig_rate" in capsys.readouterr().err
    assert _run("bench", "--config", config("methods = original, nat\n"), "--out", tmp_path) == EXIT_CONFIG


def test_export_formats_and_hash_check(config, tmp_path):
    out = tmp_path / "t"
    assert _run("transform", "--config", config(), "--out", out) == EXIT_OK
    ck = out / "checkpoint.json"
    for fmt, name in (("json", "architecture.json"), ("dot", "architecture.dot"), ("theta-csv", "theta.csv")):
        assert _run("export", ck, "--format", fmt, "--out", tmp_path / "e", "--decisions", out / "decisions.json") == 0
        assert (tmp_path / "e" / name).exists()
    theta_lines = (tmp_path / "e" / "theta.csv").read_text().splitlines()
    assert theta_lines[0].startswith("# config_hash: ")
    assert theta_lines[1] == "edge_id,theta_none,theta_id,theta_same,mask_id"
    assert len(theta_lines) == 2 + 4

    other = tmp_path / "other.json"
    other.write_text((out / "decisions.json").read_text().replace(
        json.loads((out / "decisions.json").read_text())["config_hash"], "ffffffffffffffff"))
    assert _run("export", ck, "--decisions", other, "--out", tmp_path / "e") == EXIT_CHECKPOINT


def test_export_of_baseline_has_no_red_edges(config, tmp_path):
    out = tmp_path / "b"
    assert _run("train-baseline", "--config", config(), "--out", out) == EXIT_OK
    assert _run("export", out / "checkpoint.json", "--format", "dot", "--out", out) == EXIT_OK
    assert "color=red" not in (out / "architecture.dot").read_text()
    assert _run("export", out / "checkpoint.json", "--format", "theta-csv", "--out", out) == EXIT_CHECKPOINT


def test_corrupted_checkpoint_exit_code(config, tmp_path, capsys):
    out = tmp_path / "t"
    assert _run("transform", "--config", config(), "--out", out) == EXIT_OK
    ck = out / "checkpoint.json"
    ck.write_text(ck.read_text().replace('"epoch":3', '"epoch":2', 1))
    assert _run("export", ck) == EXIT_CHECKPOINT
    assert "integrity" in capsys.readouterr().err


def test_bench_writes_reports(config, tmp_path, capsys):
    out = tmp_path / "bench"
    assert _run("bench", "--config", config("seeds = 1, 2\nmethods = original, ours-cell\n"), "--out", out) == EXIT_OK
    assert {"report.csv", "report.md", "dot"} <= set(os.listdir(out))
    assert "Avg Acc (%)" in capsys.readouterr().out


def test_oracle_prints_ranking(config, tmp_path, capsys):
    out = tmp_path / "o"
    assert _run("oracle", "--config", config("channels = 2\noracle_epochs = 1\n"), "--out", out) == EXIT_OK
    text = capsys.readouterr().out
    assert "81 candidates" in text and "<- selected" in text
    assert len((out / "oracle.csv").read_text().splitlines()) == 1 + 1 + 81

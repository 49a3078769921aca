"""The command line and the stage plumbing on a tiny config."""

import json
import shutil
import subprocess
import sys

import pytest

from nbest_fusion.cli import main, split_overrides
from nbest_fusion.config import ConfigKeyError
from nbest_fusion.lm import FusionModel
from nbest_fusion.pipeline import metric_report_digests
from nbest_fusion.translator import translate_greedy

TINY = [
    "--task.translator_pairs=120", "--task.fusion_pairs=40", "--translator.steps=30",
    "--pretrain.steps=10", "--pretrain.n_layer=2", "--pretrain.d_model=16", "--pretrain.n_head=2",
    "--pretrain.block_size=200", "--train.max_new_tokens=12", "--eval.n_use_sweep=[1,3]",
    "--eval.compare_modes=[\"adapter\"]", "--train.n_use=3",
]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    wd = tmp_path_factory.mktemp("tiny")
    assert run("run-all", "--workdir", wd, *TINY) == 0
    return wd


def test_split_overrides_accepts_both_spellings():
    ov, rest = split_overrides(["--train.epochs=3", "--task.seed", "4", "--other"])
    assert ov == ["train.epochs=3", "task.seed=4"] and rest == ["--other"]
    with pytest.raises(ConfigKeyError):
        split_overrides(["--train.epochs"])


def test_unknown_config_key_exits_with_code_2(tmp_path, capsys):
    assert run("make-task", "--workdir", tmp_path, "--task.nosuch=1") == 2
    assert "nosuch" in capsys.readouterr().err


def test_missing_upstream_artifact_names_the_stage(tmp_path, capsys):
    assert run("decode", "--workdir", tmp_path) == 3
    err = capsys.readouterr().err
    assert err.startswith("error: decode:") and "translator/model.npz" in err
    assert run("generate", "--workdir", tmp_path, "--mode", "lora") == 3
    assert "runs/lora-n5/model.npz" in capsys.readouterr().err


def test_run_all_writes_every_artifact(tiny_run):
    for rel in ["task/manifest.json", "translator/loss.csv", "decode/nbest.jsonl", "data/test.jsonl",
                "base/model.npz", "runs/adapter-n3/test_outputs.jsonl", "eval/adapter-n3/summary.json",
                "ablation/curve.csv", "compare/report.json", "coverage/coverage.csv", "coverage/points.csv"]:
        assert (tiny_run / rel).exists(), rel
    cfg = json.loads((tiny_run / "config.json").read_text())
    assert cfg["task"]["fusion_pairs"] == 40 and cfg["eval"]["n_use_sweep"] == [1, 3]


def test_manifests_have_hashes_and_no_timestamps(tiny_run):
    m = json.loads((tiny_run / "runs/adapter-n3/manifest.json").read_text())
    assert set(m) >= {"stage", "config_hash", "seeds", "inputs", "outputs", "versions"}
    assert "runs/adapter-n3/test_outputs.jsonl" in m["outputs"]
    text = (tiny_run / "runs/adapter-n3/manifest.json").read_text()
    assert "time" not in text and "date" not in text


def test_translator_loss_curve_records_the_schedule(tiny_run):
    lines = (tiny_run / "translator/loss.csv").read_text().splitlines()
    assert lines[0] == "step,lr,loss"
    lrs = [float(l.split(",")[1]) for l in lines[1:]]
    assert lrs[0] > lrs[-1] > 0


def test_greedy_baseline_matches_the_first_beam_hypothesis(tiny_run, tmp_path):
    """decode --beam 1 is the plain greedy path, scored by evaluate --baseline."""
    wd = tmp_path / "greedy"
    shutil.copytree(tiny_run / "task", wd / "task")
    shutil.copytree(tiny_run / "translator", wd / "translator")
    shutil.copy(tiny_run / "config.json", wd / "config.json")
    assert run("decode", "--workdir", wd, "--beam", "1") == 0
    assert run("build-dataset", "--workdir", wd) == 0
    assert run("evaluate", "--workdir", wd, "--baseline") == 0
    rows = [json.loads(l) for l in (wd / "decode/nbest.jsonl").read_text().splitlines()]
    assert all(len(r["hypotheses"]) == 1 for r in rows)
    model = FusionModel.load(wd / "translator/model.npz")
    for r in rows[:10]:
        assert r["hypotheses"][0]["text"] == translate_greedy(model, r["source"])
    summary = json.loads((wd / "eval/baseline/summary.json").read_text())
    assert 0.0 <= summary["onebest_bleu"] <= 100.0


def test_rerunning_a_stage_reuses_the_finetuned_run(tiny_run, capsys):
    before = (tiny_run / "runs/adapter-n3/model.npz").stat().st_mtime_ns
    assert run("ablate-n", "--workdir", tiny_run) == 0
    assert (tiny_run / "runs/adapter-n3/model.npz").stat().st_mtime_ns == before
    capsys.readouterr()


def test_tiny_rerun_gives_identical_reports(tiny_run, tmp_path):
    assert run("run-all", "--workdir", tmp_path, *TINY) == 0
    assert metric_report_digests(tiny_run) == metric_report_digests(tmp_path)


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "nbest_fusion.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "ablate-n" in out.stdout and "export-ngrams" in out.stdout

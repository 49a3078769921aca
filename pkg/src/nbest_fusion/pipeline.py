"""Pipeline stages over a work directory.

Every stage reads its inputs from files written by earlier stages and writes
its outputs plus a ``manifest.json`` recording input/output digests, the hash
of the config sections it depends on, and library versions. Nothing written
here contains a timestamp, so identical configs give identical files.

Layout under the work directory::

    task/        translator_pairs.jsonl  fusion_pool.jsonl  task.json
    translator/  model.npz  loss.csv
    decode/      nbest.jsonl
    data/        train.jsonl  dev.jsonl  test.jsonl  stats.json
    base/        model.npz  loss.csv
    runs/<mode>-n<k>/   model.npz  loss.csv  dev.json  test_outputs.jsonl
    eval/<mode>-n<k>/   fusion_bleu.json  fusion_chrf.json  ...  summary.json
    ablation/    curve.csv  summary.json
    compare/     report.json
    coverage/    coverage.csv  points.csv  summary.json
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import platform
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .data import PromptTemplate, build_dataset, read_records, write_dataset
from .lm import FusionModel
from .metrics import (COVERAGE_UNITS, bleu, chrf_pp, export_coverage, mean_coverage, ngram_coverage,
                      oracle_best)
from .optim import linear_lr
from .pretrain import pretrain_base_lm
from .trainer import fuse, train, write_loss_curve
from .translator import decode_corpus, read_jsonl, train_toy_translator, write_jsonl

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A stage could not run; the message starts with the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


# config sections each stage depends on (transitively)
STAGE_SECTIONS = {
    "make-task": ("task",),
    "train-translator": ("task", "translator"),
    "decode": ("task", "translator", "decode"),
    "build-dataset": ("task", "translator", "decode", "data"),
    "pretrain-lm": ("task", "pretrain"),
    "train": ("task", "translator", "decode", "data", "pretrain", "model", "train"),
}
STAGE_SECTIONS["generate"] = STAGE_SECTIONS["train"]
STAGE_SECTIONS["evaluate"] = STAGE_SECTIONS["train"]
STAGE_SECTIONS["ablate-n"] = STAGE_SECTIONS["train"] + ("eval",)
STAGE_SECTIONS["compare-tuning"] = STAGE_SECTIONS["ablate-n"]
STAGE_SECTIONS["export-ngrams"] = STAGE_SECTIONS["ablate-n"]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def versions() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__, "nbest_fusion": __version__}


class Workdir:
    def __init__(self, root, config: RunConfig):
        self.root = Path(root)
        self.config = config

    def path(self, rel: str) -> Path:
        return self.root / rel

    def require(self, stage: str, *rels: str) -> None:
        for rel in rels:
            if not self.path(rel).exists():
                producer = rel.split("/")[0]
                raise StageError(stage, f"missing upstream artifact {rel} "
                                        f"(run the stage that writes {producer}/ first)")

    def write_manifest(self, stage: str, out_dir: str, inputs: list[str], outputs: list[str],
                       extra: dict | None = None) -> dict:
        manifest = {
            "stage": stage,
            "config_hash": self.config.digest(*STAGE_SECTIONS[stage]),
            "run_config_hash": self.config.digest(),
            "seeds": _seeds(self.config, STAGE_SECTIONS[stage]),
            "inputs": {rel: sha256_file(self.path(rel)) for rel in inputs},
            "outputs": {rel: sha256_file(self.path(rel)) for rel in outputs},
            "versions": versions(),
        }
        if extra:
            manifest.update(extra)
        _write_json(self.path(out_dir) / "manifest.json", manifest)
        return manifest

    def manifest_matches(self, stage: str, out_dir: str) -> bool:
        """True when ``out_dir`` holds outputs of this stage under the same config and inputs."""
        p = self.path(out_dir) / "manifest.json"
        if not p.exists():
            return False
        m = json.loads(p.read_text(encoding="utf-8"))
        if m.get("config_hash") != self.config.digest(*STAGE_SECTIONS[stage]):
            return False
        files = {**m.get("inputs", {}), **m.get("outputs", {})}
        return all(self.path(rel).exists() and sha256_file(self.path(rel)) == digest
                   for rel, digest in files.items())


def _seeds(config: RunConfig, sections) -> dict:
    d = config.to_dict()
    return {s: d[s]["seed"] for s in sections if "seed" in d[s]}


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _full_fit_curve(losses, lr, lr_end):
    return [(i, linear_lr(i, len(losses), lr, lr_end), v) for i, v in enumerate(losses)]


def template_of(config: RunConfig) -> PromptTemplate:
    d = config.data
    return PromptTemplate(d.instruction, d.separator, d.response_marker, d.dedup)


def run_name(mode: str, n_use: int) -> str:
    return f"{mode}-n{n_use}"


# -- stages ---------------------------------------------------------------------
def make_task(wd: Workdir) -> dict:
    cfg = wd.config.task
    task = cfg.toy_task()
    out = wd.path("task")
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "translator_pairs.jsonl", task.corpus("translator", cfg.translator_pairs))
    write_jsonl(out / "fusion_pool.jsonl",
                [{k: r[k] for k in ("id", "source", "reference")} for r in task.corpus("fusion", cfg.fusion_pairs)])
    _write_json(out / "task.json", {"task": dataclasses.asdict(task), "lexicon": task.lexicon,
                                    "cipher": task.cipher})
    return wd.write_manifest("make-task", "task", [], ["task/translator_pairs.jsonl",
                                                       "task/fusion_pool.jsonl", "task/task.json"])


def train_translator_stage(wd: Workdir) -> dict:
    stage = "train-translator"
    wd.require(stage, "task/translator_pairs.jsonl")
    corpus = read_jsonl(wd.path("task/translator_pairs.jsonl"))
    model, losses = train_toy_translator(wd.config.task.toy_task(), wd.config.translator, corpus,
                                         return_losses=True)
    out = wd.path("translator")
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.npz")
    tc = wd.config.translator
    write_loss_curve(out / "loss.csv", _full_fit_curve(losses, tc.lr, tc.lr_end))
    return wd.write_manifest(stage, "translator", ["task/translator_pairs.jsonl"],
                             ["translator/model.npz", "translator/loss.csv"],
                             {"final_loss": losses[-1]})


def decode_stage(wd: Workdir) -> dict:
    stage = "decode"
    wd.require(stage, "translator/model.npz", "task/fusion_pool.jsonl")
    model = FusionModel.load(wd.path("translator/model.npz"))
    pool = read_jsonl(wd.path("task/fusion_pool.jsonl"))
    d = wd.config.decode
    rows = decode_corpus(model, pool, beam_size=d.beam_size, length_penalty=d.length_penalty)
    wd.path("decode").mkdir(parents=True, exist_ok=True)
    write_jsonl(wd.path("decode/nbest.jsonl"), rows)
    return wd.write_manifest(stage, "decode", ["translator/model.npz", "task/fusion_pool.jsonl"],
                             ["decode/nbest.jsonl"])


def build_dataset_stage(wd: Workdir) -> dict:
    stage = "build-dataset"
    wd.require(stage, "decode/nbest.jsonl")
    rows = read_jsonl(wd.path("decode/nbest.jsonl"))
    d = wd.config.data
    splits, stats = build_dataset(rows, tuple(d.split_ratios), d.seed, wd.config.task.name)
    write_dataset(wd.path("data"), splits, stats)
    outs = [f"data/{s}.jsonl" for s in ("train", "dev", "test")] + ["data/stats.json"]
    return wd.write_manifest(stage, "data", ["decode/nbest.jsonl"], outs, {"stats": stats})


def pretrain_stage(wd: Workdir) -> dict:
    stage = "pretrain-lm"
    wd.require(stage, "task/task.json")
    model, losses = pretrain_base_lm(wd.config.task.toy_task(), wd.config.pretrain, return_losses=True)
    out = wd.path("base")
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.npz")
    pc = wd.config.pretrain
    write_loss_curve(out / "loss.csv", _full_fit_curve(losses, pc.lr, pc.lr_end))
    return wd.write_manifest(stage, "base", ["task/task.json"], ["base/model.npz", "base/loss.csv"],
                             {"final_loss": losses[-1]})


def _fusion_model(wd: Workdir, mode: str) -> FusionModel:
    base = FusionModel.load(wd.path("base/model.npz"))
    m = wd.config.model
    cfg = dataclasses.replace(base.config, prompt_len=m.prompt_len, n_tunable=m.n_tunable,
                              lora_rank=m.lora_rank, lora_alpha=m.lora_alpha, mode="frozen")
    model = FusionModel(cfg, base.base)
    model.set_mode(mode, seed=m.seed)
    return model


def train_stage(wd: Workdir, mode: str | None = None, n_use: int | None = None, reuse: bool = False) -> dict:
    stage = "train"
    mode = mode or wd.config.model.mode
    n_use = n_use or wd.config.train.n_use
    name = f"runs/{run_name(mode, n_use)}"
    if reuse and wd.manifest_matches(stage, name):
        log.info("reusing %s", name)
        return json.loads((wd.path(name) / "manifest.json").read_text(encoding="utf-8"))
    inputs = ["base/model.npz", "data/train.jsonl", "data/dev.jsonl"]
    wd.require(stage, *inputs)
    model = _fusion_model(wd, mode)
    tcfg = dataclasses.replace(wd.config.train, n_use=n_use)
    base_before = model.base_hash()
    res = train(model, read_records(wd.path("data/train.jsonl")), tcfg,
                dev_records=read_records(wd.path("data/dev.jsonl")), template=template_of(wd.config))
    if model.base_hash() != base_before:
        raise StageError(stage, "base weights changed during finetuning")
    out = wd.path(name)
    out.mkdir(parents=True, exist_ok=True)
    model.meta = {"mode": mode, "n_use": n_use, "best_step": res.best_step}
    model.save(out / "model.npz")
    res.write_curve(out / "loss.csv")
    _write_json(out / "dev.json", {"dev_bleu": [[s, v] for s, v in res.dev_history],
                                   "best_step": res.best_step, "skipped_records": res.skipped})
    return wd.write_manifest(stage, name, inputs, [f"{name}/model.npz", f"{name}/loss.csv", f"{name}/dev.json"],
                             {"mode": mode, "n_use": n_use, "base_hash": base_before})


def generate_stage(wd: Workdir, mode: str | None = None, n_use: int | None = None) -> dict:
    stage = "generate"
    mode = mode or wd.config.model.mode
    n_use = n_use or wd.config.train.n_use
    name = f"runs/{run_name(mode, n_use)}"
    wd.require(stage, f"{name}/model.npz", "data/test.jsonl")
    model = FusionModel.load(wd.path(f"{name}/model.npz"))
    records = read_records(wd.path("data/test.jsonl"))
    t = wd.config.train
    outs = fuse(model, records, template_of(wd.config), n_use, t.max_new_tokens, t.temperature, dtype=t.dtype)
    write_jsonl(wd.path(f"{name}/test_outputs.jsonl"),
                [{"id": r.id, "output": o} for r, o in zip(records, outs)])
    # the manifest for this run directory now covers training and generation
    m = json.loads((wd.path(name) / "manifest.json").read_text(encoding="utf-8"))
    m["outputs"][f"{name}/test_outputs.jsonl"] = sha256_file(wd.path(f"{name}/test_outputs.jsonl"))
    _write_json(wd.path(name) / "manifest.json", m)
    return m


def evaluate_stage(wd: Workdir, mode: str | None = None, n_use: int | None = None) -> dict:
    """Fusion, 1-best and oracle scores on the test split.

    The oracle picks the best of the full decoded N-best list whatever
    ``n_use`` the run was trained with, so gap fractions share one ceiling.
    """
    stage = "evaluate"
    mode = mode or wd.config.model.mode
    n_use = n_use or wd.config.train.n_use
    name = run_name(mode, n_use)
    outputs_rel = f"runs/{name}/test_outputs.jsonl"
    wd.require(stage, outputs_rel, "data/test.jsonl")
    records = read_records(wd.path("data/test.jsonl"))
    outputs = {row["id"]: row["output"] for row in read_jsonl(wd.path(outputs_rel))}
    missing = [r.id for r in records if r.id not in outputs]
    if missing:
        raise StageError(stage, f"{len(missing)} test records have no fused output (first: {missing[0]})")
    refs = [r.reference for r in records]
    systems = {
        "fusion": [outputs[r.id] for r in records],
        "onebest": [r.hypotheses[0] for r in records],
        "oracle": [oracle_best(r.hypotheses, r.reference) for r in records],
    }
    out_dir = f"eval/{name}"
    summary = {"run": name, "n_segments": len(records), "config_hash": wd.config.digest(*STAGE_SECTIONS[stage])}
    written = []
    for sys_name, hyps in systems.items():
        for metric, fn in (("bleu", bleu), ("chrf", chrf_pp)):
            rep = fn(hyps, refs)
            rel = f"{out_dir}/{sys_name}_{metric}.json"
            wd.path(out_dir).mkdir(parents=True, exist_ok=True)
            rep.save(wd.path(rel))
            written.append(rel)
            summary[f"{sys_name}_{metric}"] = rep.score
    gap = summary["oracle_bleu"] - summary["onebest_bleu"]
    summary["gain_bleu"] = summary["fusion_bleu"] - summary["onebest_bleu"]
    summary["gap_fraction"] = summary["gain_bleu"] / gap if gap > 0 else None
    _write_json(wd.path(out_dir) / "summary.json", summary)
    written.append(f"{out_dir}/summary.json")
    wd.write_manifest(stage, out_dir, [outputs_rel, "data/test.jsonl"], written)
    return summary


def evaluate_baseline(wd: Workdir) -> dict:
    """Score the translator's 1-best on the test split without any fusion run."""
    stage = "evaluate"
    wd.require(stage, "data/test.jsonl")
    records = read_records(wd.path("data/test.jsonl"))
    refs = [r.reference for r in records]
    hyps = [r.hypotheses[0] for r in records]
    wd.path("eval/baseline").mkdir(parents=True, exist_ok=True)
    summary = {"run": "baseline", "n_segments": len(records)}
    written = []
    for metric, fn in (("bleu", bleu), ("chrf", chrf_pp)):
        rep = fn(hyps, refs)
        rel = f"eval/baseline/onebest_{metric}.json"
        rep.save(wd.path(rel))
        written.append(rel)
        summary[f"onebest_{metric}"] = rep.score
    _write_json(wd.path("eval/baseline/summary.json"), summary)
    wd.write_manifest(stage, "eval/baseline", ["data/test.jsonl"], written + ["eval/baseline/summary.json"])
    return summary


def run_fusion(wd: Workdir, mode: str, n_use: int) -> dict:
    """Train (or reuse), generate and evaluate one (mode, n_use) condition."""
    train_stage(wd, mode, n_use, reuse=True)
    name = f"runs/{run_name(mode, n_use)}"
    if not wd.manifest_matches("generate", name) or not wd.path(f"{name}/test_outputs.jsonl").exists():
        generate_stage(wd, mode, n_use)
    return evaluate_stage(wd, mode, n_use)


def ablate_n_stage(wd: Workdir) -> dict:
    stage = "ablate-n"
    wd.require(stage, "base/model.npz", "data/train.jsonl")
    rows = []
    for n in wd.config.eval.n_use_sweep:
        s = run_fusion(wd, "adapter", n)
        rows.append({"n_use": n, "fusion_bleu": s["fusion_bleu"], "fusion_chrf": s["fusion_chrf"],
                     "onebest_bleu": s["onebest_bleu"], "oracle_bleu": s["oracle_bleu"]})
    out = wd.path("ablation")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "curve.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    _write_json(out / "summary.json", {"rows": rows})
    inputs = [f"eval/{run_name('adapter', n)}/summary.json" for n in wd.config.eval.n_use_sweep]
    wd.write_manifest(stage, "ablation", inputs, ["ablation/curve.csv", "ablation/summary.json"])
    return {"rows": rows}


def compare_tuning_stage(wd: Workdir) -> dict:
    stage = "compare-tuning"
    wd.require(stage, "base/model.npz", "data/train.jsonl")
    n = wd.config.train.n_use
    report: dict = {"n_use": n, "modes": {}}
    for mode in wd.config.eval.compare_modes:
        s = run_fusion(wd, mode, n)
        manifest = json.loads((wd.path(f"runs/{run_name(mode, n)}") / "manifest.json").read_text(encoding="utf-8"))
        report["modes"][mode] = {"bleu": s["fusion_bleu"], "chrf": s["fusion_chrf"],
                                 "trainable_parameters": _count_trainable(wd, mode, n),
                                 "run_config_hash": manifest["config_hash"]}
    modes = list(report["modes"])
    if len(modes) == 2:
        a, b = (report["modes"][m]["bleu"] for m in modes)
        report["abs_bleu_diff"] = abs(a - b)
    report["onebest_bleu"] = s["onebest_bleu"]
    _write_json(wd.path("compare/report.json"), report)
    inputs = [f"eval/{run_name(m, n)}/summary.json" for m in modes]
    wd.write_manifest(stage, "compare", inputs, ["compare/report.json"])
    return report


def _count_trainable(wd: Workdir, mode: str, n_use: int) -> int:
    model = FusionModel.load(wd.path(f"runs/{run_name(mode, n_use)}/model.npz"))
    return int(sum(p.data.size for p in model.tunable_parameters()))


def export_ngrams_stage(wd: Workdir) -> dict:
    stage = "export-ngrams"
    wd.require(stage, "data/test.jsonl")
    records = read_records(wd.path("data/test.jsonl"))
    fused_rel = f"runs/{run_name(wd.config.model.mode, wd.config.train.n_use)}/test_outputs.jsonl"
    fused = {}
    if wd.path(fused_rel).exists():
        fused = {row["id"]: row["output"] for row in read_jsonl(wd.path(fused_rel))}
    max_n = wd.config.eval.coverage_max_n
    primary = wd.config.eval.coverage_unit
    labels = ["1-best", "2..N-best"] + (["fusion"] if fused else [])
    summary: dict = {"unit": primary}
    out = wd.path("coverage")
    out.mkdir(parents=True, exist_ok=True)
    # both units go in the summary; the per-segment tables use the primary one
    for unit in sorted(COVERAGE_UNITS, key=lambda u: u != primary):
        items = [ngram_coverage({"id": r.id, "hypotheses": r.hypotheses, "reference": r.reference},
                                fused.get(r.id), max_n, unit) for r in records]
        if unit == primary:
            export_coverage(items, out / "coverage.csv", out / "points.csv", max_n)
        summary[unit] = {label: {str(n): mean_coverage(items, label, n) for n in range(1, max_n + 1)}
                         for label in labels}
    _write_json(out / "summary.json", summary)
    inputs = ["data/test.jsonl"] + ([fused_rel] if fused else [])
    wd.write_manifest(stage, "coverage", inputs, ["coverage/coverage.csv", "coverage/points.csv",
                                                  "coverage/summary.json"])
    return summary


def run_all(wd: Workdir) -> dict:
    """Every stage in order; returns the main evaluation summary plus the ablation and comparison."""
    wd.root.mkdir(parents=True, exist_ok=True)
    wd.config.save(wd.path("config.json"))
    make_task(wd)
    train_translator_stage(wd)
    decode_stage(wd)
    build_dataset_stage(wd)
    pretrain_stage(wd)
    main = run_fusion(wd, wd.config.model.mode, wd.config.train.n_use)
    ablation = ablate_n_stage(wd)
    compare = compare_tuning_stage(wd)
    coverage = export_ngrams_stage(wd)
    return {"main": main, "ablation": ablation, "compare": compare, "coverage": coverage}


METRIC_REPORT_GLOBS = ("eval/*/*.json", "ablation/curve.csv", "ablation/summary.json",
                       "compare/report.json", "coverage/summary.json", "coverage/coverage.csv")


def metric_report_digests(root) -> dict[str, str]:
    root = Path(root)
    out = {}
    for pattern in METRIC_REPORT_GLOBS:
        for p in sorted(root.glob(pattern)):
            out[str(p.relative_to(root))] = sha256_file(p)
    return out

"""Finetuning on hypotheses-translation pairs, plus a plain full-parameter fitter.

Finetuning touches only the model's tunable parameters. Each optimizer step
averages the masked token loss over ``batch_size * accumulation_steps``
records: micro-batch gradients are weighted by their share of the macro
batch's supervised tokens, so accumulation gives the same gradient as one big
batch. The learning rate falls linearly from ``lr_start`` to ``lr_end``.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import HypoRecord, PromptTemplate, render_all, render_prefix
from .lm import FusionModel, generate_batch
from .metrics import MetricReport, bleu, chrf_pp
from .optim import AdamW, clip_grad_norm, linear_lr
from .tokenizer import TOKENIZER

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 4
    accumulation_steps: int = 8
    epochs: int = 2
    lr_start: float = 1e-2
    lr_end: float = 1e-5
    schedule: str = "linear"
    optimizer: str = "adamw"
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    n_use: int = 5
    dev_limit: int | None = None  # cap on dev records scored per selection round
    max_new_tokens: int = 40
    temperature: float = 0.2
    dtype: str = "float32"

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if self.schedule != "linear":
            raise ValueError("only the linear schedule is implemented")
        if self.optimizer != "adamw":
            raise ValueError("only adamw is implemented")
        if self.batch_size < 1 or self.accumulation_steps < 1 or self.epochs < 1:
            raise ValueError("batch_size, accumulation_steps and epochs must be positive")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.accumulation_steps

    def digest(self) -> str:
        return config_hash(dataclasses.asdict(self))


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainResult:
    model: FusionModel
    curve: list[tuple[int, float, float]]  # (step, lr, loss)
    dev_history: list[tuple[int, float]] = field(default_factory=list)
    skipped: int = 0
    best_step: int = 0

    def write_curve(self, path) -> None:
        write_loss_curve(path, self.curve)


def write_loss_curve(path, curve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss"])
        for step, lr, loss in curve:
            w.writerow([step, f"{lr:.10g}", f"{loss:.10f}"])


def pad_examples(examples: Sequence[tuple[list[int], list[bool]]], pad_id: int = 0):
    """Right-pad rendered examples into shifted (inputs, targets, mask) arrays."""
    width = max(len(ids) for ids, _ in examples) - 1
    n = len(examples)
    inputs = np.full((n, width), pad_id, dtype=np.int64)
    targets = np.full((n, width), pad_id, dtype=np.int64)
    mask = np.zeros((n, width), dtype=bool)
    for i, (ids, m) in enumerate(examples):
        k = len(ids) - 1
        inputs[i, :k] = ids[:-1]
        targets[i, :k] = ids[1:]
        mask[i, :k] = m[1:]
    return inputs, targets, mask


def accumulate_gradients(model: FusionModel, micro_batches: Sequence[Sequence[tuple[list[int], list[bool]]]]) -> float:
    """Backpropagate one macro batch split into micro batches; return its mean token loss.

    Each micro batch's mean loss is weighted by its share of the supervised
    tokens, which makes the summed gradient equal to that of the
    concatenated batch.
    """
    padded = [pad_examples(mb) for mb in micro_batches]
    total = sum(int(m.sum()) for _, _, m in padded)
    if total == 0:
        raise TrainingError("macro batch has no supervised tokens")
    acc = 0.0
    for inputs, targets, mask in padded:
        share = int(mask.sum()) / total
        if share == 0:
            continue
        loss = ad.cross_entropy(model(inputs), targets, mask)
        loss.backward(share)
        acc += share * loss.item()
    return acc


# -- checkpoints ----------------------------------------------------------------
def save_train_checkpoint(path, model: FusionModel, opt: AdamW, step: int, config: TrainConfig,
                          curve=None) -> None:
    header = {
        "step": step,
        "config_hash": config.digest(),
        "mode": model.config.mode,
        "optimizer_t": opt.t,
        "curve": curve or [],
        "names": [t.name for t in model.tunable_parameters()],
    }
    arrays = {}
    for i, p in enumerate(model.tunable_parameters()):
        arrays[f"p{i}"] = p.data
        arrays[f"m{i}"] = opt.m[i]
        arrays[f"v{i}"] = opt.v[i]
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_train_checkpoint(path, model: FusionModel, opt: AdamW, config: TrainConfig) -> dict:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header["config_hash"] != config.digest():
            raise TrainingError("checkpoint was written under a different training config")
        params = model.tunable_parameters()
        if header["names"] != [p.name for p in params]:
            raise TrainingError("checkpoint parameters do not match the model's tunable set")
        for i, p in enumerate(params):
            p.data = np.array(z[f"p{i}"], dtype=p.data.dtype)
        opt.load_state_dict({"t": header["optimizer_t"],
                             "m": [z[f"m{i}"] for i in range(len(params))],
                             "v": [z[f"v{i}"] for i in range(len(params))]})
    opt.params = model.tunable_parameters()
    return header


# -- finetuning -----------------------------------------------------------------
def _snapshot(model: FusionModel) -> list[np.ndarray]:
    return [p.data.copy() for p in model.tunable_parameters()]


def _restore(model: FusionModel, snap: list[np.ndarray]) -> None:
    for p, arr in zip(model.tunable_parameters(), snap):
        p.data = arr.copy()


def train(model: FusionModel, records: Sequence[HypoRecord], config: TrainConfig | None = None,
          dev_records: Sequence[HypoRecord] | None = None, template: PromptTemplate | None = None,
          checkpoint_dir=None, resume_from=None, stop_after: int | None = None) -> TrainResult:
    """Finetune ``model``'s tunable parameters on ``records``.

    With ``dev_records``, dev BLEU is measured after every epoch and the
    best-scoring parameters are kept. ``stop_after`` ends the run early after
    that many optimizer steps (used to test resumption).
    """
    config = config or TrainConfig()
    template = template or PromptTemplate()
    with model.working_precision(config.dtype):
        return _train(model, records, config, dev_records, template, checkpoint_dir, resume_from, stop_after)


def _train(model, records, config, dev_records, template, checkpoint_dir, resume_from, stop_after):
    if model.config.mode not in ("adapter", "lora"):
        raise TrainingError(f"finetuning needs adapter or lora mode, model is {model.config.mode!r}")
    if not records:
        raise TrainingError("training set is empty")
    examples, skipped = render_all(template, records, config.n_use, model.config.max_tokens)
    if not examples:
        raise TrainingError("every training record exceeded the block size")
    params = model.tunable_parameters()
    opt = AdamW(params, lr=config.lr_start, weight_decay=config.weight_decay)
    per_epoch = math.ceil(len(examples) / config.effective_batch)
    total_steps = per_epoch * config.epochs
    curve: list[tuple[int, float, float]] = []
    start_step = 0
    if resume_from is not None:
        header = load_train_checkpoint(resume_from, model, opt, config)
        start_step = header["step"]
        curve = [tuple(row) for row in header["curve"]]
        params = model.tunable_parameters()
    last_good = _snapshot(model)
    dev_history: list[tuple[int, float]] = []
    best = (-1.0, None, 0)
    step = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(examples))
        for k in range(per_epoch):
            if step < start_step:
                step += 1
                continue
            idx = order[k * config.effective_batch:(k + 1) * config.effective_batch]
            micro = [[examples[i] for i in idx[j:j + config.batch_size]]
                     for j in range(0, len(idx), config.batch_size)]
            lr = linear_lr(step, total_steps, config.lr_start, config.lr_end)
            opt.lr = lr
            opt.zero_grad()
            loss = accumulate_gradients(model, micro)
            if not math.isfinite(loss):
                _restore(model, last_good)
                where = ""
                if checkpoint_dir is not None:
                    path = Path(checkpoint_dir) / "last_good.npz"
                    save_train_checkpoint(path, model, opt, step, config, curve)
                    where = f"; last good parameters saved to {path}"
                raise TrainingError(f"loss became {loss} at step {step}{where}")
            clip_grad_norm(params, config.grad_clip)
            opt.step()
            last_good = _snapshot(model)
            curve.append((step, lr, loss))
            log.info("step %d/%d lr %.3g loss %.4f", step + 1, total_steps, lr, loss)
            step += 1
            if stop_after is not None and step >= stop_after:
                if checkpoint_dir is not None:
                    save_train_checkpoint(Path(checkpoint_dir) / f"step{step}.npz", model, opt, step,
                                          config, curve)
                return TrainResult(model, curve, dev_history, skipped, step)
        if dev_records:
            dev = list(dev_records)[: config.dev_limit] if config.dev_limit else list(dev_records)
            score = evaluate_dev(model, dev, template, config).score
            dev_history.append((step, score))
            log.info("epoch %d dev BLEU %.2f", epoch + 1, score)
            if score > best[0]:
                best = (score, _snapshot(model), step)
        if checkpoint_dir is not None:
            save_train_checkpoint(Path(checkpoint_dir) / f"epoch{epoch + 1}.npz", model, opt, step,
                                  config, curve)
    best_step = step
    if best[1] is not None:
        _restore(model, best[1])
        best_step = best[2]
    return TrainResult(model, curve, dev_history, skipped, best_step)


def fuse(model: FusionModel, records: Sequence[HypoRecord], template: PromptTemplate | None = None,
         n_use: int = 5, max_new_tokens: int = 40, temperature: float = 0.2,
         batch_size: int = 16, dtype: str | None = None) -> list[str]:
    """Generate one fused translation per record (greedy, top-1).

    ``dtype`` runs generation in that precision; ``None`` keeps the model's.
    """
    if dtype is not None:
        with model.working_precision(dtype):
            return fuse(model, records, template, n_use, max_new_tokens, temperature, batch_size)
    template = template or PromptTemplate()
    tok = TOKENIZER
    outputs: list[str] = []
    prompts = [render_prefix(template, r.hypotheses, min(n_use, len(r.hypotheses))) for r in records]
    for i in range(0, len(prompts), batch_size):
        chunk = prompts[i:i + batch_size]
        gens = generate_batch(model, chunk, max_new_tokens, temperature, "top1", tok.eos_id)
        outputs.extend(tok.decode(g) for g in gens)
    return outputs


def evaluate_dev(model: FusionModel, records: Sequence[HypoRecord], template: PromptTemplate | None = None,
                 config: TrainConfig | None = None) -> MetricReport:
    """Corpus BLEU of greedy fused outputs against the references.

    Empty generations are scored like any other segment.
    """
    config = config or TrainConfig()
    outs = fuse(model, records, template, config.n_use, config.max_new_tokens, config.temperature)
    return bleu(outs, [r.reference for r in records])


def evaluate_outputs(outputs: Sequence[str], records: Sequence[HypoRecord]) -> dict[str, MetricReport]:
    refs = [r.reference for r in records]
    return {"bleu": bleu(outputs, refs), "chrf++": chrf_pp(outputs, refs)}


# -- full-parameter fitting (translator, base LM) -----------------------------
def fit_full(model: FusionModel, examples: Sequence[tuple[list[int], list[bool]]], steps: int,
             batch_size: int, lr: float, lr_end: float, seed: int = 0, grad_clip: float = 1.0,
             weight_decay: float = 0.0, label: str = "model", dtype: str = "float64") -> list[float]:
    """Train every base weight of ``model`` with AdamW; returns per-step losses."""
    if not examples:
        raise TrainingError(f"{label}: no training examples")
    with model.working_precision(dtype, restore_base=False):
        return _fit_full(model, examples, steps, batch_size, lr, lr_end, seed, grad_clip, weight_decay, label)


def _length_bucketed_batches(examples, batch_size: int, rng: np.random.Generator,
                             pool_batches: int = 32) -> list[list[int]]:
    """One shuffled pass over ``examples`` as batches of similar length (less padding)."""
    order = rng.permutation(len(examples))
    pool = batch_size * pool_batches
    batches = []
    for start in range(0, len(order) - batch_size + 1, pool):
        chunk = sorted(order[start:start + pool], key=lambda i: len(examples[i][0]))
        batches.extend(chunk[j:j + batch_size] for j in range(0, len(chunk) - batch_size + 1, batch_size))
    if not batches:
        batches = [list(order)]
    rng.shuffle(batches)
    return batches


def _fit_full(model, examples, steps, batch_size, lr, lr_end, seed, grad_clip, weight_decay, label):
    model.unfreeze_base()
    params = list(model.base.values())
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng([seed, 7])
    batches: list[list[int]] = []
    losses: list[float] = []
    try:
        for step in range(steps):
            if not batches:
                batches = _length_bucketed_batches(examples, batch_size, rng)
            batch = [examples[i] for i in batches.pop()]
            inputs, targets, mask = pad_examples(batch)
            opt.lr = linear_lr(step, steps, lr, lr_end)
            opt.zero_grad()
            loss = ad.cross_entropy(model(inputs), targets, mask)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"{label}: loss became {value} at step {step} (lr={opt.lr:.3g})")
            loss.backward()
            clip_grad_norm(params, grad_clip)
            opt.step()
            losses.append(value)
            if step % 200 == 0:
                log.info("%s step %d loss %.4f", label, step, value)
    finally:
        model.freeze_base()
    return losses

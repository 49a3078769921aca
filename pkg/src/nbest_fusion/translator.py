"""Toy foundation translator: synthetic language pair, prefix-LM seq2seq, beam search.

The source language is a character cipher of the target language with
adjacent word pairs swapped. Target sentences come from a seeded word-bigram
grammar over a small lexicon, which gives the fusion LM real structure to
learn. A deliberately small, briefly trained model translates imperfectly,
so its beam search returns diverse, partially correct N-best lists.
"""

from __future__ import annotations

import json
import logging
import string
from dataclasses import asdict, dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .lm import FusionModel, LmConfig
from .trainer import TrainingError, fit_full
from .tokenizer import TOKENIZER, CharTokenizer

log = logging.getLogger(__name__)

_LOWER = string.ascii_lowercase
_UPPER = string.ascii_uppercase


# -- toy task ---------------------------------------------------------------
@dataclass(frozen=True)
class ToyTask:
    """A seeded synthetic translation direction.

    ``noise`` corrupts characters of the references the translator is trained
    on; ``source_noise`` corrupts source characters everywhere, standing in
    for an upstream recognizer in a cascaded pipeline.
    """

    name: str = "toyA-toyB"
    seed: int = 0
    n_words: int = 40
    min_words: int = 3
    max_words: int = 5
    min_chars: int = 2
    max_chars: int = 4
    successors: int = 5
    noise: float = 0.1
    source_noise: float = 0.0

    def __post_init__(self):
        if not 1 <= self.min_words <= self.max_words:
            raise ValueError("need 1 <= min_words <= max_words")
        if not 1 <= self.min_chars <= self.max_chars:
            raise ValueError("need 1 <= min_chars <= max_chars")
        if not (0.0 <= self.noise < 1.0 and 0.0 <= self.source_noise < 1.0):
            raise ValueError("noise rates must lie in [0, 1)")

    # lexicon, grammar and cipher are pure functions of the seed
    def _rng(self, *stream: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, *stream])

    @cached_property
    def lexicon(self) -> list[str]:
        rng = self._rng(1)
        words: list[str] = []
        seen = set()
        while len(words) < self.n_words:
            n = int(rng.integers(self.min_chars, self.max_chars + 1))
            w = "".join(rng.choice(list(_LOWER), size=n))
            if w not in seen:
                seen.add(w)
                words.append(w)
        return words

    @cached_property
    def grammar(self) -> tuple[np.ndarray, np.ndarray]:
        """(start distribution, transition matrix) over lexicon indices."""
        rng = self._rng(2)
        w = self.n_words
        start = rng.dirichlet(np.ones(w))
        trans = np.zeros((w, w))
        for i in range(w):
            nxt = rng.choice(w, size=min(self.successors, w), replace=False)
            trans[i, nxt] = rng.dirichlet(np.ones(len(nxt)))
        return start, trans

    @cached_property
    def cipher(self) -> dict[str, str]:
        """Target letter -> source letter."""
        perm = self._rng(3).permutation(26)
        return {_LOWER[i]: _UPPER[perm[i]] for i in range(26)}

    def sample_target(self, rng: np.random.Generator) -> str:
        start, trans = self.grammar
        lex = self.lexicon
        n = int(rng.integers(self.min_words, self.max_words + 1))
        idx = [int(rng.choice(self.n_words, p=start))]
        while len(idx) < n:
            idx.append(int(rng.choice(self.n_words, p=trans[idx[-1]])))
        return " ".join(lex[i] for i in idx)

    def encode_source(self, target: str) -> str:
        """Inverse of :meth:`reference_fn`: cipher each letter, swap word pairs."""
        enc = self.cipher
        words = ["".join(enc[c] for c in w) for w in target.split(" ")]
        return " ".join(_swap_pairs(words))

    def reference_fn(self, source: str) -> str:
        """Deterministic source -> target map. Total over strings of A-Z and spaces."""
        dec = {v: k for k, v in self.cipher.items()}
        words = ["".join(dec.get(c, c) for c in w) for w in source.split(" ")]
        return " ".join(_swap_pairs(words))

    def corpus(self, split: str, n: int) -> list[dict]:
        """``n`` seeded records ``{id, source, reference, train_target}`` for a split.

        ``train_target`` is the reference with label noise applied; only the
        translator's training loop reads it.
        """
        stream = {"translator": 10, "fusion": 11, "pretrain": 12}.get(split)
        if stream is None:
            stream = 100 + sum(ord(c) for c in split)
        rng = self._rng(stream)
        out = []
        for i in range(n):
            tgt = self.sample_target(rng)
            src = self.encode_source(tgt)
            if self.source_noise:
                src = _corrupt(src, self.source_noise, _UPPER, rng)
            noisy = _corrupt(tgt, self.noise, _LOWER, rng) if self.noise else tgt
            out.append({"id": f"{split}-{i:06d}", "source": src, "reference": tgt,
                        "train_target": noisy})
        return out


def _swap_pairs(words: list[str]) -> list[str]:
    out = list(words)
    for i in range(0, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


def _corrupt(text: str, p: float, alphabet: str, rng: np.random.Generator) -> str:
    chars = list(text)
    for i, c in enumerate(chars):
        if c != " " and rng.random() < p:
            chars[i] = alphabet[int(rng.integers(len(alphabet)))]
    return "".join(chars)


NOISE_PROFILES = {
    # end-to-end: the translator sees clean sources
    "e2e": {"noise": 0.1, "source_noise": 0.0},
    # cascaded: a recognizer upstream garbles some source characters
    "cascaded": {"noise": 0.1, "source_noise": 0.05},
}


# -- N-best lists -------------------------------------------------------------
@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    text: str
    log_prob: float


@dataclass
class NBestList:
    """Hypotheses sorted by ``log_prob`` (length-normalized), best first."""

    hypotheses: list[Hypothesis]
    beam_size: int
    finished: bool = True

    def __len__(self) -> int:
        return len(self.hypotheses)

    @property
    def best(self) -> Hypothesis:
        return self.hypotheses[0]

    def texts(self) -> list[str]:
        return [h.text for h in self.hypotheses]


StepFn = Callable[[list[tuple[int, ...]]], np.ndarray]


def _norm(score: float, length: int, length_penalty: float) -> float:
    return score / (max(length, 1) ** length_penalty)


def beam_search(step_fn: StepFn, beam_size: int, max_len: int, eos_id: int,
                length_penalty: float = 1.0, n_best: int | None = None,
                detok: Callable[[Sequence[int]], str] | None = None) -> NBestList:
    """Beam search over a next-token log-probability function.

    ``step_fn(prefixes)`` returns a ``(len(prefixes), V)`` array of log-probs.
    Each step ranks all one-token extensions of the live beams by cumulative
    log-prob (ties: lexicographic token order). An extension ending in
    ``eos_id`` is kept as finished when it ranks within the top ``beam_size``;
    the best ``beam_size`` others stay live. Search ends once ``beam_size``
    hypotheses have finished, nothing is live, or ``max_len`` tokens
    (counting eos) have been produced. Finished hypotheses are scored by
    ``sum_logprob / len ** length_penalty`` with ``len`` counting the eos.

    If nothing finishes, the best live hypothesis is returned with
    ``finished=False``.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    n_best = beam_size if n_best is None else n_best
    detok = detok or (lambda toks: " ".join(map(str, toks)))
    live: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: dict[tuple[int, ...], float] = {}
    for _ in range(max_len):
        logp = np.asarray(step_fn([p for p, _ in live]), dtype=np.float64)
        cands = []
        for (prefix, score), row in zip(live, logp):
            for tok in np.flatnonzero(np.isfinite(row)):
                cands.append((score + float(row[tok]), prefix + (int(tok),)))
        cands.sort(key=lambda c: (-c[0], c[1]))
        new_live = []
        for rank, (score, seq) in enumerate(cands):
            if seq[-1] == eos_id:
                if rank < beam_size:
                    finished.setdefault(seq, score)
            elif len(new_live) < beam_size:
                new_live.append((seq, score))
        live = new_live
        if len(finished) >= beam_size or not live:
            break
    if finished:
        ranked = sorted(
            ((_norm(s, len(seq), length_penalty), seq) for seq, s in finished.items()),
            key=lambda c: (-c[0], c[1]),
        )[:n_best]
        hyps = [Hypothesis(seq[:-1], detok(seq[:-1]), score) for score, seq in ranked]
        return NBestList(hyps, beam_size, finished=True)
    seq, s = max(live, key=lambda c: (c[1], tuple(-t for t in c[0])))
    log.warning("beam search produced no finished hypothesis within %d steps", max_len)
    return NBestList([Hypothesis(seq, detok(seq), _norm(s, len(seq), length_penalty))],
                     beam_size, finished=False)


def greedy_decode(step_fn: StepFn, max_len: int, eos_id: int) -> tuple[int, ...]:
    """Argmax decoding; the returned tokens exclude the eos."""
    seq: tuple[int, ...] = ()
    for _ in range(max_len):
        tok = int(np.argmax(step_fn([seq])[0]))
        if tok == eos_id:
            break
        seq += (tok,)
    return seq


def brute_force_nbest(step_fn: StepFn, vocab_size: int, max_len: int, eos_id: int,
                      n_best: int, length_penalty: float = 1.0) -> list[tuple[tuple[int, ...], float]]:
    """Score every eos-terminated sequence of at most ``max_len`` tokens; return the top ``n_best``.

    Exponential in ``max_len``; only meant for checking :func:`beam_search`.
    """
    scored = []
    frontier: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    for _ in range(max_len):
        nxt = []
        for prefix, s in frontier:
            row = step_fn([prefix])[0]
            for tok in range(vocab_size):
                if not np.isfinite(row[tok]):
                    continue
                if tok == eos_id:
                    scored.append((prefix, _norm(s + row[tok], len(prefix) + 1, length_penalty)))
                else:
                    nxt.append((prefix + (tok,), s + row[tok]))
        frontier = nxt
    scored.sort(key=lambda c: (-c[1], c[0] + (eos_id,)))
    return scored[:n_best]


# -- seq2seq model ------------------------------------------------------------
@dataclass
class TranslatorConfig:
    n_layer: int = 2
    d_model: int = 32
    n_head: int = 2
    block_size: int = 80
    steps: int = 2000
    batch_size: int = 16
    lr: float = 3e-3
    lr_end: float = 3e-4
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    dtype: str = "float32"

    def lm_config(self, vocab_size: int) -> LmConfig:
        return LmConfig(n_layer=self.n_layer, d_model=self.d_model, n_head=self.n_head,
                        vocab_size=vocab_size, block_size=self.block_size, prompt_len=1,
                        mode="frozen")


def seq2seq_example(source: str, target: str, tok: CharTokenizer = TOKENIZER):
    """Token ids ``[bos] src [sep] tgt [eos]`` and a mask over the target side."""
    ids = [tok.bos_id] + tok.encode(source) + [tok.sep_id] + tok.encode(target) + [tok.eos_id]
    mask = [False] * (len(source) + 2) + [True] * (len(target) + 1)
    return ids, mask


def train_toy_translator(task: ToyTask, config: TranslatorConfig | None = None,
                         corpus: list[dict] | None = None, n_train: int = 3000,
                         return_losses: bool = False):
    """Fit a small prefix-conditioned decoder to the task's noisy training pairs.

    Capacity and step budget are kept low on purpose: the model should
    translate most of a sentence right while still erring often enough for
    its N-best lists to disagree.
    """
    config = config or TranslatorConfig()
    corpus = corpus if corpus is not None else task.corpus("translator", n_train)
    model = FusionModel.create(config.lm_config(TOKENIZER.vocab_size), seed=config.seed)
    examples = [seq2seq_example(r["source"], r["train_target"]) for r in corpus]
    losses = fit_full(model, examples, config.steps, config.batch_size, config.lr, config.lr_end,
                      seed=config.seed, grad_clip=config.grad_clip,
                      weight_decay=config.weight_decay, label="translator",
                      dtype=config.dtype)
    model.meta = {"kind": "translator", "task": asdict(task), "train": asdict(config),
                  "final_loss": losses[-1]}
    return (model, losses) if return_losses else model


def translator_step_fn(model: FusionModel, source: str, tok: CharTokenizer = TOKENIZER) -> StepFn:
    prefix = [tok.bos_id] + tok.encode(source) + [tok.sep_id]
    limit = model.config.max_tokens
    w = model.base["lm_head"].data

    def step(prefixes: list[tuple[int, ...]]) -> np.ndarray:
        batch = np.array([prefix + list(p) for p in prefixes], dtype=np.int64)
        if batch.shape[1] > limit:
            raise ValueError("decoded sequence exceeds the translator's block size")
        with ad.no_grad():
            h = model.hidden(batch).data[:, -1]
        z = h @ w
        z = z - z.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    return step


def translate_nbest(model: FusionModel, source: str, beam_size: int = 5, max_len: int | None = None,
                    length_penalty: float = 1.0) -> NBestList:
    tok = TOKENIZER
    if max_len is None:
        max_len = model.config.max_tokens - len(source) - 2
    return beam_search(translator_step_fn(model, source, tok), beam_size, max_len, tok.eos_id,
                       length_penalty=length_penalty, detok=tok.decode)


def translate_greedy(model: FusionModel, source: str, max_len: int | None = None) -> str:
    tok = TOKENIZER
    if max_len is None:
        max_len = model.config.max_tokens - len(source) - 2
    return tok.decode(greedy_decode(translator_step_fn(model, source, tok), max_len, tok.eos_id))


def decode_corpus(model: FusionModel, records: list[dict], beam_size: int = 5,
                  length_penalty: float = 1.0) -> list[dict]:
    """Beam-decode each record into the JSON-lines decode schema."""
    out = []
    for r in records:
        nb = translate_nbest(model, r["source"], beam_size=beam_size, length_penalty=length_penalty)
        out.append({
            "id": r["id"],
            "source": r["source"],
            "reference": r["reference"],
            "hypotheses": [{"text": h.text, "log_prob": h.log_prob} for h in nb.hypotheses],
        })
    return out


def write_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


__all__ = [
    "Hypothesis", "NBestList", "NOISE_PROFILES", "ToyTask", "TrainingError", "TranslatorConfig",
    "beam_search", "brute_force_nbest", "decode_corpus", "greedy_decode",
    "read_jsonl", "seq2seq_example", "train_toy_translator", "translate_greedy",
    "translate_nbest", "write_jsonl",
]

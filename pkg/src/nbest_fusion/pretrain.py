"""Stand-in for a pretrained LLM: a small LM fitted on generic target-language text.

The mixture teaches three general skills the fusion stage can build on:
fluent target-language text, copying a requested line out of a numbered
list, and restoring a sentence from several imperfect versions of it. The
restore documents come with procedurally varied instructions so the skill
attaches to the list layout rather than to one phrasing. None of the
documents come from the translator, and none use the fusion instruction.
"""

from __future__ import annotations

import dataclasses
import logging
import string
from dataclasses import asdict, dataclass

import numpy as np

from .data import escape
from .lm import FusionModel, LmConfig
from .tokenizer import TOKENIZER
from .trainer import fit_full
from .translator import ToyTask

log = logging.getLogger(__name__)

COPY_INSTRUCTION = "Repeat line {k}:"
MARKER = "Answer: "

# building blocks for restore-task instructions
_VERBS = ("Restore", "Recover", "Fix", "Repair", "Reconstruct", "Combine", "Merge", "Clean up",
          "Correct", "Write", "Produce", "Give", "Recreate", "Denoise")
_OBJECTS = ("the sentence", "the text", "one sentence", "the original line", "a clean version",
            "the true sentence", "the intended text", "one correct line")
_LINKS = ("from", "using", "given", "based on", "out of")
_ADJS = ("noisy", "corrupted", "imperfect", "draft", "possible", "rough", "garbled", "damaged", "")
_NOUNS = ("copies", "versions", "lines", "drafts", "guesses", "variants", "readings", "attempts")


@dataclass
class PretrainConfig:
    n_layer: int = 4
    d_model: int = 64
    n_head: int = 4
    block_size: int = 256
    prompt_len: int = 10
    steps: int = 5000
    batch_size: int = 4
    lr: float = 3e-3
    lr_end: float = 1e-4
    grad_clip: float = 1.0
    seed: int = 0
    p_text: float = 0.1
    p_copy: float = 0.15
    p_restore: float = 0.75
    char_noise: float = 0.15
    p_clean_first: float = 0.65
    p_clean_later: float = 0.33
    p_shared_error: float = 0.0
    max_copies: int = 5
    pack: bool = True
    dtype: str = "float32"

    def lm_config(self) -> LmConfig:
        return LmConfig(n_layer=self.n_layer, d_model=self.d_model, n_head=self.n_head,
                        vocab_size=TOKENIZER.vocab_size, block_size=self.block_size,
                        prompt_len=self.prompt_len, mode="frozen")


def restore_instruction(rng: np.random.Generator, n: int) -> str:
    """A randomly phrased request to recover one sentence from ``n`` versions."""
    adj = _ADJS[int(rng.integers(len(_ADJS)))]
    noun = _NOUNS[int(rng.integers(len(_NOUNS)))]
    count = f"{n} " if rng.random() < 0.7 else ""
    det = "these " if rng.random() < 0.6 else "the following "
    words = [_VERBS[int(rng.integers(len(_VERBS)))], _OBJECTS[int(rng.integers(len(_OBJECTS)))],
             _LINKS[int(rng.integers(len(_LINKS)))], det + count + (adj + " " if adj else "") + noun]
    return " ".join(words) + ":"


def corrupt_sentence(text: str, rng: np.random.Generator, char_noise: float,
                     lexicon: list[str] | None = None, n_edits: int = 1) -> str:
    """Apply ``n_edits`` random edits to a sentence.

    An edit is one of: a word repeated in place of its successor, two
    neighbours swapped, a word dropped, a word replaced by another lexicon
    word, an extra word or word fragment appended, the last word cut short,
    or character typos inside one word (each character changed with
    probability ``char_noise``, at least one). Appending and cutting mimic a
    beam search that ends a sentence too late or too early.
    """
    words = text.split(" ")
    for _ in range(n_edits):
        r = rng.random()
        i = int(rng.integers(len(words)))
        if r < 0.25 and len(words) > 1:
            i = min(i, len(words) - 2)
            words[i + 1] = words[i]
        elif r < 0.37 and len(words) > 1:
            i = min(i, len(words) - 2)
            words[i], words[i + 1] = words[i + 1], words[i]
        elif r < 0.45 and len(words) > 1:
            del words[i]
        elif r < 0.6 and lexicon:
            words[i] = lexicon[int(rng.integers(len(lexicon)))]
        elif r < 0.75 and lexicon:
            extra = lexicon[int(rng.integers(len(lexicon)))]
            words.append(extra[:int(rng.integers(1, len(extra) + 1))])
        elif r < 0.82 and len(words[-1]) > 1:
            words[-1] = words[-1][:int(rng.integers(1, len(words[-1])))]
        else:
            chars = list(words[i])
            hits = [j for j in range(len(chars)) if rng.random() < char_noise] or [int(rng.integers(len(chars)))]
            for j in hits:
                chars[j] = string.ascii_lowercase[int(rng.integers(26))]
            words[i] = "".join(chars)
    return " ".join(words)


def _numbered(lines) -> str:
    return "".join(f"{i}. {escape(x)}\n" for i, x in enumerate(lines, 1))


def candidate_lines(clean: str, k: int, rng: np.random.Generator, config: PretrainConfig,
                    lexicon: list[str]) -> list[str]:
    """``k`` versions of ``clean``, roughly ordered best first like a ranked list.

    The first line is exact with probability ``p_clean_first``. When it is
    not, the exact sentence still shows up lower in the list with probability
    ``p_clean_later`` (usually second), and each other line copies the first
    line's mistake before adding its own with probability ``p_shared_error``.
    """
    first_clean = rng.random() < config.p_clean_first
    first = clean if first_clean else corrupt_sentence(clean, rng, config.char_noise, lexicon,
                                                       1 + int(rng.random() < 0.35))
    scored = []
    for _ in range(k - 1):
        edits = 1 + int(rng.random() < 0.35)
        base = first if not first_clean and rng.random() < config.p_shared_error else clean
        line = corrupt_sentence(base, rng, config.char_noise, lexicon, edits)
        scored.append((edits + rng.normal(0.0, 0.7), line))
    rest = [line for _, line in sorted(scored, key=lambda sc: sc[0])]
    if not first_clean and rest and rng.random() < config.p_clean_later:
        slot = min(int(rng.geometric(0.6)) - 1, len(rest) - 1)
        rest[slot] = clean
    return [first] + rest


def pretrain_examples(task: ToyTask, n: int, config: PretrainConfig) -> list[tuple[list[int], list[bool]]]:
    """``n`` tokenized documents with their loss masks.

    Every token after bos is supervised. In the list documents each line is a
    near copy of the others, which is what pushes the model to learn copying.
    """
    tok = TOKENIZER
    rng = np.random.default_rng([task.seed, config.seed, 12])
    probs = np.array([config.p_text, config.p_copy, config.p_restore], dtype=float)
    probs /= probs.sum()
    lex = task.lexicon
    limit = config.lm_config().max_tokens + 1  # inputs drop the last token
    out = []
    while len(out) < n:
        kind = int(rng.choice(3, p=probs))
        if kind == 0:
            text = task.sample_target(rng)
        else:
            k = int(rng.integers(1, config.max_copies + 1))
            clean = task.sample_target(rng)
            lines = candidate_lines(clean, k, rng, config, lex)
            if kind == 1:
                pick = int(rng.integers(1, k + 1))
                head, answer = COPY_INSTRUCTION.format(k=pick), lines[pick - 1]
            else:
                head, answer = restore_instruction(rng, k), clean
            text = head + "\n" + _numbered(lines) + MARKER + answer
        ids = [tok.bos_id] + tok.encode(text) + [tok.eos_id]
        if len(ids) > limit:
            continue  # too long for the block; draw another document
        out.append((ids, [False] + [True] * (len(ids) - 1)))
    return out


def pack_documents(docs: list[tuple[list[int], list[bool]]], limit: int,
                   fillers: list[tuple[list[int], list[bool]]] = ()) -> list[tuple[list[int], list[bool]]]:
    """Concatenate consecutive documents into sequences of at most ``limit`` tokens.

    When the next document does not fit, the gap is topped up from
    ``fillers`` (short documents, used in order and cycled). Packing spreads
    every kind of document over the whole position range, so the learned
    position embeddings of late positions get trained too.
    """
    packed: list[tuple[list[int], list[bool]]] = []
    ids: list[int] = []
    mask: list[bool] = []
    f = 0
    for d_ids, d_mask in docs:
        if ids and len(ids) + len(d_ids) > limit:
            while fillers and len(ids) + len(fillers[f % len(fillers)][0]) <= limit:
                ids = ids + fillers[f % len(fillers)][0]
                mask = mask + fillers[f % len(fillers)][1]
                f += 1
            packed.append((ids, mask))
            ids, mask = [], []
        ids = ids + d_ids
        mask = mask + d_mask
    if ids:
        packed.append((ids, mask))
    return packed


def pretraining_corpus(task: ToyTask, config: PretrainConfig) -> list[tuple[list[int], list[bool]]]:
    """Training sequences for ``config``: packed blocks, or single documents when ``pack`` is off."""
    n = config.steps * config.batch_size
    if not config.pack:
        return pretrain_examples(task, n, config)
    docs = pretrain_examples(task, 2 * n + 64, config)
    plain = dataclasses.replace(config, p_text=1.0, p_copy=0.0, p_restore=0.0, seed=config.seed + 1)
    fillers = pretrain_examples(task, 4096, plain)
    return pack_documents(docs, config.lm_config().max_tokens + 1, fillers)


def pretrain_base_lm(task: ToyTask, config: PretrainConfig | None = None, return_losses: bool = False):
    """Build and fit the frozen base LM that finetuning later adapts."""
    config = config or PretrainConfig()
    model = FusionModel.create(config.lm_config(), seed=config.seed)
    examples = pretraining_corpus(task, config)
    losses = fit_full(model, examples, config.steps, config.batch_size, config.lr, config.lr_end,
                      seed=config.seed, grad_clip=config.grad_clip, label="base-lm",
                      dtype=config.dtype)
    model.meta = {"kind": "base-lm", "task": asdict(task), "pretrain": asdict(config),
                  "final_loss": losses[-1]}
    return (model, losses) if return_losses else model

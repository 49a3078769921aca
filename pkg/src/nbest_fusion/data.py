"""Hypotheses-translation pairs: dataset construction and prompt rendering."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .lm import SequenceTooLong
from .metrics import tokenize
from .tokenizer import TOKENIZER, CharTokenizer

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")
RECORD_KEYS = ("id", "lang_pair", "hypotheses", "reference")


class DataError(ValueError):
    pass


@dataclass
class HypoRecord:
    id: str
    lang_pair: str
    hypotheses: list[str]
    reference: str
    split: str = "train"

    def __post_init__(self):
        if not self.hypotheses:
            raise DataError(f"record {self.id}: needs at least one hypothesis")
        if not self.reference:
            raise DataError(f"record {self.id}: empty reference")

    def to_json(self) -> dict:
        return {"id": self.id, "lang_pair": self.lang_pair,
                "hypotheses": list(self.hypotheses), "reference": self.reference}

    @classmethod
    def from_json(cls, obj: dict, split: str = "train") -> "HypoRecord":
        extra = set(obj) - set(RECORD_KEYS)
        missing = set(RECORD_KEYS) - set(obj)
        if extra or missing:
            raise DataError(f"record keys differ from schema: missing={sorted(missing)} extra={sorted(extra)}")
        return cls(obj["id"], obj["lang_pair"], list(obj["hypotheses"]), obj["reference"], split)


@dataclass(frozen=True)
class PromptTemplate:
    """Instruction, numbered hypotheses (one per line), then the response marker.

    ``{n}`` in the instruction is replaced by the number of hypotheses shown.
    Backslashes and newlines inside hypotheses are escaped, so distinct
    hypothesis lists always render to distinct prompts.
    """

    instruction: str = "Integrate the following {n} translation candidates into one best translation:"
    separator: str = "\n"
    response_marker: str = "Answer: "
    dedup: bool = False

    def hypothesis_block(self, hypotheses: Sequence[str]) -> str:
        return "".join(f"{i}. {escape(h)}{self.separator}" for i, h in enumerate(hypotheses, 1))

    def prefix_text(self, hypotheses: Sequence[str], n_use: int) -> str:
        shown = self.select(hypotheses, n_use)
        return (self.instruction.format(n=len(shown)) + self.separator
                + self.hypothesis_block(shown) + self.response_marker)

    def select(self, hypotheses: Sequence[str], n_use: int) -> list[str]:
        if not 1 <= n_use <= len(hypotheses):
            raise ValueError(f"n_use={n_use} outside [1, {len(hypotheses)}]")
        shown = list(hypotheses[:n_use])
        if self.dedup:
            shown = list(dict.fromkeys(shown))
        return shown


def escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\n", "\\n")


def unescape(text: str) -> str:
    out, i = [], 0
    while i < len(text):
        if text[i] == "\\" and i + 1 < len(text):
            out.append("\n" if text[i + 1] == "n" else text[i + 1])
            i += 2
        else:
            out.append(text[i])
            i += 1
    return "".join(out)


def render_prefix(template: PromptTemplate, hypotheses: Sequence[str], n_use: int,
                  tok: CharTokenizer = TOKENIZER) -> list[int]:
    """Token ids of ``[bos] instruction hypotheses marker``: the generation prompt."""
    return [tok.bos_id] + tok.encode(template.prefix_text(hypotheses, n_use))


def render_prompt(template: PromptTemplate, record: HypoRecord, n_use: int,
                  max_tokens: int | None = None, tok: CharTokenizer = TOKENIZER):
    """Training sequence and loss mask for one record.

    The mask is true exactly on the reference tokens and the closing eos, so
    the loss never supervises the instruction or the hypotheses. Raises
    :class:`SequenceTooLong` if the sequence (minus the final token, which is
    only ever a target) would not fit in ``max_tokens``.
    """
    prefix = render_prefix(template, record.hypotheses, n_use, tok)
    answer = tok.encode(record.reference) + [tok.eos_id]
    ids = prefix + answer
    if max_tokens is not None and len(ids) - 1 > max_tokens:
        raise SequenceTooLong(f"record {record.id}: {len(ids) - 1} tokens > {max_tokens}")
    mask = [False] * len(prefix) + [True] * len(answer)
    return ids, mask


def render_all(template: PromptTemplate, records: Iterable[HypoRecord], n_use: int,
               max_tokens: int | None = None):
    """Render records, skipping (and counting) any that do not fit the block."""
    out, skipped = [], 0
    for r in records:
        try:
            out.append(render_prompt(template, r, min(n_use, len(r.hypotheses)), max_tokens))
        except SequenceTooLong as exc:
            skipped += 1
            log.warning("skipping %s", exc)
    return out, skipped


def _split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    bounds = np.rint(np.cumsum(ratios) * n).astype(int)
    bounds[-1] = n
    return list(np.diff(np.concatenate([[0], bounds])))


def build_dataset(decode_rows: Sequence[dict], split_ratios=(0.8, 0.1, 0.1), seed: int = 0,
                  lang_pair: str = "toyA-toyB") -> tuple[dict[str, list[HypoRecord]], dict]:
    """Shuffle decoded rows with ``seed`` and cut them into train/dev/test records.

    Returns the records per split and a statistics dict
    ``{split: {pairs, avg_len_tokens}}`` where the length is the mean number
    of reference word tokens.
    """
    if len(split_ratios) != len(SPLITS) or abs(sum(split_ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios {split_ratios} must be three numbers summing to 1")
    if any(r < 0 for r in split_ratios):
        raise DataError("split ratios must be nonnegative")
    ids = [row["id"] for row in decode_rows]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise DataError(f"duplicate ids in decode output: {dup[:5]}")
    order = np.random.default_rng(seed).permutation(len(decode_rows))
    sizes = _split_sizes(len(decode_rows), split_ratios)
    out: dict[str, list[HypoRecord]] = {}
    start = 0
    for split, size in zip(SPLITS, sizes):
        chunk = sorted(order[start:start + size])
        start += size
        out[split] = [
            HypoRecord(str(decode_rows[i]["id"]), lang_pair,
                       [h["text"] for h in decode_rows[i]["hypotheses"]],
                       decode_rows[i]["reference"], split)
            for i in chunk
        ]
    return out, dataset_stats(out)


def dataset_stats(splits: dict[str, list[HypoRecord]]) -> dict:
    stats = {}
    for split, records in splits.items():
        lengths = [len(tokenize(r.reference)) for r in records]
        stats[split] = {"pairs": len(records),
                        "avg_len_tokens": round(float(np.mean(lengths)), 6) if lengths else 0.0}
    return stats


def records_from_pairs(pairs: Iterable[tuple[Sequence[str], str]], lang_pair: str,
                       prefix: str = "mono", split: str = "train") -> list[HypoRecord]:
    """Records from any (N-best, reference) pairs in the target language.

    Provenance does not matter: N-best lists of a monolingual recognizer are
    as usable as translator output.
    """
    return [HypoRecord(f"{prefix}-{i:06d}", lang_pair, list(h), ref, split)
            for i, (h, ref) in enumerate(pairs)]


def write_records(path, records: Iterable[HypoRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


def read_records(path, split: str | None = None) -> list[HypoRecord]:
    split = split or Path(path).stem
    with open(path, encoding="utf-8") as fh:
        return [HypoRecord.from_json(json.loads(line), split) for line in fh if line.strip()]


def write_dataset(outdir, splits: dict[str, list[HypoRecord]], stats: dict) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for split, records in splits.items():
        write_records(outdir / f"{split}.jsonl", records)
    with open(outdir / "stats.json", "w", encoding="utf-8") as fh:
        json.dump(stats, fh, sort_keys=True, indent=2)
        fh.write("\n")

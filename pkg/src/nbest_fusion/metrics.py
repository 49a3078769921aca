"""Corpus BLEU, chrF++ and reference n-gram coverage of N-best lists.

Both scorers keep their sufficient statistics in the returned
:class:`MetricReport`, so corpus scores can be recomputed (or merged across
shards) without the text.

Tokenization for BLEU and for chrF++'s word n-grams is fixed: punctuation
characters are split off as separate tokens, then the string is split on
whitespace. Only single-reference scoring is supported.
"""

from __future__ import annotations

import csv
import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

_PUNCT = re.compile(r"([^\w\s])")


class MetricError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return _PUNCT.sub(r" \1 ", text).split()


def word_ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def char_ngrams(text: str, n: int) -> Counter:
    return Counter(text[i:i + n] for i in range(len(text) - n + 1))


@dataclass
class MetricReport:
    metric: str
    score: float
    segments: list[float]
    config: dict
    stats: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "MetricReport":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))

    def recompute(self) -> float:
        """Corpus score from the stored sufficient statistics alone."""
        if self.metric == "bleu":
            return bleu_from_stats(self.stats, **{k: self.config[k] for k in ("max_n", "smoothing")})
        if self.metric == "chrf++":
            return chrf_from_stats(self.stats["counts"], self.config["beta"])
        raise MetricError(f"unknown metric {self.metric!r}")


def _check_pairs(hypotheses, references) -> None:
    if len(hypotheses) != len(references):
        raise MetricError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    for i, ref in enumerate(references):
        if not ref or not ref.strip():
            raise MetricError(f"reference {i} is empty")


# -- BLEU ----------------------------------------------------------------------
SMOOTHING = ("add-one", "none")


def bleu_segment_stats(hypothesis: str, reference: str, max_n: int = 4) -> dict:
    hyp, ref = tokenize(hypothesis), tokenize(reference)
    matches, totals = [], []
    for n in range(1, max_n + 1):
        h, r = word_ngrams(hyp, n), word_ngrams(ref, n)
        matches.append(sum((h & r).values()))
        totals.append(max(len(hyp) - n + 1, 0))
    return {"matches": matches, "totals": totals, "hyp_len": len(hyp), "ref_len": len(ref)}


def _merge_bleu(stats: Sequence[dict], max_n: int) -> dict:
    out = {"matches": [0] * max_n, "totals": [0] * max_n, "hyp_len": 0, "ref_len": 0}
    for s in stats:
        for i in range(max_n):
            out["matches"][i] += s["matches"][i]
            out["totals"][i] += s["totals"][i]
        out["hyp_len"] += s["hyp_len"]
        out["ref_len"] += s["ref_len"]
    return out


def bleu_precisions(stats: dict, max_n: int = 4, smoothing: str = "add-one") -> list[float]:
    """Clipped n-gram precisions; with ``add-one``, zero precisions for n >= 2 become (m+1)/(t+1)."""
    if smoothing not in SMOOTHING:
        raise MetricError(f"smoothing must be one of {SMOOTHING}")
    out = []
    for n in range(1, max_n + 1):
        m, t = stats["matches"][n - 1], stats["totals"][n - 1]
        if m == 0 and n >= 2 and smoothing == "add-one":
            out.append((m + 1) / (t + 1))
        else:
            out.append(m / t if t else 0.0)
    return out


def brevity_penalty(hyp_len: int, ref_len: int) -> float:
    if hyp_len == 0:
        return 0.0
    return 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)


def bleu_from_stats(stats: dict, max_n: int = 4, smoothing: str = "add-one") -> float:
    precisions = bleu_precisions(stats, max_n, smoothing)
    if min(precisions) <= 0.0:
        return 0.0
    geo = math.exp(sum(math.log(p) for p in precisions) / max_n)
    return 100.0 * brevity_penalty(stats["hyp_len"], stats["ref_len"]) * geo


def bleu(hypotheses: Sequence[str], references: Sequence[str], max_n: int = 4,
         smoothing: str = "add-one") -> MetricReport:
    """Corpus BLEU: brevity penalty times the geometric mean of clipped n-gram precisions."""
    _check_pairs(hypotheses, references)
    seg_stats = [bleu_segment_stats(h, r, max_n) for h, r in zip(hypotheses, references)]
    corpus = _merge_bleu(seg_stats, max_n)
    return MetricReport(
        metric="bleu",
        score=bleu_from_stats(corpus, max_n, smoothing),
        segments=[bleu_from_stats(s, max_n, smoothing) for s in seg_stats],
        config={"max_n": max_n, "smoothing": smoothing, "tokenize": "punct-split+whitespace"},
        stats=corpus,
    )


# -- chrF++ --------------------------------------------------------------------
def chrf_segment_stats(hypothesis: str, reference: str, char_order: int = 6,
                       word_order: int = 2) -> list[list[int]]:
    """Per order ``[hyp_count, ref_count, matches]``: char orders first, then word orders.

    Character n-grams ignore whitespace, as in the reference chrF tooling.
    """
    hyp_c = "".join(hypothesis.split())
    ref_c = "".join(reference.split())
    rows = []
    for n in range(1, char_order + 1):
        h, r = char_ngrams(hyp_c, n), char_ngrams(ref_c, n)
        rows.append([sum(h.values()), sum(r.values()), sum((h & r).values())])
    hyp_w, ref_w = tokenize(hypothesis), tokenize(reference)
    for n in range(1, word_order + 1):
        h, r = word_ngrams(hyp_w, n), word_ngrams(ref_w, n)
        rows.append([sum(h.values()), sum(r.values()), sum((h & r).values())])
    return rows


def chrf_from_stats(counts: Sequence[Sequence[int]], beta: float = 2.0) -> float:
    """F-beta of precision and recall averaged over the orders that have n-grams on both sides."""
    prec = rec = 0.0
    effective = 0
    for n_hyp, n_ref, n_match in counts:
        if n_hyp > 0 and n_ref > 0:
            prec += n_match / n_hyp
            rec += n_match / n_ref
            effective += 1
    if effective == 0:
        return 0.0
    prec /= effective
    rec /= effective
    if prec + rec == 0:
        return 0.0
    b2 = beta * beta
    return 100.0 * (1 + b2) * prec * rec / (b2 * prec + rec)


def chrf_pp(hypotheses: Sequence[str], references: Sequence[str], char_order: int = 6,
            word_order: int = 2, beta: float = 2.0) -> MetricReport:
    _check_pairs(hypotheses, references)
    seg = [chrf_segment_stats(h, r, char_order, word_order) for h, r in zip(hypotheses, references)]
    total = [[0, 0, 0] for _ in range(char_order + word_order)]
    for rows in seg:
        for acc, row in zip(total, rows):
            for k in range(3):
                acc[k] += row[k]
    return MetricReport(
        metric="chrf++",
        score=chrf_from_stats(total, beta),
        segments=[chrf_from_stats(rows, beta) for rows in seg],
        config={"char_order": char_order, "word_order": word_order, "beta": beta},
        stats={"counts": total},
    )


def sentence_bleu(hypothesis: str, reference: str, max_n: int = 4, smoothing: str = "add-one") -> float:
    return bleu_from_stats(bleu_segment_stats(hypothesis, reference, max_n), max_n, smoothing)


def oracle_best(hypotheses: Sequence[str], reference: str) -> str:
    """Hypothesis with the highest sentence BLEU (first one wins ties)."""
    best, best_score = hypotheses[0], -1.0
    for h in hypotheses:
        s = sentence_bleu(h, reference)
        if s > best_score:
            best, best_score = h, s
    return best


# -- n-gram coverage -----------------------------------------------------------
COVERAGE_SETS = ("1-best", "2..N-best", "fusion")


@dataclass
class NgramCoverage:
    """Reference n-gram coverage of one segment's hypothesis groups.

    ``coverage[label][n]`` is |ngrams(label) ∩ ngrams(reference)| / |ngrams(reference)|
    over distinct n-grams of ``unit`` (words, or characters, which are the
    model's tokens), or ``None`` when the reference has no n-grams of that order.
    """

    segment_id: str
    ngrams: dict[str, dict[int, set]]
    coverage: dict[str, dict[int, float | None]]
    unit: str = "word"


COVERAGE_UNITS = ("word", "char")


def _ngram_set(texts: Sequence[str], n: int, unit: str = "word") -> set:
    out: set = set()
    for t in texts:
        out.update(word_ngrams(tokenize(t), n) if unit == "word" else char_ngrams(t, n))
    return out


def ngram_coverage(record: dict, fusion_output: str | None = None, max_n: int = 3,
                   unit: str = "word") -> NgramCoverage:
    """Coverage of the reference's n-grams by the 1-best, the other hypotheses, and the fusion output.

    ``record`` needs ``hypotheses`` (beam order) and ``reference``. With a
    single hypothesis the ``2..N-best`` group is empty and covers nothing.
    """
    if unit not in COVERAGE_UNITS:
        raise ValueError(f"unit must be one of {COVERAGE_UNITS}")
    hyps = record["hypotheses"]
    if not hyps:
        raise MetricError("record has no hypotheses")
    groups = {"1-best": hyps[:1], "2..N-best": hyps[1:], "reference": [record["reference"]]}
    if fusion_output is not None:
        groups["fusion"] = [fusion_output]
    sets = {label: {n: _ngram_set(texts, n, unit) for n in range(1, max_n + 1)} for label, texts in groups.items()}
    cov: dict[str, dict[int, float | None]] = {}
    for label in groups:
        if label == "reference":
            continue
        cov[label] = {}
        for n in range(1, max_n + 1):
            ref = sets["reference"][n]
            cov[label][n] = len(sets[label][n] & ref) / len(ref) if ref else None
    return NgramCoverage(str(record.get("id", "")), sets, cov, unit)


def mean_coverage(items: Sequence[NgramCoverage], label: str, n: int) -> float:
    vals = [c.coverage[label][n] for c in items if label in c.coverage and c.coverage[label][n] is not None]
    return float(np.mean(vals)) if vals else float("nan")


def char_ngram_vectors(items: Sequence[str], orders=(1, 2, 3)) -> tuple[np.ndarray, list[str]]:
    """Bag-of-character-n-gram count matrix (rows follow ``items``) and its column vocabulary."""
    bags = []
    vocab: dict[str, int] = {}
    for text in items:
        bag = Counter()
        padded = f" {text} "
        for n in orders:
            bag.update(char_ngrams(padded, n))
        bags.append(bag)
        for g in bag:
            vocab.setdefault(g, len(vocab))
    cols = sorted(vocab)
    index = {g: i for i, g in enumerate(cols)}
    mat = np.zeros((len(items), len(cols)))
    for row, bag in enumerate(bags):
        for g, c in bag.items():
            mat[row, index[g]] = c
    return mat, cols


def pca_2d(mat: np.ndarray) -> np.ndarray:
    """Project rows onto the top two principal components (sign fixed for determinism)."""
    if mat.shape[0] == 0:
        return np.zeros((0, 2))
    centered = mat - mat.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    for i in range(comps.shape[0]):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    pts = centered @ comps.T
    if pts.shape[1] < 2:
        pts = np.hstack([pts, np.zeros((pts.shape[0], 2 - pts.shape[1]))])
    return pts


def export_coverage(items: Sequence[NgramCoverage], coverage_csv, points_csv, max_n: int = 3) -> None:
    """Write the per-segment coverage table and 2-D points of every distinct n-gram."""
    with open(coverage_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["segment_id", "n", "set_label", "coverage"])
        for c in items:
            for label, per_n in c.coverage.items():
                for n in range(1, max_n + 1):
                    v = per_n[n]
                    w.writerow([c.segment_id, n, label, "" if v is None else f"{v:.6f}"])
    rows = []
    for c in items:
        for label, per_n in c.ngrams.items():
            for n in range(1, max_n + 1):
                for g in sorted(per_n[n]):
                    rows.append((c.segment_id, n, label, g if isinstance(g, str) else " ".join(g)))
    pts = pca_2d(char_ngram_vectors([r[3] for r in rows])[0]) if rows else np.zeros((0, 2))
    with open(points_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["segment_id", "n", "set_label", "ngram", "x", "y"])
        for (sid, n, label, text), (x, y) in zip(rows, pts):
            w.writerow([sid, n, label, text, f"{x:.6f}", f"{y:.6f}"])

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nbest_fusion.translator import (
    ToyTask,
    beam_search,
    brute_force_nbest,
    greedy_decode,
    seq2seq_example,
)
from nbest_fusion.tokenizer import TOKENIZER

EOS = 0


def table_step_fn(table):
    """Next-token log-probs from a table keyed by the last token (None = start)."""
    logt = {k: np.log(np.asarray(v, dtype=float)) for k, v in table.items()}

    def step(prefixes):
        return np.stack([logt[p[-1] if p else None] for p in prefixes])

    return step


def random_step_fn(vocab, seed):
    """Prefix-dependent distributions: a fresh Dirichlet draw per distinct prefix."""
    cache = {}

    def step(prefixes):
        rows = []
        for p in prefixes:
            if p not in cache:
                rng = np.random.default_rng([seed, len(p), *p])
                cache[p] = np.log(rng.dirichlet(np.full(vocab, 0.7)))
            rows.append(cache[p])
        return np.stack(rows)

    return step


# hand-set bigram model over {eos, a=1, b=2, c=3}; the top five mix lengths 1..3
HAND_TABLE = {
    None: [0.05, 0.4, 0.15, 0.4],
    1: [0.05, 0.4, 0.45, 0.1],
    2: [0.35, 0.2, 0.05, 0.4],
    3: [0.4, 0.05, 0.25, 0.3],
}


def enumerate_by_hand(table, max_len, length_penalty=1.0):
    """Independent oracle: itertools over every non-eos prefix, scored in closed form."""
    out = []
    for n in range(max_len):
        for body in itertools.product([1, 2, 3], repeat=n):
            seq = body + (EOS,)
            prev, lp = None, 0.0
            for t in seq:
                lp += math.log(table[prev][t])
                prev = t
            out.append((body, lp / len(seq) ** length_penalty))
    out.sort(key=lambda c: (-c[1], c[0] + (EOS,)))
    return out


def test_hand_fixture_beam_five_equals_exhaustive_top_five():
    step = table_step_fn(HAND_TABLE)
    nb = beam_search(step, beam_size=5, max_len=4, eos_id=EOS)
    expected = enumerate_by_hand(HAND_TABLE, 4)[:5]
    assert nb.finished
    assert [h.tokens for h in nb.hypotheses] == [e[0] for e in expected]
    for h, (_, score) in zip(nb.hypotheses, expected):
        assert abs(h.log_prob - score) < 1e-12


def test_brute_force_helper_agrees_with_itertools_oracle():
    got = brute_force_nbest(table_step_fn(HAND_TABLE), 4, 4, EOS, n_best=40)
    want = enumerate_by_hand(HAND_TABLE, 4)
    assert len(want) == 40
    assert [g[0] for g in got] == [w[0] for w in want]
    np.testing.assert_allclose([g[1] for g in got], [w[1] for w in want], rtol=0, atol=1e-12)


def test_vocab_three_len_three_top_five():
    table = {None: [0.2, 0.5, 0.3], 1: [0.3, 0.3, 0.4], 2: [0.5, 0.25, 0.25]}
    step = table_step_fn(table)
    got = beam_search(step, beam_size=12, max_len=3, eos_id=EOS, n_best=5)
    want = brute_force_nbest(step, 3, 3, EOS, n_best=5)
    assert [h.tokens for h in got.hypotheses] == [w[0] for w in want]
    np.testing.assert_allclose([h.log_prob for h in got.hypotheses], [w[1] for w in want], atol=1e-12)


@given(vocab=st.integers(2, 4), max_len=st.integers(1, 3), seed=st.integers(0, 10_000),
       lp=st.sampled_from([0.0, 0.5, 1.0]))
@settings(max_examples=40, deadline=None)
def test_wide_beam_is_exact(vocab, max_len, seed, lp):
    step = random_step_fn(vocab, seed)
    total = sum((vocab - 1) ** n for n in range(max_len + 1)) * vocab
    got = beam_search(step, beam_size=total, max_len=max_len, eos_id=EOS, length_penalty=lp)
    want = brute_force_nbest(step, vocab, max_len, EOS, n_best=total, length_penalty=lp)
    assert [h.tokens for h in got.hypotheses] == [w[0] for w in want]
    np.testing.assert_allclose([h.log_prob for h in got.hypotheses], [w[1] for w in want], atol=1e-12)


@given(vocab=st.integers(2, 6), seed=st.integers(0, 10_000), max_len=st.integers(1, 6))
@settings(max_examples=40, deadline=None)
def test_beam_of_one_is_greedy(vocab, seed, max_len):
    step = random_step_fn(vocab, seed)
    nb = beam_search(step, beam_size=1, max_len=max_len, eos_id=EOS)
    assert nb.best.tokens == greedy_decode(step, max_len, EOS)


@given(vocab=st.integers(2, 6), seed=st.integers(0, 10_000), beam=st.integers(1, 6))
@settings(max_examples=40, deadline=None)
def test_nbest_invariants(vocab, seed, beam):
    nb = beam_search(random_step_fn(vocab, seed), beam_size=beam, max_len=6, eos_id=EOS)
    assert 1 <= len(nb) <= beam
    keys = [(-h.log_prob, h.tokens) for h in nb.hypotheses]
    assert keys == sorted(keys)
    assert len({h.tokens for h in nb.hypotheses}) == len(nb)
    assert all(nb.best.log_prob >= h.log_prob for h in nb.hypotheses)


def test_unfinished_search_returns_flagged_best_live():
    # eos is impossible, so nothing can finish
    table = {None: [0.0, 0.7, 0.3], 1: [0.0, 0.4, 0.6], 2: [0.0, 0.9, 0.1]}
    with np.errstate(divide="ignore"):
        nb = beam_search(table_step_fn(table), beam_size=2, max_len=3, eos_id=EOS)
    assert not nb.finished and len(nb) == 1
    assert nb.best.tokens == (1, 2, 1)


def test_beam_search_argument_checks():
    step = table_step_fn(HAND_TABLE)
    with pytest.raises(ValueError):
        beam_search(step, 0, 3, EOS)
    with pytest.raises(ValueError):
        beam_search(step, 2, 0, EOS)


# -- toy task -------------------------------------------------------------------
def test_task_is_seed_deterministic():
    a, b = ToyTask(seed=3), ToyTask(seed=3)
    assert a.corpus("dev", 20) == b.corpus("dev", 20)
    assert a.corpus("dev", 20) != ToyTask(seed=4).corpus("dev", 20)


def test_reference_fn_inverts_source_encoding():
    task = ToyTask()
    for r in task.corpus("check", 200):
        assert task.reference_fn(r["source"]) == r["reference"]
        assert task.encode_source(r["reference"]) == r["source"]


@given(st.text(alphabet="ABCDEFGHIJKLMNOPQRSTUVWXYZ ", max_size=30))
@settings(max_examples=100, deadline=None)
def test_reference_fn_is_total(src):
    out = ToyTask().reference_fn(src)
    assert out == ToyTask().reference_fn(src)
    assert len(out) == len(src)


def test_noise_only_touches_training_targets():
    rows = ToyTask(noise=0.5).corpus("x", 50)
    assert sum(r["train_target"] != r["reference"] for r in rows) > 25
    assert all(len(r["train_target"]) == len(r["reference"]) for r in rows)


def test_sentences_follow_the_grammar():
    task = ToyTask()
    lex = {w: i for i, w in enumerate(task.lexicon)}
    _, trans = task.grammar
    for r in task.corpus("g", 100):
        words = r["reference"].split(" ")
        assert task.min_words <= len(words) <= task.max_words
        for a, b in zip(words, words[1:]):
            assert trans[lex[a], lex[b]] > 0


def test_seq2seq_mask_covers_target_and_eos():
    ids, mask = seq2seq_example("AB C", "xy")
    assert ids[0] == TOKENIZER.bos_id and ids[5] == TOKENIZER.sep_id and ids[-1] == TOKENIZER.eos_id
    assert sum(mask) == 3 and mask[-3:] == [True] * 3

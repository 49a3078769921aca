"""Beam search against exhaustive enumeration on a hand-set 4-symbol model.

Symbol 0 is end-of-sequence. Each row of ``TABLE`` is the next-symbol
distribution after the given last symbol (``None`` = start).

Run: python3 demos/beam_vs_exhaustive.py
"""

import numpy as np

from nbest_fusion.translator import beam_search, brute_force_nbest

TABLE = {None: [0.05, 0.4, 0.15, 0.4], 1: [0.05, 0.4, 0.45, 0.1],
         2: [0.35, 0.2, 0.05, 0.4], 3: [0.4, 0.05, 0.25, 0.3]}


def step(prefixes):
    return np.log(np.array([TABLE[p[-1] if p else None] for p in prefixes]))


beam = beam_search(step, beam_size=5, max_len=4, eos_id=0)
exact = brute_force_nbest(step, vocab_size=4, max_len=4, eos_id=0, n_best=5, length_penalty=1.0)
print("rank  beam            exhaustive")
for i, (h, e) in enumerate(zip(beam.hypotheses, exact), 1):
    print(f"{i:>4}  {str(h.tokens):<10}{h.log_prob:+.4f}  {str(e[0]):<10}{e[1]:+.4f}")

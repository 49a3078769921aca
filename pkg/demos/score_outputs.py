"""Corpus BLEU and chrF++ for a few hand-written outputs.

Run: python3 demos/score_outputs.py
"""

from nbest_fusion.metrics import bleu, chrf_pp

refs = ["the cat sat on the mat", "a quick brown fox", "it rains today"]
hyps = ["the cat sat on a mat", "a quick brown fox", "today it rains"]

b = bleu(hyps, refs)
c = chrf_pp(hyps, refs)
print(f"BLEU   {b.score:6.2f}  (n-gram matches {b.stats['matches']}, totals {b.stats['totals']})")
print(f"chrF++ {c.score:6.2f}")
print(f"identity BLEU {bleu(refs, refs).score}, chrF++ {chrf_pp(refs, refs).score}")

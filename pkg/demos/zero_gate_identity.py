"""Adapter mode with every gate at zero reproduces the frozen model exactly.

Run: python3 demos/zero_gate_identity.py
"""

import numpy as np

from nbest_fusion.lm import FusionModel, LmConfig

cfg = LmConfig(n_layer=4, d_model=64, n_head=4, vocab_size=100, block_size=64, mode="adapter")
adapter = FusionModel.create(cfg, seed=0)
frozen = FusionModel(LmConfig(**{**cfg.to_dict(), "mode": "frozen"}), adapter.base)

rng = np.random.default_rng(0)
ids = rng.integers(0, 100, size=(8, 40))
gap = np.abs(adapter(ids).data - frozen(ids).data).max()
print(f"zero gates: max |adapter - frozen| = {gap:.3g}")

for g in adapter.adapter.gates.values():
    g.data = np.array(0.5)
gap = np.abs(adapter(ids).data - frozen(ids).data).max()
print(f"gates at 0.5: max |adapter - frozen| = {gap:.3g}")

"""Residual quantization on clustered toy features.

Each extra stage quantizes what the previous stages left over, so the
residual energy should fall stage by stage.

Run: python3 demos/rvq_tour.py
"""
from __future__ import annotations

import numpy as np

from muc import rvq

rng = np.random.default_rng(0)
centres = rng.standard_normal((32, 8)) * 3
x = centres[rng.integers(0, 32, 8000)] + 0.5 * rng.standard_normal((8000, 8))
print(f"feature energy per row: {(x ** 2).sum(1).mean():.3f}")

for n_stages in (1, 2, 4):
    cfg = rvq.RvqConfig(n_stages, 32, 8)
    books = rvq.train(cfg, x, steps=60, batch=1024, reseed_every=10, seed=1)
    codes, _, energies = rvq.quantize(x, books)
    stats = rvq.codebook_stats(codes, cfg)
    print(f"\n{n_stages} stage(s) x 32 codes")
    for k, (e, s) in enumerate(zip(energies, stats)):
        print(f"  after stage {k + 1}: residual {e:7.4f}   utilization {s['utilization']:.2f}"
              f"   perplexity {s['perplexity']:5.1f}")

# Ties are settled towards the lowest index: the point 0 is equally far from -1 and +1.
tie = rvq.Codebooks(rvq.RvqConfig(1, 2, 1), np.array([[[1.0], [-1.0]]]))
print("\ntie at 0 between +1 (index 0) and -1 (index 1) ->", rvq.quantize(np.zeros((1, 1)), tie)[0].codes[0])

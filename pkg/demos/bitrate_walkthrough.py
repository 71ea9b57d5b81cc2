"""Where the LOW and HIGH bitrates come from, byte by byte.

Run: python3 demos/bitrate_walkthrough.py
"""
from __future__ import annotations

import numpy as np

from muc import bitstream as B
from muc import rvq

low, high = rvq.RvqConfig.low(8), rvq.RvqConfig.high(8)

# A power-of-two codebook packs into a whole number of bits per index.
print("LOW  1 x 16384 ->", B.bits_per_frame(low).packed, "bits/frame,",
      B.bits_per_frame(low).bps() / 1000, "kbps")

# 10000 is not a power of two. One frame of 4 indices needs 54 bits, although
# log2(10000 ** 4) is only 53.15. Grouping frames into blocks recovers most of the gap.
for block in (1, 2, 4, 16, 64, 256):
    rate = B.bits_per_frame(high, block)
    print(f"HIGH block {block:>3}: {float(rate.packed):8.4f} bits/frame -> {rate.bps() / 1000:.4f} kbps")
print(f"HIGH ideal:     {B.bits_per_frame(high).exact:8.4f} bits/frame")

# One tiny stream, dissected.
codes = rvq.CodeSeq(np.array([[0, 1, 2, 3], [9999, 5000, 42, 7]]), rvq.CONFIG_HIGH)
data = B.encode_stream(codes, B.header_for(high, 2, block_len=1))
print("\nheader :", data[:B.HEADER_SIZE].hex(" "))
print("payload:", data[B.HEADER_SIZE:].hex(" "))
for name, value in B.describe(B.decode_stream(data)[0]).items():
    print(f"  {name:22} {value}")

# A 35.84 s LOW clip costs exactly 1568 payload bytes.
n = 896
stream = B.encode_stream(rvq.CodeSeq(np.random.default_rng(0).integers(0, 16384, (n, 1)), rvq.CONFIG_LOW),
                         B.header_for(low, n))
print(f"\n35.84 s at LOW: {len(stream) - B.HEADER_SIZE} payload bytes "
      f"({B.achieved_kbps(len(stream) - B.HEADER_SIZE, n)} kbps)")

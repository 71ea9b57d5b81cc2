"""The .muc container: a fixed header followed by block-radix packed code indices.

Each block of ``block_len`` frames is flattened frame-major, codebook-minor and
read as the digits of one integer in base ``codebook_size`` (least significant
digit first). That integer is written in exactly
``ceil(log2(codebook_size ** count))`` bits, and the blocks are concatenated
into a little-endian bit string (bit ``i`` is bit ``i % 8`` of byte ``i // 8``).
A final partial block uses the width of its own digit count. Bits after the last
block up to the byte boundary must be zero.

Stereo streams store channel 0's frames followed by channel 1's, as one sequence.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .rvq import CONFIG_CUSTOM, CONFIG_HIGH, CONFIG_LOW, CodeSeq, RvqConfig

MAGIC = b"MUC1"
VERSION = 1
HEADER = struct.Struct("<4sBBIBHIBIH")
HEADER_SIZE = HEADER.size  # 24
DEFAULT_BLOCK_LEN = 64
PRESET_SHAPES = {CONFIG_LOW: (1, 16384), CONFIG_HIGH: (4, 10000)}


class StreamError(ValueError):
    pass


class BadMagic(StreamError):
    pass


class UnsupportedVersion(StreamError):
    pass


class TruncatedPayload(StreamError):
    pass


class CorruptStream(StreamError):
    pass


@dataclass(frozen=True)
class StreamHeader:
    config_id: int
    sample_rate: int
    channels: int
    token_rate: int
    n_frames: int  # per channel
    n_codebooks: int
    codebook_size: int
    block_len: int = DEFAULT_BLOCK_LEN
    version: int = VERSION

    def pack(self) -> bytes:
        return HEADER.pack(MAGIC, self.version, self.config_id, self.sample_rate, self.channels,
                           self.token_rate, self.n_frames, self.n_codebooks, self.codebook_size,
                           self.block_len)

    @classmethod
    def unpack(cls, data: bytes) -> "StreamHeader":
        if len(data) < 4 or data[:4] != MAGIC:
            raise BadMagic("not a .muc stream (bad magic)")
        if len(data) < HEADER_SIZE:
            raise TruncatedPayload(f"header needs {HEADER_SIZE} bytes, got {len(data)}")
        _, version, cid, sr, ch, rate, n, n_cb, size, block = HEADER.unpack_from(data)
        if version != VERSION:
            raise UnsupportedVersion(f"stream version {version} unsupported (expected {VERSION})")
        h = cls(cid, sr, ch, rate, n, n_cb, size, block, version)
        h.validate()
        return h

    def validate(self) -> None:
        if self.channels not in (1, 2):
            raise CorruptStream(f"channels {self.channels} not in (1, 2)")
        if self.n_codebooks < 1 or self.codebook_size < 2:
            raise CorruptStream(f"invalid codebook shape {self.n_codebooks}x{self.codebook_size}")
        if self.block_len < 1 or self.token_rate < 1 or self.sample_rate < 1:
            raise CorruptStream("block_len, token_rate and sample_rate must be positive")
        if self.config_id not in (CONFIG_CUSTOM, CONFIG_LOW, CONFIG_HIGH):
            raise CorruptStream(f"unknown config id {self.config_id}")
        shape = PRESET_SHAPES.get(self.config_id)
        if shape and shape != (self.n_codebooks, self.codebook_size):
            raise CorruptStream(f"config id {self.config_id} requires codebooks {shape}")

    @property
    def n_rows(self) -> int:
        return self.n_frames * self.channels


def header_for(config: RvqConfig, n_frames: int, sample_rate: int = 24000, channels: int = 1,
               token_rate: int = 25, block_len: int = DEFAULT_BLOCK_LEN) -> StreamHeader:
    h = StreamHeader(config.config_id, sample_rate, channels, token_rate, n_frames,
                     config.n_codebooks, config.codebook_size, block_len)
    h.validate()
    return h


@lru_cache(maxsize=256)
def block_width(base: int, count: int) -> int:
    """Bits needed for ``count`` base-``base`` digits: ceil(log2(base ** count))."""
    return (base ** count - 1).bit_length() if count else 0


@dataclass(frozen=True)
class BitRate:
    exact: float  # n_codebooks * log2(codebook_size)
    packed: Fraction  # bits per frame actually spent with full blocks

    def bps(self, token_rate: float = 25.0) -> float:
        return float(self.packed) * token_rate


def bits_per_frame(config: RvqConfig | StreamHeader, block_len: int | None = None) -> BitRate:
    block_len = block_len or getattr(config, "block_len", DEFAULT_BLOCK_LEN)
    exact = config.n_codebooks * math.log2(config.codebook_size)
    return BitRate(exact, Fraction(block_width(config.codebook_size, block_len * config.n_codebooks), block_len))


def payload_bits(n_rows: int, n_codebooks: int, base: int, block_len: int) -> int:
    full, rem = divmod(n_rows, block_len)
    return full * block_width(base, block_len * n_codebooks) + block_width(base, rem * n_codebooks)


def pack_block(indices, base: int) -> int:
    """Radix value of a (frames, codebooks) block: sum of idx_j * base**j over the flattened block."""
    flat = np.asarray(indices, dtype=np.int64).ravel()
    if flat.size and (flat.min() < 0 or flat.max() >= base):
        raise ValueError(f"index outside [0, {base})")
    value = 0
    for d in flat[::-1].tolist():
        value = value * base + d
    return value


def unpack_block(value: int, base: int, count: int) -> list[int]:
    if value >= base ** count:
        raise CorruptStream("block value exceeds radix range")
    out = []
    for _ in range(count):
        value, d = divmod(value, base)
        out.append(d)
    return out


def _payload(codes: np.ndarray, base: int, block_len: int) -> tuple[bytes, int]:
    acc = 0
    offset = 0
    n_cb = codes.shape[1]
    for s in range(0, len(codes), block_len):
        block = codes[s:s + block_len]
        acc |= pack_block(block, base) << offset
        offset += block_width(base, len(block) * n_cb)
    return acc.to_bytes((offset + 7) // 8, "little"), offset


def encode_stream(codes: CodeSeq | np.ndarray, header: StreamHeader) -> bytes:
    c = codes.codes if isinstance(codes, CodeSeq) else np.asarray(codes, dtype=np.int64)
    header.validate()
    if c.ndim != 2 or c.shape != (header.n_rows, header.n_codebooks):
        raise ValueError(f"codes shape {c.shape} != ({header.n_rows}, {header.n_codebooks}) from header")
    if isinstance(codes, CodeSeq) and codes.config_id != header.config_id:
        raise ValueError(f"code config {codes.config_id} != header config {header.config_id}")
    payload, _ = _payload(c, header.codebook_size, header.block_len)
    return header.pack() + payload


def decode_stream(data: bytes) -> tuple[StreamHeader, CodeSeq]:
    data = bytes(data)
    h = StreamHeader.unpack(data)
    body = data[HEADER_SIZE:]
    # cheap bound before exact big-integer widths, so corrupt headers cannot stall
    approx = h.n_rows * h.n_codebooks * math.log2(h.codebook_size)
    if approx > 8 * len(body) + 64:
        raise TruncatedPayload(f"payload holds {len(body)} bytes, header implies about {approx / 8:.0f}")
    n_bits = payload_bits(h.n_rows, h.n_codebooks, h.codebook_size, h.block_len)
    need = (n_bits + 7) // 8
    if len(body) < need:
        raise TruncatedPayload(f"payload holds {len(body)} bytes, header implies {need}")
    if len(body) > need:
        raise CorruptStream(f"{len(body) - need} trailing bytes after payload")
    acc = int.from_bytes(body, "little")
    if acc >> n_bits:
        raise CorruptStream("non-zero padding bits")
    rows = []
    offset = 0
    for s in range(0, h.n_rows, h.block_len):
        n = min(h.block_len, h.n_rows - s)
        w = block_width(h.codebook_size, n * h.n_codebooks)
        value = (acc >> offset) & ((1 << w) - 1)
        rows.extend(unpack_block(value, h.codebook_size, n * h.n_codebooks))
        offset += w
    codes = np.array(rows, dtype=np.int64).reshape(h.n_rows, h.n_codebooks)
    return h, CodeSeq(codes, h.config_id)


def achieved_kbps(payload_bytes: int, n_frames: int, token_rate: float = 25.0) -> float:
    """Rate from actual payload size (header excluded)."""
    return payload_bytes * 8 * token_rate / n_frames / 1000.0 if n_frames else 0.0


def describe(h: StreamHeader) -> dict:
    rate = bits_per_frame(h)
    return {"magic": MAGIC.decode(), "version": h.version, "config_id": h.config_id,
            "sample_rate": h.sample_rate, "channels": h.channels, "token_rate": h.token_rate,
            "n_frames": h.n_frames, "n_codebooks": h.n_codebooks, "codebook_size": h.codebook_size,
            "block_len": h.block_len, "duration_s": h.n_frames / h.token_rate,
            "bits_per_frame_exact": rate.exact, "bits_per_frame_packed": float(rate.packed),
            "payload_bytes": (payload_bits(h.n_rows, h.n_codebooks, h.codebook_size, h.block_len) + 7) // 8}

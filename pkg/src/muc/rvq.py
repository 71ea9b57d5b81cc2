"""Residual vector quantization with EMA codebooks and dead-entry reseeding."""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CONFIG_CUSTOM, CONFIG_LOW, CONFIG_HIGH = 0, 1, 2


@dataclass(frozen=True)
class RvqConfig:
    n_codebooks: int
    codebook_size: int
    dim: int
    ema_decay: float = 0.99
    reseed_threshold: float = 1e-5
    config_id: int = CONFIG_CUSTOM

    def __post_init__(self):
        if self.n_codebooks < 1:
            raise ValueError("n_codebooks must be >= 1")
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in (0, 1)")

    @classmethod
    def low(cls, dim: int, **kw) -> "RvqConfig":
        return cls(1, 16384, dim, config_id=CONFIG_LOW, **kw)

    @classmethod
    def high(cls, dim: int, **kw) -> "RvqConfig":
        return cls(4, 10000, dim, config_id=CONFIG_HIGH, **kw)

    @classmethod
    def preset(cls, name: str, dim: int, **kw) -> "RvqConfig":
        try:
            return {"low": cls.low, "high": cls.high}[name.lower()](dim, **kw)
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; expected low or high") from None


@dataclass
class CodeSeq:
    codes: np.ndarray  # (T, n_codebooks) int64
    config_id: int = CONFIG_CUSTOM

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.ndim != 2:
            raise ValueError(f"codes must be (T, n_codebooks), got shape {self.codes.shape}")

    def __len__(self) -> int:
        return self.codes.shape[0]

    def __eq__(self, other) -> bool:
        return (isinstance(other, CodeSeq) and self.config_id == other.config_id
                and np.array_equal(self.codes, other.codes))


class Codebooks:
    """Codewords plus the EMA statistics that produce them (codeword = embed_sum / cluster_size)."""

    def __init__(self, config: RvqConfig, codewords: np.ndarray | None = None,
                 cluster_size: np.ndarray | None = None):
        self.config = config
        shape = (config.n_codebooks, config.codebook_size, config.dim)
        self.codewords = np.zeros(shape) if codewords is None else np.array(codewords, dtype=np.float64)
        if self.codewords.shape != shape:
            raise ValueError(f"codewords shape {self.codewords.shape} != {shape}")
        self.cluster_size = (np.ones(shape[:2]) if cluster_size is None
                             else np.array(cluster_size, dtype=np.float64))
        self.embed_sum = self.codewords * self.cluster_size[..., None]
        self.recent: np.ndarray | None = None
        self.last_error = float("nan")

    def copy(self) -> "Codebooks":
        out = Codebooks(self.config, self.codewords, self.cluster_size)
        out.embed_sum = self.embed_sum.copy()
        out.recent = None if self.recent is None else self.recent.copy()
        return out


def _sq_dist_fast(r: np.ndarray, c: np.ndarray, c_sq: np.ndarray) -> np.ndarray:
    return (r * r).sum(1)[:, None] - 2.0 * (r @ c.T) + c_sq[None, :]


def nearest(r: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Index of the nearest row of ``c`` for each row of ``r`` (ties to lowest index).

    A matmul expansion shortlists candidates; near-ties are then settled by the
    exact squared distance ``((r - c) ** 2).sum()`` so results agree bit-for-bit
    with exhaustive search.
    """
    r = np.asarray(r, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    c_sq = (c * c).sum(1)
    out = np.empty(len(r), dtype=np.int64)
    chunk = max(1, (1 << 23) // max(len(c), 1))
    for s in range(0, len(r), chunk):
        rb = r[s:s + chunk]
        d = _sq_dist_fast(rb, c, c_sq)
        best = d.min(1)
        tol = 1e-9 * ((rb * rb).sum(1) + c_sq.max()) + 1e-300
        close = d <= (best + tol)[:, None]
        out[s:s + len(rb)] = np.argmax(close, axis=1)
        for i in np.flatnonzero(close.sum(1) > 1):
            cand = np.flatnonzero(close[i])
            out[s + i] = cand[np.argmin(((rb[i] - c[cand]) ** 2).sum(1))]
    return out


def quantize(features, books: Codebooks):
    """Greedy residual quantization.

    Returns ``(CodeSeq, dequantized, energies)`` where ``energies[k]`` is the mean
    squared norm per frame of the residual left after stage ``k``.
    """
    x = np.asarray(getattr(features, "frames", features), dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != books.config.dim:
        raise ValueError(f"feature dim {x.shape[-1]} != codebook dim {books.config.dim}")
    residual = x.copy()
    codes = np.zeros((len(x), books.config.n_codebooks), dtype=np.int64)
    energies = []
    for k in range(books.config.n_codebooks):
        idx = nearest(residual, books.codewords[k]) if len(x) else np.zeros(0, dtype=np.int64)
        codes[:, k] = idx
        residual = residual - books.codewords[k][idx]
        energies.append(float((residual ** 2).sum(1).mean()) if len(x) else 0.0)
    return CodeSeq(codes, books.config.config_id), dequantize(codes, books), energies


def dequantize(codes, books: Codebooks) -> np.ndarray:
    """Sum of addressed codewords per frame, accumulated stage by stage."""
    c = np.asarray(getattr(codes, "codes", codes), dtype=np.int64)
    cfg = books.config
    if c.ndim != 2 or c.shape[1] != cfg.n_codebooks:
        raise ValueError(f"codes shape {c.shape} does not match {cfg.n_codebooks} codebooks")
    if c.size and (c.min() < 0 or c.max() >= cfg.codebook_size):
        raise ValueError(f"code index outside [0, {cfg.codebook_size})")
    out = np.zeros((c.shape[0], cfg.dim))
    for k in range(cfg.n_codebooks):
        out = out + books.codewords[k][c[:, k]]
    return out


def ema_update(books: Codebooks, features) -> Codebooks:
    """One EMA step per stage on the residuals assigned by the current codewords."""
    x = np.asarray(getattr(features, "frames", features), dtype=np.float64)
    cfg = books.config
    g = cfg.ema_decay
    residual = x.copy()
    for k in range(cfg.n_codebooks):
        idx = nearest(residual, books.codewords[k])
        counts = np.bincount(idx, minlength=cfg.codebook_size).astype(np.float64)
        sums = np.zeros((cfg.codebook_size, cfg.dim))
        np.add.at(sums, idx, residual)
        used = counts > 0
        books.cluster_size[k] = g * books.cluster_size[k] + (1 - g) * counts
        books.embed_sum[k] = g * books.embed_sum[k] + (1 - g) * sums
        books.codewords[k][used] = books.embed_sum[k][used] / books.cluster_size[k][used][:, None]
        residual = residual - books.codewords[k][idx]
    books.recent = x.copy()
    books.last_error = float((residual ** 2).sum(1).mean()) if len(x) else 0.0
    return books


def reseed_dead(books: Codebooks, recent=None, threshold: float | None = None,
                rng: np.random.Generator | None = None) -> tuple[Codebooks, int]:
    """Move entries whose usage fraction is below ``threshold`` onto sampled recent residuals."""
    x = books.recent if recent is None else np.asarray(getattr(recent, "frames", recent), dtype=np.float64)
    if x is None or len(x) == 0:
        raise ValueError("no recent features cached for reseeding")
    threshold = books.config.reseed_threshold if threshold is None else threshold
    if not 0.0 <= threshold < 1.0:
        raise ValueError("threshold must be in [0, 1)")
    rng = rng or np.random.default_rng(0)
    total = 0
    residual = x.copy()
    for k in range(books.config.n_codebooks):
        n = books.cluster_size[k]
        frac = n / max(n.sum(), 1e-300)
        dead = np.flatnonzero(frac < threshold)
        if len(dead):
            pick = rng.choice(len(residual), len(dead), replace=len(dead) > len(residual))
            new = residual[pick].copy()
            if len(dead) > len(residual):
                new += rng.normal(0, 1e-3 * (residual.std() + 1e-12), new.shape)
            mean_n = n.sum() / len(n)
            books.codewords[k][dead] = new
            books.cluster_size[k][dead] = mean_n
            books.embed_sum[k][dead] = new * mean_n
            total += len(dead)
        residual = residual - books.codewords[k][nearest(residual, books.codewords[k])]
    return books, total


def kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator, batch: int = 256) -> np.ndarray:
    """Seeded D²-sampling, drawing ``batch`` centres per round; pads with jittered samples once exhausted."""
    x = np.asarray(x, dtype=np.float64)
    centres = [x[rng.integers(len(x))]]
    d2 = ((x - centres[0]) ** 2).sum(1)
    n = 1
    while n < k:
        total = d2.sum()
        if total <= 0:
            break
        m = min(batch, k - n, int((d2 > 0).sum()))
        pick = rng.choice(len(x), m, replace=False, p=d2 / total)
        new = x[pick]
        centres.append(new)
        n += m
        c_sq = (new * new).sum(1)
        d2 = np.minimum(d2, np.maximum(_sq_dist_fast(x, new, c_sq).min(1), 0.0))
        d2[pick] = 0.0
    out = np.concatenate([np.atleast_2d(c) for c in centres])[:k]
    if len(out) < k:
        extra = x[rng.integers(0, len(x), k - len(out))]
        extra = extra + rng.normal(0, 1e-3 * (x.std() + 1e-12), extra.shape)
        out = np.concatenate([out, extra])
    return out


def init_codebooks(config: RvqConfig, features, rng: np.random.Generator | None = None) -> Codebooks:
    """Stage-wise k-means++ seeding on the residuals of ``features``."""
    rng = rng or np.random.default_rng(0)
    x = np.asarray(getattr(features, "frames", features), dtype=np.float64)
    books = Codebooks(config)
    residual = x.copy()
    for k in range(config.n_codebooks):
        books.codewords[k] = kmeanspp(residual, config.codebook_size, rng)
        books.embed_sum[k] = books.codewords[k] * books.cluster_size[k][:, None]
        residual = residual - books.codewords[k][nearest(residual, books.codewords[k])]
    books.recent = x.copy()
    return books


def train(config: RvqConfig, features: np.ndarray, steps: int = 200, batch: int = 1024,
          reseed_every: int = 50, seed: int = 0, log=None) -> Codebooks:
    """Post-hoc EMA training on a pool of frozen features (rows)."""
    rng = np.random.default_rng(seed)
    x = np.asarray(features, dtype=np.float64)
    books = init_codebooks(config, x[rng.permutation(len(x))[:max(batch, config.codebook_size)]], rng)
    for step in range(steps):
        b = x[rng.integers(0, len(x), min(batch, len(x)))]
        ema_update(books, b)
        if reseed_every and (step + 1) % reseed_every == 0 and step + 1 < steps:
            reseed_dead(books, b, rng=rng)
        if log is not None:
            log({"step": step, "loss": books.last_error})
    return books


def codebook_stats(codes, config: RvqConfig) -> list[dict[str, float]]:
    """Utilization and perplexity per stage."""
    c = np.asarray(getattr(codes, "codes", codes), dtype=np.int64)
    if c.size == 0:
        raise ValueError("empty code sequence")
    stats = []
    for k in range(c.shape[1]):
        counts = np.bincount(c[:, k], minlength=config.codebook_size)
        p = counts[counts > 0] / counts.sum()
        stats.append({"utilization": float((counts > 0).sum() / config.codebook_size),
                      "perplexity": float(np.exp(-(p * np.log(p)).sum()))})
    return stats


def expected_utilization(n_draws: int, size: int) -> float:
    """Expected fraction of distinct entries among ``n_draws`` uniform draws."""
    return 1.0 - (1.0 - 1.0 / size) ** n_draws


# -- codebook file -----------------------------------------------------------
# magic "MUCB", u8 version, u8 config id, u16 n_codebooks, u32 size, u32 dim,
# f64 ema_decay, f64 reseed_threshold, f64 codewords, f64 cluster sizes,
# then a 32-byte SHA-256 of everything before it.

BOOK_MAGIC = b"MUCB"
_BOOK_HEAD = struct.Struct("<4sBBHIIdd")


class CodebookFileError(ValueError):
    pass


def save(path, books: Codebooks) -> None:
    cfg = books.config
    body = (_BOOK_HEAD.pack(BOOK_MAGIC, 1, cfg.config_id, cfg.n_codebooks, cfg.codebook_size, cfg.dim,
                            cfg.ema_decay, cfg.reseed_threshold)
            + books.codewords.astype("<f8").tobytes() + books.cluster_size.astype("<f8").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    os.replace(tmp, path)


def load(path) -> Codebooks:
    raw = Path(path).read_bytes()
    if len(raw) < _BOOK_HEAD.size + 32:
        raise CodebookFileError(f"{path}: truncated codebook file")
    body, digest = raw[:-32], raw[-32:]
    magic, version, cid, n_cb, size, dim, decay, thr = _BOOK_HEAD.unpack_from(body)
    if magic != BOOK_MAGIC or version != 1:
        raise CodebookFileError(f"{path}: not a version-1 codebook file")
    if hashlib.sha256(body).digest() != digest:
        raise CodebookFileError(f"{path}: checksum mismatch")
    cfg = RvqConfig(n_cb, size, dim, decay, thr, cid)
    n_words = n_cb * size * dim
    expect = _BOOK_HEAD.size + 8 * (n_words + n_cb * size)
    if len(body) != expect:
        raise CodebookFileError(f"{path}: payload length {len(body)} != {expect}")
    off = _BOOK_HEAD.size
    words = np.frombuffer(body, "<f8", n_words, off).reshape(n_cb, size, dim)
    usage = np.frombuffer(body, "<f8", n_cb * size, off + 8 * n_words).reshape(n_cb, size)
    return Codebooks(cfg, words, usage)

"""Synthetic music corpus with a recoverable "lyric" line, plus WAV-folder ingestion.

A clip mixes a harmonic vocal line, where each of 16 symbols is a distinct
pitch contour and two-formant vowel, over a looping chord progression.
The vocal line sits in the middle of the clip so that every training crop of
``segment_s`` seconds contains the whole transcript.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .dsp import AudioBuffer, resample
from .wavio import read_wav, write_wav

SYMBOLS = "abcdefghijklmnop"
N_SYMBOLS = len(SYMBOLS)
SCENARIOS = ("mixed", "vocal", "background")
SCENARIO_RATIO = (0.70, 0.15, 0.15)
MIN_DURATION, MAX_DURATION = 2.56, 35.84
DEFAULT_DURATION = 6.4
DEFAULT_SEGMENT = 5.12

# (F1, F2) in Hz for the four vowels
_VOWELS = ((800.0, 1200.0), (400.0, 2100.0), (300.0, 2600.0), (500.0, 850.0))
# semitone offset at note start and end for the four contours
_CONTOURS = ((0.0, 0.0), (-3.0, 4.0), (4.0, -3.0), (0.0, 7.0))
_PROGRESSIONS = (
    (0, 5, 7, 0),
    (0, 9, 5, 7),
    (0, 7, 9, 5),
    (0, 3, 8, 10),
)
_MAJOR, _MINOR = (0, 4, 7), (0, 3, 7)


@dataclass(frozen=True)
class ClipSpec:
    seed: int
    duration_s: float = DEFAULT_DURATION
    symbols: tuple[int, ...] = ()
    tempo: float = 125.0
    chord_pattern: int = 0
    vocal_gain: float = 0.5
    background_gain: float = 0.3
    sample_rate: int = 24000

    def __post_init__(self):
        if not MIN_DURATION <= self.duration_s <= MAX_DURATION:
            raise ValueError(f"duration {self.duration_s} outside [{MIN_DURATION}, {MAX_DURATION}] s")
        if any(not 0 <= s < N_SYMBOLS for s in self.symbols):
            raise ValueError("symbol outside the 16-symbol alphabet")
        if self.vocal_gain > 0 and not self.symbols:
            raise ValueError("a clip with vocals needs a non-empty symbol sequence")
        if self.tempo <= 0:
            raise ValueError("tempo must be positive")
        if self.vocal_gain > 0 and len(self.symbols) * self.beat > self.duration_s:
            raise ValueError(f"{len(self.symbols)} notes at {self.tempo} bpm do not fit in {self.duration_s} s")

    @property
    def beat(self) -> float:
        return 60.0 / self.tempo

    @property
    def transcript(self) -> str:
        return "".join(SYMBOLS[s] for s in self.symbols) if self.vocal_gain > 0 else ""


def encode_transcript(text: str) -> list[int]:
    bad = set(text) - set(SYMBOLS)
    if bad:
        raise ValueError(f"transcript has symbols outside the vocabulary: {sorted(bad)}")
    return [SYMBOLS.index(c) for c in text]


def symbol_timeline(spec: ClipSpec) -> list[tuple[float, float, int]]:
    """(start_s, end_s, symbol) of each sung note; empty for background-only clips."""
    if spec.vocal_gain <= 0:
        return []
    span = len(spec.symbols) * spec.beat
    start = (spec.duration_s - span) / 2
    return [(start + i * spec.beat, start + i * spec.beat + 0.75 * spec.beat, s)
            for i, s in enumerate(spec.symbols)]


def _envelope(n: int, sr: int, attack: float = 0.02, release: float = 0.04) -> np.ndarray:
    env = np.ones(n)
    a, r = min(int(attack * sr), n // 2), min(int(release * sr), n // 2)
    if a:
        env[:a] = 0.5 - 0.5 * np.cos(np.pi * np.arange(a) / a)
    if r:
        env[-r:] = 0.5 + 0.5 * np.cos(np.pi * np.arange(r) / r)
    return env


def _sing(symbol: int, f0: float, n: int, sr: int) -> np.ndarray:
    start_st, end_st = _CONTOURS[symbol // 4]
    f1, f2 = _VOWELS[symbol % 4]
    st = np.linspace(start_st, end_st, n)
    freq = f0 * 2.0 ** (st / 12.0)
    phase = 2 * np.pi * np.cumsum(freq) / sr
    out = np.zeros(n)
    for h in range(1, 40):
        fh = h * freq
        if fh.max() > 0.45 * sr:
            break
        amp = (np.exp(-0.5 * ((fh - f1) / 120.0) ** 2) + 0.7 * np.exp(-0.5 * ((fh - f2) / 160.0) ** 2)
               + 0.08 / h)
        out += amp * np.sin(h * phase)
    return out * _envelope(n, sr)


def _tone(freq: float, n: int, sr: int, harmonics: int = 4) -> np.ndarray:
    t = np.arange(n) / sr
    return sum(np.sin(2 * np.pi * freq * h * t) / h for h in range(1, harmonics + 1))


def render_stems(spec: ClipSpec) -> tuple[np.ndarray, np.ndarray]:
    """Unmixed (vocal, background) signals, each at unit peak (or silent)."""
    sr = spec.sample_rate
    n = int(round(spec.duration_s * sr))
    rng = np.random.default_rng(spec.seed)
    f0 = rng.uniform(180.0, 250.0)
    key = 110.0 * 2.0 ** (rng.integers(0, 7) / 12.0)
    vocal = np.zeros(n)
    for start, end, sym in symbol_timeline(spec):
        i0, i1 = int(round(start * sr)), int(round(end * sr))
        vocal[i0:i1] += _sing(sym, f0, i1 - i0, sr)

    background = np.zeros(n)
    chord_len = int(round(2 * spec.beat * sr))
    prog = _PROGRESSIONS[spec.chord_pattern % len(_PROGRESSIONS)]
    minor = spec.chord_pattern % 2 == 1
    for k, i0 in enumerate(range(0, n, chord_len)):
        m = min(chord_len, n - i0)
        root = key * 2.0 ** (prog[k % len(prog)] / 12.0)
        quality = _MINOR if minor and k % 2 == 0 else _MAJOR
        chord = sum(_tone(root * 2.0 ** (iv / 12.0), m, sr) for iv in quality) / 3
        chord += 0.8 * _tone(root / 2, m, sr, harmonics=3)
        background[i0:i0 + m] += chord * _envelope(m, sr, 0.01, 0.08)
    hit = int(0.05 * sr)
    for i0 in range(0, n - hit, int(round(spec.beat * sr))):
        background[i0:i0 + hit] += 0.3 * rng.standard_normal(hit) * np.exp(-np.arange(hit) / (0.01 * sr))
    # stems at unit peak so the gains set the mix balance
    return vocal / max(np.abs(vocal).max(), 1e-9), background / max(np.abs(background).max(), 1e-9)


def synth_clip(spec: ClipSpec) -> tuple[AudioBuffer, str]:
    vocal, background = render_stems(spec)
    mix = spec.vocal_gain * vocal + spec.background_gain * background
    peak = np.abs(mix).max()
    if peak > 0.95:
        mix *= 0.95 / peak
    return AudioBuffer(mix, spec.sample_rate, 1), spec.transcript


def random_clip_spec(seed: int, scenario: str = "mixed", duration_s: float = DEFAULT_DURATION,
                     segment_s: float = DEFAULT_SEGMENT, sample_rate: int = 24000) -> ClipSpec:
    """Draw a clip whose vocal line fits inside every ``segment_s`` crop of the clip."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    rng = np.random.default_rng([seed, 17])
    room = max(2 * min(segment_s, duration_s) - duration_s, 0.5)
    tempo = float(rng.uniform(125.0, 160.0))
    max_syms = max(1, min(8, int(room / (60.0 / tempo))))
    n_syms = int(rng.integers(max(1, max_syms // 2), max_syms + 1))
    symbols = tuple(int(s) for s in rng.integers(0, N_SYMBOLS, n_syms))
    vocal = 0.0 if scenario == "background" else float(rng.uniform(0.4, 0.6))
    background = 0.0 if scenario == "vocal" else float(rng.uniform(0.2, 0.4))
    return ClipSpec(seed=seed, duration_s=duration_s, symbols=symbols if vocal else (),
                    tempo=tempo, chord_pattern=int(rng.integers(0, len(_PROGRESSIONS))),
                    vocal_gain=vocal, background_gain=background, sample_rate=sample_rate)


@dataclass(frozen=True)
class ManifestRow:
    clip_id: str
    path: str
    split: str
    transcript: str


@dataclass
class CorpusManifest:
    root: Path
    rows: list[ManifestRow] = field(default_factory=list)

    def split(self, name: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == name]

    def write(self, path=None) -> Path:
        path = Path(path) if path else self.root / "manifest.tsv"
        lines = [f"{r.clip_id}\t{r.path}\t{r.split}\t{r.transcript}\n" for r in self.rows]
        path.write_text("".join(lines), encoding="utf-8")
        return path


def load_manifest(path) -> CorpusManifest:
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
        rows.append(ManifestRow(*parts))
    ids = [r.clip_id for r in rows]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate clip ids")
    for r in rows:
        if not (path.parent / r.path).is_file():
            raise FileNotFoundError(f"{path}: missing audio {r.path}")
    return CorpusManifest(path.parent, rows)


def scenario_plan(n: int, seed: int) -> list[str]:
    """Scenario per clip in fixed 70/15/15 proportion, order shuffled by ``seed``."""
    n_vocal = round(n * SCENARIO_RATIO[1])
    n_bg = round(n * SCENARIO_RATIO[2])
    plan = ["vocal"] * n_vocal + ["background"] * n_bg
    plan = ["mixed"] * (n - len(plan)) + plan
    order = np.random.default_rng([seed, 3]).permutation(n)
    return [plan[i] for i in order]


def build_corpus(out_dir, n_train: int, n_dev: int, n_test: int, seed: int,
                 duration_s: float = DEFAULT_DURATION, segment_s: float = DEFAULT_SEGMENT,
                 sample_rate: int = 24000) -> CorpusManifest:
    """Render clips to ``out_dir/clips`` and write ``out_dir/manifest.tsv``."""
    if min(n_train, n_dev, n_test) < 1:
        raise ValueError("every split needs at least one clip")
    out_dir = Path(out_dir)
    try:
        (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write corpus to {out_dir}: {exc}") from exc
    n = n_train + n_dev + n_test
    splits = ["train"] * n_train + ["dev"] * n_dev + ["test"] * n_test
    scenarios = scenario_plan(n, seed)
    manifest = CorpusManifest(out_dir)
    for i in range(n):
        clip_id = f"clip{i:04d}"
        spec = random_clip_spec(seed * 100003 + i, scenarios[i], duration_s, segment_s, sample_rate)
        audio, transcript = synth_clip(spec)
        rel = f"clips/{clip_id}.wav"
        write_wav(out_dir / rel, audio, encoding="pcm16")
        manifest.rows.append(ManifestRow(clip_id, rel, splits[i], transcript))
    manifest.write()
    return manifest


def manifest_from_folder(folder, seed: int = 0, dev_frac: float = 0.1, test_frac: float = 0.1) -> CorpusManifest:
    """Index a folder of WAV files; a ``<name>.txt`` beside a WAV supplies its transcript."""
    folder = Path(folder)
    wavs = sorted(folder.rglob("*.wav"))
    if not wavs:
        raise ValueError(f"no WAV files under {folder}")
    order = np.random.default_rng(seed).permutation(len(wavs))
    n_dev = max(1, int(len(wavs) * dev_frac)) if len(wavs) > 2 else 0
    n_test = max(1, int(len(wavs) * test_frac)) if len(wavs) > 2 else 0
    manifest = CorpusManifest(folder)
    for rank, i in enumerate(order):
        wav = wavs[i]
        split = "dev" if rank < n_dev else "test" if rank < n_dev + n_test else "train"
        txt = wav.with_suffix(".txt")
        transcript = txt.read_text(encoding="utf-8").strip() if txt.exists() else ""
        encode_transcript(transcript)
        manifest.rows.append(ManifestRow(wav.stem, str(wav.relative_to(folder)), split, transcript))
    return manifest


def _load_audio(manifest: CorpusManifest, row: ManifestRow, sample_rate: int) -> np.ndarray:
    audio = read_wav(manifest.root / row.path)
    if audio.sample_rate != sample_rate:
        audio = resample(audio, sample_rate)
    return audio.mono()


def load_batches(manifest: CorpusManifest, split: str, batch_size: int, segment_s: float,
                 seed: int = 0, sample_rate: int = 24000, epochs: int = 1
                 ) -> Iterator[tuple[np.ndarray, list[str]]]:
    """Yield ``(segments[batch, samples], transcripts)``.

    Train crops are random (seeded) and clips are reshuffled every epoch;
    dev/test crops are centred and ordered. Only full batches are yielded.
    """
    rows = manifest.split(split)
    if not rows:
        raise ValueError(f"split {split!r} is empty")
    seg = int(round(segment_s * sample_rate))
    cache = {r.clip_id: _load_audio(manifest, r, sample_rate) for r in rows}
    for r in rows:
        if len(cache[r.clip_id]) < seg:
            raise ValueError(f"{r.clip_id}: shorter than segment of {segment_s} s")
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(rows)) if split == "train" else np.arange(len(rows))
        for b in range(len(order) // batch_size):
            batch, texts = [], []
            for i in order[b * batch_size:(b + 1) * batch_size]:
                x = cache[rows[i].clip_id]
                slack = len(x) - seg
                off = int(rng.integers(0, slack + 1)) if split == "train" else slack // 2
                batch.append(x[off:off + seg])
                texts.append(rows[i].transcript)
            yield np.stack(batch), texts


def count_onsets(x: np.ndarray, sample_rate: int, frame_s: float = 0.01, rel_threshold: float = 0.1) -> int:
    """Number of rising crossings of a frame-energy envelope above ``rel_threshold`` of its peak."""
    hop = max(1, int(frame_s * sample_rate))
    n = len(x) // hop
    energy = np.sqrt((x[:n * hop].reshape(n, hop) ** 2).mean(axis=1))
    if energy.max() == 0:
        return 0
    active = energy > rel_threshold * energy.max()
    return int(np.sum(active[1:] & ~active[:-1]) + active[0])


def segment_token_labels(spec: ClipSpec, offset_s: float, n_tokens: int, token_rate: float = 25.0) -> np.ndarray:
    """Per-token symbol label for a crop starting at ``offset_s``; ``N_SYMBOLS`` marks no symbol."""
    labels = np.full(n_tokens, N_SYMBOLS, dtype=np.int64)
    centers = offset_s + (np.arange(n_tokens) + 0.5) / token_rate
    for start, end, sym in symbol_timeline(spec):
        labels[(centers >= start) & (centers < end)] = sym
    return labels


def vocabulary_file(path) -> None:
    """One symbol per line; the CTC blank is implicit at index ``N_SYMBOLS``."""
    Path(path).write_text("\n".join(SYMBOLS) + "\n", encoding="utf-8")


__all__ = [
    "SCENARIOS", "ClipSpec", "CorpusManifest", "ManifestRow", "SYMBOLS", "N_SYMBOLS", "build_corpus",
    "load_batches", "load_manifest", "manifest_from_folder", "random_clip_spec", "render_stems",
    "synth_clip", "symbol_timeline", "count_onsets", "segment_token_labels", "encode_transcript",
]

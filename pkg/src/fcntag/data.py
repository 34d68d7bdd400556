"""Dataset manifests, tag vocabularies and the synthetic tagging corpus.

Manifest CSV columns are ``clip_id,path,split,tags`` with ``|``-separated
tags.  Relative paths resolve against the manifest's directory.

The synthetic corpus has eight tags with known audio correlates:

========== =====================================================
tone_1k     a steady sinusoid at 1.15-1.5 kHz
tone_2k     a sinusoid at 2.15-2.5 kHz gated on and off at 6 Hz
tone_3k     a sinusoid at 3.15-3.5 kHz with 5 Hz, +-120 Hz vibrato
tone_4k     a two-note dyad at 4.15-4.5 kHz and 350 Hz above
am_slow     whole-mix amplitude modulation at 3 Hz
am_fast     whole-mix amplitude modulation at 12 Hz
noise       band-limited noise in 5.0-5.9 kHz
harmonic    f0 in 110-180 Hz with four overtones (all below 1 kHz)
========== =====================================================

Every clip also carries a quiet white-noise bed so that modulation is
audible even when no other tag is active.
"""

from __future__ import annotations

import csv
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FcnError, InvalidInputError
from .frontend import AudioClip, FeatureMatrix, FrontendConfig, mel_filterbank
from .metrics import roc_auc

SPLITS = ("train", "valid", "test")

SYNTH_TAGS = ("tone_1k", "tone_2k", "tone_3k", "tone_4k", "am_slow", "am_fast", "noise", "harmonic")
AM_RATES = {"am_slow": 3.0, "am_fast": 12.0}
AM_DEPTH = 0.9
NOISE_BAND = (5000.0, 5900.0)


@dataclass(frozen=True)
class ManifestEntry:
    clip_id: str
    path: str
    split: str
    tags: tuple[str, ...] = ()


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.clip_id in seen:
                raise InvalidInputError(f"duplicate clip_id {e.clip_id!r}")
            if e.split not in SPLITS:
                raise InvalidInputError(f"clip {e.clip_id!r} has unknown split {e.split!r}")
            seen.add(e.clip_id)

    def __len__(self) -> int:
        return len(self.entries)

    def split(self, name: str) -> list[ManifestEntry]:
        if name not in SPLITS:
            raise ContractError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [e for e in self.entries if e.split == name]

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p


def read_manifest(path) -> Manifest:
    path = Path(path)
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"clip_id", "path", "split", "tags"} - set(reader.fieldnames or [])
        if missing:
            raise InvalidInputError(f"{path}: manifest lacks columns {sorted(missing)}")
        for row in reader:
            tags = tuple(t for t in (row["tags"] or "").split("|") if t)
            entries.append(ManifestEntry(row["clip_id"], row["path"], row["split"].strip(), tags))
    return Manifest(entries, path.parent)


def write_manifest(path, manifest: Manifest) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id", "path", "split", "tags"])
        for e in manifest.entries:
            w.writerow([e.clip_id, e.path, e.split, "|".join(e.tags)])


@dataclass(frozen=True)
class TagVocabulary:
    tags: tuple[str, ...]
    counts: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.tags)

    def index(self, tag: str) -> int:
        return self.tags.index(tag)


def build_vocab(manifest: Manifest, k: int) -> TagVocabulary:
    """Top-k tags by training-split frequency; ties broken alphabetically."""
    train = manifest.split("train")
    if not train:
        raise ContractError("training split is empty")
    counts = Counter(t for e in train for t in set(e.tags))
    if len(counts) < k:
        raise ContractError(f"requested {k} tags but the training split has only {len(counts)}")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    return TagVocabulary(tuple(t for t, _ in ranked), tuple(c for _, c in ranked))


def label_matrix(manifest: Manifest, vocab: TagVocabulary, split: str,
                 drop_untagged: bool = False) -> tuple[np.ndarray, list[str]]:
    """Binary N x K matrix for one split, plus the clip ids of its rows.

    ``drop_untagged`` removes clips carrying none of the vocabulary tags.
    """
    entries = manifest.split(split)
    col = {t: j for j, t in enumerate(vocab.tags)}
    rows, ids = [], []
    for e in entries:
        row = np.zeros(len(vocab), dtype=np.float32)
        for t in e.tags:
            if t in col:
                row[col[t]] = 1.0
        if drop_untagged and not row.any():
            continue
        rows.append(row)
        ids.append(e.clip_id)
    y = np.stack(rows) if rows else np.zeros((0, len(vocab)), dtype=np.float32)
    return y, ids


def unique_label_rows(y: np.ndarray) -> int:
    return int(np.unique(np.asarray(y, dtype=np.uint8), axis=0).shape[0]) if len(y) else 0


# ---------------------------------------------------------------- synthetic corpus

@dataclass(frozen=True)
class SynthConfig:
    n_clips: int = 1000
    duration_s: float = 5.5
    sample_rate: int = 16000
    seed: int = 0
    tag_prob: float = 0.35
    bed_level: float = 0.01
    noise_level: float = 0.05

    def __post_init__(self):
        if self.n_clips < 1 or self.duration_s <= 0 or self.sample_rate <= 0:
            raise InvalidInputError("synthetic config needs positive sizes")
        if not 0.2 <= self.tag_prob <= 0.5:
            raise InvalidInputError(f"tag probability must lie in [0.2, 0.5], got {self.tag_prob}")
        if self.sample_rate < 12000:
            raise InvalidInputError("synthetic audio needs at least 12 kHz to hold the 5-6 kHz noise band")


def synth_split(index: int, n_clips: int) -> str:
    """70/10/20 by clip index."""
    frac = index / n_clips
    return "train" if frac < 0.7 else ("valid" if frac < 0.8 else "test")


def _band_noise(rng: np.random.Generator, n: int, rate: int, lo: float, hi: float) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / rate)
    spec[(f < lo) | (f > hi)] = 0.0
    x = np.fft.irfft(spec, n)
    return x / (np.std(x) + 1e-12)


PULSE_RATE = 6.0
VIBRATO = (5.0, 120.0)
DYAD_STEP = 350.0


def _tone_texture(k: int, freq: float, phase: float, t: np.ndarray) -> np.ndarray:
    """Unit-amplitude tone whose local pattern differs between the four bands."""
    if k == 1:
        return np.sin(2 * np.pi * freq * t + phase)
    if k == 2:
        # 6 Hz on/off gating with ~7 ms ramps to avoid broadband clicks
        gate = np.clip(4.0 * np.sin(2 * np.pi * PULSE_RATE * t + phase), 0.0, 1.0)
        return gate * np.sin(2 * np.pi * freq * t)
    if k == 3:
        rate, depth = VIBRATO
        inst = 2 * np.pi * freq * t - (depth / rate) * np.cos(2 * np.pi * rate * t)
        return np.sin(inst + phase)
    return (np.sin(2 * np.pi * freq * t + phase) + np.sin(2 * np.pi * (freq + DYAD_STEP) * t)) / np.sqrt(2)


def synth_clip(cfg: SynthConfig, index: int, tags: dict[str, bool] | None = None):
    """Audio and tag vector of clip ``index``; a pure function of (seed, index, tags).

    Passing ``tags`` overrides the randomly drawn tag vector.
    """
    rng = np.random.default_rng([cfg.seed, index])
    drawn = rng.random(len(SYNTH_TAGS)) < cfg.tag_prob
    active = dict(zip(SYNTH_TAGS, drawn.tolist()))
    if tags is not None:
        active = {t: bool(tags.get(t, False)) for t in SYNTH_TAGS}
    sr = cfg.sample_rate
    n = int(round(cfg.duration_s * sr))
    t = np.arange(n) / sr
    x = cfg.bed_level * rng.standard_normal(n)
    # draw every random parameter whether or not the tag is active so that
    # one tag's state never shifts another tag's randomness
    for k in range(1, 5):
        freq = 1000.0 * (k + rng.uniform(0.15, 0.5))
        amp = rng.uniform(0.08, 0.15)
        phase = rng.uniform(0, 2 * np.pi)
        if active[f"tone_{k}k"]:
            x += amp * _tone_texture(k, freq, phase, t)
    f0 = rng.uniform(110.0, 180.0)
    phases = rng.uniform(0, 2 * np.pi, 5)
    if active["harmonic"]:
        for h in range(1, 6):
            x += (0.08 / h) * np.sin(2 * np.pi * h * f0 * t + phases[h - 1])
    noise = _band_noise(rng, n, sr, *NOISE_BAND)
    if active["noise"]:
        x += cfg.noise_level * noise
    for name, rate in AM_RATES.items():
        phase = rng.uniform(0, 2 * np.pi)
        if active[name]:
            x *= 1.0 - AM_DEPTH * (0.5 - 0.5 * np.cos(2 * np.pi * rate * t + phase))
    x = np.clip(0.9 * x, -1.0, 1.0)
    return AudioClip(x, sr), tuple(tag for tag in SYNTH_TAGS if active[tag])


def _write_synth_clip(args) -> tuple[int, tuple[str, ...]]:
    cfg, index, path = args
    from .io import write_wav

    clip, tags = synth_clip(cfg, index)
    try:
        write_wav(path, clip)
    except OSError as exc:
        raise FcnError(f"{path}: cannot write synthetic clip ({exc})") from exc
    return index, tags


def synth_generate(cfg: SynthConfig, out_dir, workers: int | None = None) -> Manifest:
    """Write ``cfg.n_clips`` WAV files plus ``manifest.csv`` under ``out_dir``."""
    out = Path(out_dir)
    audio = out / "audio"
    try:
        audio.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise FcnError(f"{audio}: cannot create directory ({exc})") from exc
    jobs = [(cfg, i, audio / f"clip{i:05d}.wav") for i in range(cfg.n_clips)]
    workers = workers or int(os.environ.get("FCN_NUM_WORKERS", "1"))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_write_synth_clip, jobs, chunksize=16))
    else:
        results = [_write_synth_clip(j) for j in jobs]
    entries = [
        ManifestEntry(f"clip{i:05d}", f"audio/clip{i:05d}.wav", synth_split(i, cfg.n_clips), tags)
        for i, tags in results
    ]
    manifest = Manifest(entries, out)
    write_manifest(out / "manifest.csv", manifest)
    return manifest


def synth_vocab() -> TagVocabulary:
    """The fixed synthetic vocabulary in its documented order."""
    return TagVocabulary(SYNTH_TAGS, tuple(0 for _ in SYNTH_TAGS))


# ---------------------------------------------------------------- reference detector

def detector_scores(fm: FeatureMatrix, cfg: FrontendConfig) -> np.ndarray:
    """Hand-coded per-tag scores from a log-mel matrix, in SYNTH_TAGS order.

    Tone, noise and harmonic tags use mean log energy in their frequency
    region; modulation tags use the share of envelope-spectrum energy near
    their modulation rate.
    """
    logmel = fm.data.astype(np.float64)
    centers = mel_filterbank(cfg).center_freqs
    band_mean = logmel.mean(axis=1)

    def region(lo, hi):
        sel = (centers >= lo) & (centers <= hi)
        return float(band_mean[sel].max())

    scores = [region(1000.0 * k + 100, 1000.0 * k + 900) for k in range(1, 5)]
    env = np.log(np.exp(logmel).sum(axis=0))
    env = env - env.mean()
    power = np.abs(np.fft.rfft(env * np.hanning(env.size))) ** 2
    frame_rate = cfg.target_rate / cfg.hop
    mod_f = np.fft.rfftfreq(env.size, 1.0 / frame_rate)
    total = power[mod_f > 0.5].sum() + 1e-12
    for name in ("am_slow", "am_fast"):
        rate = AM_RATES[name]
        scores.append(float(power[np.abs(mod_f - rate) <= 0.6].sum() / total))
    scores.append(region(NOISE_BAND[0] + 100, NOISE_BAND[1] - 100))
    scores.append(region(100.0, 950.0))
    return np.asarray(scores)


def detector_aucs(features: list[FeatureMatrix], labels: np.ndarray, cfg: FrontendConfig) -> list[float]:
    scores = np.stack([detector_scores(fm, cfg) for fm in features])
    return [roc_auc(scores[:, k], labels[:, k]) for k in range(labels.shape[1])]

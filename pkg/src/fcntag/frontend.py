"""Audio to time-frequency features.

Pipeline: resample to the target rate, pad or trim to exactly
``n_frames * hop`` samples, then compute one of

* log-magnitude STFT (``n_fft // 2 + 1`` bands),
* log mel spectrogram (``n_mels`` bands, power spectrum through a
  triangular HTK-mel filterbank),
* stacked MFCCs with first and second deltas (``3 * n_mfcc`` rows).

All functions are pure; the same clip and config always give bit-identical
output.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sp_fft
from scipy import signal as sp_signal

from .errors import ContractError, InvalidConfigError, InvalidInputError, UnsupportedDirectionError

LOG_FLOOR = 1e-10
DELTA_HALF_WIDTH = 4  # 9-point regression window


class FeatureKind(enum.IntEnum):
    LOG_MEL = 0
    LOG_STFT = 1
    MFCC_STACK = 2

    @classmethod
    def parse(cls, value) -> "FeatureKind":
        if isinstance(value, FeatureKind):
            return value
        if isinstance(value, int):
            return cls(value)
        aliases = {"mel": cls.LOG_MEL, "stft": cls.LOG_STFT, "mfcc": cls.MFCC_STACK}
        key = str(value).strip()
        if key.lower() in aliases:
            return aliases[key.lower()]
        try:
            return cls[key.upper()]
        except KeyError:
            raise InvalidConfigError(f"unknown feature kind {value!r}") from None

    @property
    def short(self) -> str:
        return {0: "mel", 1: "stft", 2: "mfcc"}[int(self)]


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size == 0:
            raise InvalidInputError("audio clip has no samples")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInputError("audio clip contains NaN or infinite samples")
        if int(self.sample_rate) <= 0:
            raise InvalidInputError(f"sample rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class FrontendConfig:
    target_rate: int = 12000
    n_fft: int = 256
    hop: int = 256
    n_frames: int = 1366
    n_mels: int = 96
    n_mfcc: int = 30
    fmin: float = 0.0
    fmax: float | None = None

    def __post_init__(self):
        if self.fmax is None:
            object.__setattr__(self, "fmax", self.target_rate / 2)
        object.__setattr__(self, "fmin", float(self.fmin))
        object.__setattr__(self, "fmax", float(self.fmax))
        self.validate()

    def validate(self) -> None:
        if min(self.target_rate, self.n_fft, self.hop, self.n_frames, self.n_mels, self.n_mfcc) <= 0:
            raise InvalidConfigError("all frontend sizes must be positive")
        if self.hop > self.n_fft:
            raise InvalidConfigError(f"hop {self.hop} exceeds n_fft {self.n_fft}")
        if self.n_mels > self.n_bins:
            raise InvalidConfigError(f"n_mels {self.n_mels} exceeds {self.n_bins} STFT bins")
        if self.n_mfcc > self.n_mels:
            raise InvalidConfigError(f"n_mfcc {self.n_mfcc} exceeds n_mels {self.n_mels}")
        if not (0.0 <= self.fmin < self.fmax <= self.target_rate / 2):
            raise InvalidConfigError(
                f"need 0 <= fmin < fmax <= {self.target_rate / 2}, got {self.fmin}, {self.fmax}")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def n_samples(self) -> int:
        return self.n_frames * self.hop

    def bands(self, kind) -> int:
        kind = FeatureKind.parse(kind)
        if kind is FeatureKind.LOG_MEL:
            return self.n_mels
        if kind is FeatureKind.LOG_STFT:
            return self.n_bins
        return 3 * self.n_mfcc

    def canonical(self) -> str:
        return ";".join(f"{f.name}={getattr(self, f.name)!r}" for f in dataclasses.fields(self))

    def digest(self) -> bytes:
        """8-byte digest identifying the configuration."""
        return hashlib.blake2b(self.canonical().encode(), digest_size=8).digest()

    def replace(self, **changes) -> "FrontendConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class FeatureMatrix:
    data: np.ndarray
    kind: FeatureKind
    config_hash: bytes = b"\0" * 8
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.kind = FeatureKind.parse(self.kind)
        if self.data.ndim != 2:
            raise InvalidInputError(f"feature matrix must be 2-d, got shape {self.data.shape}")
        if len(self.config_hash) != 8:
            raise InvalidInputError("config_hash must be 8 bytes")
        if not np.all(np.isfinite(self.data)):
            raise InvalidInputError("feature matrix contains non-finite entries")

    @property
    def band_count(self) -> int:
        return self.data.shape[0]

    @property
    def frame_count(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray
    center_freqs: np.ndarray


# ---------------------------------------------------------------- resampling

def _kaiser_lowpass(cutoff: float, transition: float, rate: float, atten_db: float = 80.0) -> np.ndarray:
    """Odd-length windowed-sinc low-pass; ``cutoff`` and ``transition`` in Hz."""
    beta = 0.1102 * (atten_db - 8.7)
    dw = 2 * math.pi * transition / rate
    n = int(math.ceil((atten_db - 7.95) / (2.285 * dw))) + 1
    n += 1 - n % 2
    mid = (n - 1) / 2
    t = np.arange(n) - mid
    fc = cutoff / rate
    h = 2 * fc * np.sinc(2 * fc * t) * np.kaiser(n, beta)
    return h / h.sum()


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Polyphase windowed-sinc downsampling to ``target_rate``.

    The anti-aliasing low-pass has its passband edge at 90% of the new
    Nyquist frequency and at least 80 dB rejection from the new Nyquist
    frequency upwards.  Output length is ``round(len * target / source)``.
    """
    if not isinstance(clip, AudioClip) or len(clip) == 0:
        raise InvalidInputError("resample needs a non-empty AudioClip")
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise InvalidInputError(f"target rate must be positive, got {target_rate}")
    src = clip.sample_rate
    if target_rate > src:
        raise UnsupportedDirectionError(f"upsampling {src} Hz -> {target_rate} Hz is not supported")
    n_out = int(math.floor(len(clip) * target_rate / src + 0.5))
    if target_rate == src:
        return AudioClip(clip.samples.copy(), src)
    g = math.gcd(src, target_rate)
    up, down = target_rate // g, src // g
    nyq = target_rate / 2
    h = _kaiser_lowpass(0.95 * nyq, 0.1 * nyq, src * up) * up
    delay = (len(h) - 1) // 2
    lead = (-delay) % down
    h = np.concatenate([np.zeros(lead), h])
    offset = (delay + lead) // down
    y = sp_signal.upfirdn(h, clip.samples, up, down)
    if y.size < offset + n_out:
        y = np.concatenate([y, np.zeros(offset + n_out - y.size)])
    return AudioClip(y[offset:offset + n_out], target_rate)


def pad_or_trim(clip: AudioClip, cfg: FrontendConfig) -> AudioClip:
    """Zero-pad or truncate at the end to exactly ``cfg.n_frames * cfg.hop`` samples."""
    if clip.sample_rate != cfg.target_rate:
        raise ContractError(f"clip is at {clip.sample_rate} Hz, config expects {cfg.target_rate} Hz")
    n = cfg.n_samples
    x = clip.samples
    if x.size >= n:
        return AudioClip(x[:n].copy(), clip.sample_rate)
    out = np.zeros(n)
    out[: x.size] = x
    return AudioClip(out, clip.sample_rate)


def prepare(clip: AudioClip, cfg: FrontendConfig) -> AudioClip:
    """Resample (if needed) and pad/trim a clip for feature extraction."""
    if clip.sample_rate != cfg.target_rate:
        clip = resample(clip, cfg.target_rate)
    return pad_or_trim(clip, cfg)


# ---------------------------------------------------------------- spectra

def _check_ready(clip: AudioClip, cfg: FrontendConfig) -> None:
    if clip.sample_rate != cfg.target_rate or len(clip) != cfg.n_samples:
        raise ContractError(
            f"clip ({len(clip)} samples @ {clip.sample_rate} Hz) is not prepared for "
            f"{cfg.n_samples} samples @ {cfg.target_rate} Hz; call prepare() first")


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window of length n."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def magnitude_spectrogram(clip: AudioClip, cfg: FrontendConfig) -> np.ndarray:
    """|STFT| as an (n_fft/2+1) × n_frames float64 array."""
    _check_ready(clip, cfg)
    x = np.concatenate([clip.samples, np.zeros(cfg.n_fft)])
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.n_fft)[:: cfg.hop][: cfg.n_frames]
    spec = np.fft.rfft(frames * hann_window(cfg.n_fft), axis=1)
    return np.abs(spec).T


def stft_log(clip: AudioClip, cfg: FrontendConfig) -> FeatureMatrix:
    mag = magnitude_spectrogram(clip, cfg)
    return FeatureMatrix(np.log(mag + LOG_FLOOR), FeatureKind.LOG_STFT, cfg.digest())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def bin_frequencies(cfg: FrontendConfig) -> np.ndarray:
    return np.arange(cfg.n_bins) * cfg.target_rate / cfg.n_fft


def mel_filterbank(cfg: FrontendConfig) -> MelFilterbank:
    """Triangular filters centred uniformly on the HTK mel scale.

    Each triangle rises from the previous centre and falls to the next one.
    Where that span is narrower than the STFT bin spacing, the half-widths
    are widened to one bin spacing so that no filter is empty.  Rows are
    normalised to sum to 1.
    """
    if cfg.n_mels > cfg.n_bins:
        raise InvalidConfigError(f"n_mels {cfg.n_mels} exceeds {cfg.n_bins} STFT bins")
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    centers = edges[1:-1]
    freqs = bin_frequencies(cfg)
    spacing = cfg.target_rate / cfg.n_fft
    lower = np.minimum(edges[:-2], centers - spacing)
    upper = np.maximum(edges[2:], centers + spacing)
    up = (freqs[None, :] - lower[:, None]) / (centers - lower)[:, None]
    dn = (upper[:, None] - freqs[None, :]) / (upper - centers)[:, None]
    w = np.clip(np.minimum(up, dn), 0.0, None)
    w /= w.sum(axis=1, keepdims=True)
    return MelFilterbank(w, centers)


def mel_power(clip: AudioClip, cfg: FrontendConfig) -> np.ndarray:
    mag = magnitude_spectrogram(clip, cfg)
    return mel_filterbank(cfg).weights @ (mag * mag)


def melspectrogram_log(clip: AudioClip, cfg: FrontendConfig) -> FeatureMatrix:
    return FeatureMatrix(np.log(mel_power(clip, cfg) + LOG_FLOOR), FeatureKind.LOG_MEL, cfg.digest())


def deltas(coeffs: np.ndarray, half_width: int = DELTA_HALF_WIDTH) -> np.ndarray:
    """Regression deltas along the last axis with edge-frame replication."""
    n = half_width
    padded = np.pad(coeffs, [(0, 0)] * (coeffs.ndim - 1) + [(n, n)], mode="edge")
    t = coeffs.shape[-1]
    out = np.zeros(coeffs.shape, dtype=np.float64)
    for k in range(1, n + 1):
        out += k * (padded[..., n + k:n + k + t] - padded[..., n - k:n - k + t])
    return out / (2 * sum(k * k for k in range(1, n + 1)))


def mfcc_from_logmel(logmel: np.ndarray, n_mfcc: int) -> np.ndarray:
    """Orthonormal DCT-II over the band axis, first ``n_mfcc`` coefficients, plus deltas."""
    c = sp_fft.dct(logmel, type=2, norm="ortho", axis=0)[:n_mfcc]
    d1 = deltas(c)
    d2 = deltas(d1)
    return np.concatenate([c, d1, d2], axis=0)


def mfcc_stack(clip: AudioClip, cfg: FrontendConfig) -> FeatureMatrix:
    logmel = np.log(mel_power(clip, cfg) + LOG_FLOOR)
    return FeatureMatrix(mfcc_from_logmel(logmel, cfg.n_mfcc), FeatureKind.MFCC_STACK, cfg.digest())


def extract(clip: AudioClip, cfg: FrontendConfig, kind) -> FeatureMatrix:
    """Full pipeline: prepare the clip, then compute features of ``kind``."""
    kind = FeatureKind.parse(kind)
    clip = prepare(clip, cfg)
    fn = {FeatureKind.LOG_MEL: melspectrogram_log, FeatureKind.LOG_STFT: stft_log,
          FeatureKind.MFCC_STACK: mfcc_stack}[kind]
    return fn(clip, cfg)

"""WAV reading/writing and the binary feature-file format.

Feature file layout (little-endian)::

    "FCNF" | u16 version=1 | u8 kind | u32 bands | u32 frames | 8-byte config hash
    | bands*frames float32, band-major
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import InvalidInputError
from .frontend import AudioClip, FeatureKind, FeatureMatrix

FEATURE_MAGIC = b"FCNF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sHBII8s")


def read_wav(path) -> AudioClip:
    """Read 16-bit PCM or 32-bit float WAV; stereo is averaged to mono."""
    try:
        rate, data = wavfile.read(os.fspath(path))
    except (OSError, ValueError) as exc:
        raise InvalidInputError(f"{path}: cannot read WAV ({exc})") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise InvalidInputError(f"{path}: unsupported sample format {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    return AudioClip(x, rate)


def write_wav(path, clip: AudioClip) -> None:
    """Write 16-bit PCM with the same 1/32768 scale that :func:`read_wav` uses."""
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(os.fspath(path), clip.sample_rate, pcm)


def write_features(path, fm: FeatureMatrix) -> None:
    bands, frames = fm.data.shape
    header = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, int(fm.kind), bands, frames, fm.config_hash)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(fm.data.astype("<f4", copy=False).tobytes(order="C"))
    os.replace(tmp, path)


def read_features(path) -> FeatureMatrix:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise InvalidInputError(f"{path}: truncated feature header")
    magic, version, kind, bands, frames, digest = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise InvalidInputError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise InvalidInputError(f"{path}: unsupported feature version {version}")
    body = raw[_HEADER.size:]
    if len(body) != 4 * bands * frames:
        raise InvalidInputError(f"{path}: expected {bands}x{frames} floats, found {len(body) // 4}")
    data = np.frombuffer(body, dtype="<f4").reshape(bands, frames).astype(np.float32)
    return FeatureMatrix(data, FeatureKind(kind), digest)


def read_feature_header(path) -> tuple[FeatureKind, int, int, bytes]:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise InvalidInputError(f"{path}: truncated feature header")
    magic, version, kind, bands, frames, digest = _HEADER.unpack(raw)
    if magic != FEATURE_MAGIC or version != FEATURE_VERSION:
        raise InvalidInputError(f"{path}: not a feature file")
    return FeatureKind(kind), bands, frames, digest

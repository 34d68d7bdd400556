import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fcntag.errors import ContractError, InvalidConfigError, InvalidInputError, UnsupportedDirectionError
from fcntag.frontend import (AudioClip, FeatureKind, FrontendConfig, bin_frequencies, deltas, extract,
                             hz_to_mel, mel_filterbank, mel_to_hz, mfcc_from_logmel, pad_or_trim,
                             prepare, resample, stft_log)
from fcntag.metrics import bins_per_khz

SMALL = FrontendConfig(n_frames=64)


def sine(freq, rate=12000, seconds=1.5, amp=0.5):
    t = np.arange(int(rate * seconds)) / rate
    return AudioClip(amp * np.sin(2 * np.pi * freq * t), rate)


def test_config_defaults_and_validation():
    cfg = FrontendConfig()
    assert (cfg.target_rate, cfg.n_fft, cfg.hop, cfg.n_frames, cfg.n_mels, cfg.n_mfcc) == \
        (12000, 256, 256, 1366, 96, 30)
    assert cfg.fmax == 6000.0 and cfg.n_bins == 129
    assert [cfg.bands(k) for k in ("mel", "stft", "mfcc")] == [96, 129, 90]
    with pytest.raises(InvalidConfigError):
        FrontendConfig(n_mels=200)
    with pytest.raises(InvalidConfigError):
        FrontendConfig(fmin=7000.0)
    assert FrontendConfig().digest() != FrontendConfig(n_frames=256).digest()
    assert len(cfg.digest()) == 8


def test_audio_clip_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        AudioClip(np.array([0.0, np.nan]), 12000)
    with pytest.raises(InvalidInputError):
        AudioClip(np.zeros(4), 0)


def test_feature_kind_parse():
    assert FeatureKind.parse("mel") is FeatureKind.LOG_MEL
    assert FeatureKind.parse("STFT") is FeatureKind.LOG_STFT
    with pytest.raises(ValueError):
        FeatureKind.parse("cqt")


def test_resample_length_and_direction():
    clip = AudioClip(np.zeros(22050), 22050)
    assert len(resample(clip, 12000)) == 12000
    assert len(resample(AudioClip(np.zeros(1001), 16000), 12000)) == round(1001 * 0.75)
    with pytest.raises(UnsupportedDirectionError):
        resample(AudioClip(np.zeros(10), 8000), 12000)


def _rms(x):
    return np.sqrt(np.mean(x[2000:-2000] ** 2))


def test_resample_passes_band_and_rejects_aliases():
    # 1 kHz survives with unit gain; 7.5 kHz would alias to 4.5 kHz and must vanish
    low = resample(sine(1000.0, rate=16000, seconds=2.0), 12000).samples
    high = resample(sine(7500.0, rate=16000, seconds=2.0), 12000).samples
    assert _rms(low) == pytest.approx(0.5 / np.sqrt(2), rel=1e-3)
    assert 20 * np.log10(_rms(high) / (0.5 / np.sqrt(2))) < -60.0


def test_resample_preserves_timing():
    x = np.zeros(16000)
    x[8000] = 1.0
    y = resample(AudioClip(x, 16000), 12000).samples
    assert int(np.argmax(y)) == 6000


def test_pad_or_trim():
    cfg = SMALL
    short = pad_or_trim(AudioClip(np.ones(100), 12000), cfg)
    assert len(short) == 64 * 256 and short.samples[99] == 1.0 and short.samples[100] == 0.0
    long = pad_or_trim(AudioClip(np.ones(20000), 12000), cfg)
    assert len(long) == 64 * 256
    with pytest.raises(ContractError):
        pad_or_trim(AudioClip(np.ones(100), 16000), cfg)


def test_default_shapes():
    clip = AudioClip(np.random.default_rng(0).normal(scale=0.1, size=29 * 22050), 22050)
    cfg = FrontendConfig()
    assert extract(clip, cfg, "mel").data.shape == (96, 1366)
    assert extract(clip, cfg, "stft").data.shape == (129, 1366)
    assert extract(clip, cfg, "mfcc").data.shape == (90, 1366)


def test_sine_peaks_at_expected_bin():
    fm = stft_log(prepare(sine(1500.0), SMALL), SMALL)
    assert int(np.argmax(fm.data[:, 10])) == 32
    assert bin_frequencies(SMALL)[32] == 1500.0


def test_spectra_need_prepared_clip():
    with pytest.raises(ContractError):
        stft_log(sine(1000.0), SMALL)


def test_silence_is_the_log_floor():
    fm = extract(AudioClip(np.zeros(2000), 12000), SMALL, "mel")
    np.testing.assert_allclose(fm.data, np.log(1e-10), rtol=1e-6)


def test_mel_scale_roundtrip():
    f = np.array([0.0, 440.0, 1000.0, 6000.0])
    np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-9)
    assert hz_to_mel(700.0) == pytest.approx(2595.0 * np.log10(2.0))


def test_filterbank_rows_are_nonempty_and_normalized():
    fb = mel_filterbank(FrontendConfig())
    assert fb.weights.shape == (96, 129)
    assert np.all(fb.weights >= 0)
    np.testing.assert_allclose(fb.weights.sum(axis=1), 1.0)
    assert np.all(np.count_nonzero(fb.weights, axis=1) >= 1)
    assert np.all(np.diff(fb.center_freqs) > 0)


def test_bins_per_khz_pattern():
    mel = bins_per_khz("mel")
    stft = bins_per_khz("stft")
    assert len(mel) == len(stft) == 6
    assert all(a > b for a, b in zip(mel, mel[1:]))
    assert sum(mel) == 96 and sum(stft) == 129
    assert max(stft) - min(stft) <= 1


def test_deltas_of_a_ramp_are_its_slope():
    ramp = np.arange(40, dtype=np.float64)[None, :] * 0.5
    d = deltas(ramp)
    np.testing.assert_allclose(d[0, 4:-4], 0.5)
    assert deltas(np.ones((2, 10))).max() == 0.0


def test_mfcc_first_coefficient_is_scaled_band_mean():
    logmel = np.random.default_rng(0).normal(size=(96, 20))
    stack = mfcc_from_logmel(logmel, 30)
    assert stack.shape == (90, 20)
    np.testing.assert_allclose(stack[0], logmel.sum(axis=0) / np.sqrt(96))


def test_features_are_deterministic():
    clip = sine(2500.0)
    a, b = extract(clip, SMALL, "mfcc"), extract(clip, SMALL, "mfcc")
    assert a.data.tobytes() == b.data.tobytes()
    assert a.data.dtype == np.float32


@settings(max_examples=10, deadline=None)
@given(st.floats(1.01, 20.0), st.integers(0, 1000))
def test_scaling_a_clip_never_lowers_log_mel(c, seed):
    x = np.random.default_rng(seed).normal(scale=0.01, size=64 * 256)
    base = extract(AudioClip(x, 12000), SMALL, "mel").data
    louder = extract(AudioClip(c * x, 12000), SMALL, "mel").data
    assert np.all(louder >= base)

"""STFT front end and level normalization."""

import numpy as np
import pytest

from ipdloc.dsp import (
    OnlineNormalizer,
    StftConfig,
    hann_window,
    normalize_offline,
    normalize_online,
    read_wav,
    stft,
    write_wav,
)

CFG = StftConfig()


def oracle_delay_phase(freq_hz, delay_samples, sample_rate):
    """Closed-form cross-spectrum phase of a pure delay."""
    return -2.0 * np.pi * freq_hz * delay_samples / sample_rate


def test_zero_signal_gives_zero_spectrogram():
    spec = stft(np.zeros(4096), CFG)
    assert spec.shape == (15, 256, 1)
    assert np.all(spec == 0.0)


def test_frame_count_formula():
    assert CFG.num_frames(512) == 1
    assert CFG.num_frames(511) == 0
    assert CFG.num_frames(512 + 256) == 2
    assert CFG.num_frames(16000) == (16000 - 512) // 256 + 1


def test_bin_centered_tone_peaks_at_its_bin():
    # 1000 Hz is exactly bin 32 at 16 kHz / 512
    t = np.arange(8192) / CFG.sample_rate
    tone = np.sin(2.0 * np.pi * 1000.0 * t)
    spec = stft(tone, CFG)
    mags = np.abs(spec[:, :, 0])
    freqs = CFG.frequencies()
    assert freqs[31] == pytest.approx(1000.0)
    assert np.all(np.argmax(mags, axis=1) == 31)


def test_delay_shows_up_as_linear_phase():
    rng = np.random.default_rng(21)
    delay = 4
    x = rng.standard_normal(32768)
    pair = np.stack([x[delay:], x[:-delay]], axis=1)  # ch2 lags ch1 by 4 samples
    spec = stft(pair, CFG)
    cross = np.mean(spec[:, :, 0] * np.conj(spec[:, :, 1]), axis=0)
    freqs = CFG.frequencies()
    # keep clear of the top of the band where the window skirt dominates
    for f in range(0, 200, 7):
        want = oracle_delay_phase(freqs[f], delay, CFG.sample_rate)
        got = np.angle(cross[f])
        diff = np.angle(np.exp(1j * (got - (-want))))
        assert abs(diff) < 0.05, f"bin {f}: phase {got} vs {-want}"


def test_window_is_periodic_hann():
    w = hann_window(8)
    assert w[0] == 0.0
    assert w[4] == pytest.approx(1.0)
    # periodic: w[k] = 0.5 - 0.5 cos(2 pi k / N), so w[1] != w[7] symmetry gap is absent
    assert w[1] == pytest.approx(w[7])
    assert len(hann_window()) == 512


def test_offline_normalization_scale_invariant():
    rng = np.random.default_rng(22)
    spec = rng.standard_normal((9, 256, 2)) + 1j * rng.standard_normal((9, 256, 2))
    a = normalize_offline(spec)
    b = normalize_offline(10.0 * spec)
    np.testing.assert_allclose(a, b, rtol=1e-6)


def test_offline_normalization_constant_magnitude():
    phase = np.exp(1j * np.linspace(0.0, 3.0, 9 * 256 * 2)).reshape(9, 256, 2)
    spec = 5.0 * phase
    out = normalize_offline(spec)
    np.testing.assert_allclose(np.abs(out), 1.0, atol=1e-12)


def test_offline_normalization_unit_mean():
    rng = np.random.default_rng(23)
    spec = rng.standard_normal((20, 256, 4)) + 1j * rng.standard_normal((20, 256, 4))
    out = normalize_offline(spec)
    assert np.mean(np.abs(out)) == pytest.approx(1.0, abs=1e-9)


def test_normalization_preserves_phase_and_ratios():
    rng = np.random.default_rng(24)
    spec = rng.standard_normal((30, 64, 2)) + 1j * rng.standard_normal((30, 64, 2))
    for out in (normalize_offline(spec), normalize_online(spec, 10)):
        np.testing.assert_allclose(np.angle(out), np.angle(spec), atol=1e-12)
        np.testing.assert_allclose(
            out[:, :, 0] / out[:, :, 1], spec[:, :, 0] / spec[:, :, 1], rtol=1e-9
        )


def test_online_normalization_converges_to_unit_magnitude():
    phase = np.exp(1j * np.linspace(0.0, 5.0, 400 * 16 * 2)).reshape(400, 16, 2)
    out = normalize_online(7.0 * phase, smoothing_frames=25)
    assert np.abs(out[0]).mean() == pytest.approx(1.0, abs=1e-9)  # mu(1) = first frame
    assert np.abs(out[-1]).mean() == pytest.approx(1.0, abs=1e-6)


def test_online_normalization_scale_invariant():
    rng = np.random.default_rng(25)
    spec = rng.standard_normal((50, 32, 2)) + 1j * rng.standard_normal((50, 32, 2))
    a = normalize_online(spec)
    b = normalize_online(np.pi * spec)
    np.testing.assert_allclose(a, b, rtol=1e-9)


def test_online_normalization_is_causal():
    rng = np.random.default_rng(26)
    base = rng.standard_normal((60, 32, 2)) + 1j * rng.standard_normal((60, 32, 2))
    tail = np.array(base)
    tail[40:] *= 13.0  # perturb only frames > 39
    a = normalize_online(base)
    b = normalize_online(tail)
    assert np.array_equal(a[:40], b[:40])
    assert not np.allclose(a[40:], b[40:])


def test_online_beta_matches_smoothing_length():
    norm = OnlineNormalizer(smoothing_frames=125)
    assert norm.beta == pytest.approx(124.0 / 126.0)
    with pytest.raises(ValueError):
        OnlineNormalizer(smoothing_frames=0)


def test_silent_input_passes_through():
    spec = np.zeros((5, 16, 2), dtype=np.complex128)
    assert np.array_equal(normalize_offline(spec), spec)
    assert np.array_equal(normalize_online(spec), spec)


def test_stft_rejects_bad_shapes():
    with pytest.raises(ValueError):
        stft(np.zeros((10, 2, 2)), CFG)


def test_wav_round_trip(tmp_path):
    rng = np.random.default_rng(27)
    samples = rng.uniform(-0.5, 0.5, (1600, 2))
    path = tmp_path / "x.wav"
    write_wav(path, samples)
    back = read_wav(path)
    assert back.shape == (1600, 2)
    np.testing.assert_allclose(back, samples, atol=1e-6)
    with pytest.raises(ValueError):
        read_wav(path, expected_rate=48000)

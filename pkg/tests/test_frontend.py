import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import naive_dft
from pedsense.core_data import AudioClip
from pedsense.errors import InputError
from pedsense.frontend import (FrontendConfig, band_centers, clip_to_sequence, hann, hz_to_mel,
                               mel_filterbank, mel_to_hz, read_feature_cache, segment_to_patch,
                               stft_magnitude, write_feature_cache)

CFG = FrontendConfig()


def test_mel_formula():
    assert hz_to_mel(700.0) == pytest.approx(2595 * np.log10(2))
    assert hz_to_mel(700.0) == pytest.approx(781.17, abs=0.01)
    assert hz_to_mel(0.0) == 0.0
    np.testing.assert_allclose(mel_to_hz(hz_to_mel([10.0, 440.0, 7500.0])), [10, 440, 7500])


def test_stft_zero_and_shape():
    m = stft_magnitude(np.zeros(1000), 256, 100)
    assert m.shape == ((1000 - 256) // 100 + 1, 129)
    assert not m.any()


def test_stft_bin_center_argmax():
    n, k = 512, 37
    t = np.arange(4 * n)
    m = stft_magnitude(np.sin(2 * np.pi * k * t / n), n, 128)
    assert (np.argmax(m, axis=1) == k).all()


def test_stft_matches_naive_dft(rng):
    x = rng.normal(size=400)
    fast = stft_magnitude(x, 400, 160)[0]
    slow = np.abs(naive_dft(x * hann(400)))
    assert np.max(np.abs(fast - slow) / np.maximum(np.abs(slow), 1e-300)) < 1e-9


def test_stft_errors():
    with pytest.raises(InputError):
        stft_magnitude(np.zeros(100), 256, 128)
    with pytest.raises(InputError):
        stft_magnitude(np.zeros(1000), 256, 300)


def test_filterbank_rows_vs_direct_sum():
    fb = mel_filterbank(64, 125.0, 7500.0, 400, 16000)
    edges = mel_to_hz(np.linspace(hz_to_mel(125.0), hz_to_mel(7500.0), 66))
    for b in range(64):
        lo, mid, hi = edges[b], edges[b + 1], edges[b + 2]
        total = 0.0
        for k in range(201):
            f = k * 16000 / 400
            if lo < f <= mid:
                total += (f - lo) / (mid - lo)
            elif mid < f < hi:
                total += (hi - f) / (hi - mid)
        assert abs(fb[b].sum() - total) < 1e-12


def test_filterbank_coverage():
    fb = mel_filterbank(64, 125.0, 7500.0, 400, 16000)
    assert (fb >= 0).all()
    c = band_centers(CFG)
    freqs = np.arange(201) * 40.0
    interior = (freqs >= c[0]) & (freqs <= c[-1])
    assert (fb[:, interior].sum(axis=0) > 0).all()


def test_filterbank_errors():
    with pytest.raises(InputError):
        mel_filterbank(128, 0.0, 8000.0, 64, 16000)
    with pytest.raises(InputError):
        mel_filterbank(10, 500.0, 400.0, 400, 16000)


def test_patch_silence_and_shape():
    p = segment_to_patch(np.zeros(16000))
    assert p.shape == (98, 64)
    assert np.all(p == np.log(CFG.log_floor))


@pytest.mark.parametrize("band", [0, 10, 31, 50, 63])
def test_patch_band_center_argmax(band):
    f = band_centers(CFG)[band]
    t = np.arange(16000) / 16000
    p = segment_to_patch(0.5 * np.sin(2 * np.pi * f * t))
    assert (np.argmax(p, axis=1) == band).all()


def test_patch_short_segment_padded(rng):
    x = rng.normal(size=9000) * 0.1
    np.testing.assert_array_equal(segment_to_patch(x),
                                  segment_to_patch(np.concatenate([x, np.zeros(7000)])))


@given(st.floats(1.01, 20.0))
def test_patch_amplitude_monotone(g):
    x = np.random.default_rng(5).normal(size=16000) * 0.01
    assert (segment_to_patch(g * x) >= segment_to_patch(x)).all()


def test_clip_to_sequence(rng):
    clip = AudioClip(rng.normal(size=int(16000 * 10.7)) * 0.1, 16000, 100.4)
    seq = clip_to_sequence(clip)
    assert len(seq) == 10 and seq.patches.shape == (10, 98, 64)
    assert seq.timestamps.tolist() == list(range(100, 110))
    assert len(clip_to_sequence(AudioClip(np.zeros(16000), 16000))) == 1
    with pytest.raises(InputError):
        clip_to_sequence(AudioClip(np.zeros(8000), 16000))
    with pytest.raises(InputError):
        clip_to_sequence(AudioClip(np.zeros(48000), 48000))


def test_clip_concatenation(rng):
    a, b = rng.normal(size=32000), rng.normal(size=16000)
    whole = clip_to_sequence(AudioClip(np.concatenate([a, b]), 16000)).patches
    parts = np.concatenate([clip_to_sequence(AudioClip(a, 16000)).patches,
                            clip_to_sequence(AudioClip(b, 16000)).patches])
    np.testing.assert_array_equal(whole, parts)


def test_feature_cache_roundtrip(tmp_path, rng):
    seq = clip_to_sequence(AudioClip(rng.normal(size=32000) * 0.1, 16000))
    p = tmp_path / "f.bin"
    write_feature_cache(p, seq)
    data = p.read_bytes()
    assert data[:12] == np.array([2, 98, 64], dtype="<u4").tobytes()
    np.testing.assert_allclose(read_feature_cache(p), seq.patches, rtol=1e-6)
    p.write_bytes(data[:-4])
    with pytest.raises(InputError):
        read_feature_cache(p)

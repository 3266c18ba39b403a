import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from milnet import features as feat

SR = 44100


def _sine(freq, seconds=5.0, amp=0.5):
    t = np.arange(int(round(seconds * SR))) / SR
    return amp * np.sin(2 * np.pi * freq * t)


def test_five_second_clip_is_432_by_40():
    fm = feat.extract_logmel(np.random.default_rng(0).normal(size=5 * SR) * 0.1)
    assert fm.values.shape == (432, 40)
    assert fm.values.dtype == np.float32
    assert fm.length == 432


@settings(max_examples=40, deadline=None)
@given(st.integers(1024, 200_000))
def test_frame_count_formula(n):
    frames = feat.frame_signal(np.zeros(n))
    assert frames.shape == (1 + math.ceil(n / 512), 1024)


def test_frames_are_centred():
    y = np.arange(4096, dtype=float)
    frames = feat.frame_signal(y)
    # frame i is centred on sample i * hop
    np.testing.assert_array_equal(frames[2, 512:516], y[1024:1028])
    np.testing.assert_array_equal(frames[0, :512], y[512:0:-1])


def test_silence_hits_the_log_floor():
    fm = feat.extract_logmel(np.zeros(SR))
    np.testing.assert_array_equal(fm.values, np.float32(feat.LOG_FLOOR))
    assert feat.LOG_FLOOR == pytest.approx(math.log(1e-10))


def _triangle_response(freq, n_mels=40, fmax=SR / 2):
    """Slaney mel scale written out directly (linear below 1 kHz, log
    above) and the triangle heights at ``freq``."""
    def to_mel(f):
        return f / (200 / 3) if f < 1000 else 15 + math.log(f / 1000) / (math.log(6.4) / 27)

    def to_hz(m):
        return m * 200 / 3 if m < 15 else 1000 * math.exp((m - 15) * math.log(6.4) / 27)
    mels = np.linspace(0, to_mel(fmax), n_mels + 2)
    e = [to_hz(m) for m in mels]
    out = []
    for k in range(n_mels):
        lo, mid, hi = e[k], e[k + 1], e[k + 2]
        up = (freq - lo) / (mid - lo)
        down = (hi - freq) / (hi - mid)
        out.append(max(0.0, min(up, down)) * 2 / (hi - lo))
    return np.array(out)


def test_one_khz_tone_peaks_in_the_oracle_band():
    fm = feat.extract_logmel(_sine(1000.0))
    band = int(np.argmax(fm.values[5:-5].mean(axis=0)))
    oracle = _triangle_response(1000.0)
    assert band == int(np.argmax(oracle)) == 9


def _band_edges_oracle():
    def to_hz(m):
        return m * 200 / 3 if m < 15 else 1000 * math.exp((m - 15) * math.log(6.4) / 27)
    top = 15 + math.log(22.05) / (math.log(6.4) / 27)
    return [to_hz(m) for m in np.linspace(0, top, 42)]


def test_band_edges_match_oracle():
    np.testing.assert_allclose(feat.mel_band_edges(), _band_edges_oracle(), rtol=1e-12)
    assert feat.hz_to_mel(1000.0) == pytest.approx(15.0)


@pytest.mark.parametrize("c", [0.1, 0.5, 2.0])
def test_amplitude_scaling_shifts_log_by_2_ln_c(c):
    y = np.random.default_rng(1).normal(size=SR) * 0.05
    a = feat.extract_logmel(y).values.astype(np.float64)
    b = feat.extract_logmel(c * y).values.astype(np.float64)
    np.testing.assert_allclose(b - a, 2 * math.log(c), atol=1e-4)


def test_filterbank_properties():
    w = feat.mel_filterbank()
    assert w.shape == (40, 513)
    assert np.all(w >= 0)
    assert np.all((w > 0).sum(axis=1) >= 1)
    # area normalisation: each triangle integrates to ~1 over Hz
    np.testing.assert_allclose(w.sum(axis=1) * SR / 1024, 1.0, atol=0.05)
    # nothing above Nyquist: last bin belongs to the top band only, at its tail
    assert w[:, -1].max() == pytest.approx(0.0, abs=1e-15)
    assert not w.flags.writeable


def test_fmax_clamped_to_nyquist():
    np.testing.assert_array_equal(feat.mel_filterbank(fmax=44100.0), feat.mel_filterbank())


def test_extraction_is_deterministic():
    y = np.random.default_rng(2).normal(size=SR // 2)
    assert feat.extract_logmel(y).values.tobytes() == feat.extract_logmel(y).values.tobytes()


@pytest.mark.parametrize("bad, rate", [(np.zeros((2, 4096)), SR), (np.zeros(100), SR),
                                       (np.zeros(4096), 22050),
                                       (np.full(4096, np.nan), SR)])
def test_extraction_rejects_bad_input(bad, rate):
    with pytest.raises(feat.FeatureError):
        feat.extract_logmel(bad, rate)


def test_pad_or_crop():
    fm = feat.FeatureMatrix(np.ones((10, 40)), "x")
    padded = feat.pad_or_crop(fm, 15)
    assert padded.values.shape == (15, 40) and padded.length == 10
    np.testing.assert_array_equal(padded.values[10:], np.float32(feat.LOG_FLOOR))
    cropped = feat.pad_or_crop(fm, 4)
    assert cropped.values.shape == (4, 40) and cropped.length == 4
    with pytest.raises(feat.FeatureError):
        feat.pad_or_crop(fm, 0)


def test_lmel_round_trip_and_header(tmp_path):
    fm = feat.extract_logmel(_sine(440.0))
    path = tmp_path / "a.lmel"
    feat.write_lmel(path, fm)
    blob = path.read_bytes()
    assert blob[:4] == b"LMEL"
    assert int.from_bytes(blob[4:8], "little") == 432
    assert int.from_bytes(blob[8:12], "little") == 40
    np.testing.assert_array_equal(feat.read_lmel(path), fm.values)


def test_lmel_rejects_truncation(tmp_path):
    path = tmp_path / "a.lmel"
    feat.write_lmel(path, np.zeros((3, 40), np.float32))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(feat.FeatureError):
        feat.read_lmel(path)

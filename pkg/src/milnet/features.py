"""Log mel-band energy features.

Frames are 1024-sample Hamming windows with a 512-sample hop at 44.1 kHz
(about 23 ms with 50% overlap).  The signal is reflection-padded by half
a window on each side and zero-padded at the end so that a clip of N
samples yields ``1 + ceil(N / 512)`` frames; 5 s clips give 432 frames.
The 40 Slaney-style mel bands span 0 Hz up to Nyquist (22 050 Hz), since
nothing above Nyquist is representable.  Band energies are clamped at
1e-10 before the natural log.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.signal import get_window

SAMPLE_RATE = 44100
N_FFT = 1024
HOP = 512
N_MELS = 40
POWER_FLOOR = 1e-10
LOG_FLOOR = math.log(POWER_FLOOR)

_F_SP = 200.0 / 3
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = math.log(6.4) / 27.0


class FeatureError(ValueError):
    pass


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    lin = f / _F_SP
    with np.errstate(divide="ignore"):
        log = _MIN_LOG_MEL + np.log(np.maximum(f, 1e-12) / _MIN_LOG_HZ) / _LOGSTEP
    return np.where(f >= _MIN_LOG_HZ, log, lin)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    lin = _F_SP * m
    log = _MIN_LOG_HZ * np.exp(_LOGSTEP * (m - _MIN_LOG_MEL))
    return np.where(m >= _MIN_LOG_MEL, log, lin)


def mel_band_edges(n_mels=N_MELS, fmin=0.0, fmax=SAMPLE_RATE / 2):
    """n_mels + 2 frequencies: band k rises from edge k, peaks at k+1 and
    falls to k+2."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


@lru_cache(maxsize=8)
def mel_filterbank(sr=SAMPLE_RATE, n_fft=N_FFT, n_mels=N_MELS, fmin=0.0, fmax=None):
    """Triangular, area-normalised filters, shape n_mels x (n_fft//2 + 1)."""
    fmax = sr / 2 if fmax is None else min(fmax, sr / 2)
    freqs = np.linspace(0, sr / 2, n_fft // 2 + 1)
    edges = mel_band_edges(n_mels, fmin, fmax)
    widths = np.diff(edges)
    ramps = edges[:, None] - freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    weights.setflags(write=False)
    return weights


def n_frames(num_samples, hop=HOP):
    return 1 + -(-num_samples // hop)


@lru_cache(maxsize=4)
def _window(n_fft):
    return get_window("hamming", n_fft, fftbins=True)


def frame_signal(samples, n_fft=N_FFT, hop=HOP):
    y = np.asarray(samples, dtype=np.float64)
    t = n_frames(y.size, hop)
    half = n_fft // 2
    padded = np.pad(y, (half, half), mode="reflect")
    need = (t - 1) * hop + n_fft
    padded = np.pad(padded, (0, need - padded.size))
    return np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop][:t]


def power_spectrogram(samples, n_fft=N_FFT, hop=HOP):
    frames = frame_signal(samples, n_fft, hop) * _window(n_fft)
    spec = np.fft.rfft(frames, axis=1)
    return spec.real ** 2 + spec.imag ** 2


@dataclass
class FeatureMatrix:
    values: np.ndarray
    source_id: str = ""
    duration_s: float = 0.0
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[1] != N_MELS:
            raise FeatureError(f"feature matrix must be T x {N_MELS}, got {self.values.shape}")
        if self.mask is None:
            self.mask = np.ones(self.values.shape[0], dtype=bool)

    @property
    def frames(self):
        return self.values.shape[0]

    @property
    def bands(self):
        return self.values.shape[1]

    @property
    def length(self):
        """Number of unpadded frames."""
        return int(self.mask.sum())


def extract_logmel(samples, sample_rate=SAMPLE_RATE, source_id="") -> FeatureMatrix:
    """T x 40 natural-log mel-band energies of a mono 44.1 kHz signal."""
    if sample_rate != SAMPLE_RATE:
        raise FeatureError(f"expected {SAMPLE_RATE} Hz input (resample first), got {sample_rate}")
    y = np.asarray(samples, dtype=np.float64)
    if y.ndim != 1:
        raise FeatureError(f"expected mono samples, got shape {y.shape}")
    if y.size < N_FFT:
        raise FeatureError(f"need at least {N_FFT} samples, got {y.size}")
    if not np.isfinite(y).all():
        raise FeatureError("input contains non-finite samples")
    power = power_spectrogram(y)
    mel = power @ mel_filterbank().T
    values = np.log(np.maximum(mel, POWER_FLOOR))
    return FeatureMatrix(values, source_id, y.size / sample_rate)


def pad_or_crop(features: FeatureMatrix, target_T: int) -> FeatureMatrix:
    """Right-pad with the log floor (masked out) or crop at the end."""
    if target_T <= 0:
        raise FeatureError(f"target_T must be positive, got {target_T}")
    vals, mask = features.values, features.mask
    t = vals.shape[0]
    if t >= target_T:
        out, out_mask = vals[:target_T].copy(), mask[:target_T].copy()
    else:
        out = np.full((target_T, vals.shape[1]), LOG_FLOOR, dtype=np.float32)
        out[:t] = vals
        out_mask = np.zeros(target_T, dtype=bool)
        out_mask[:t] = mask
    return FeatureMatrix(out, features.source_id, features.duration_s, out_mask)


# -- .lmel cache files -------------------------------------------------------

LMEL_MAGIC = b"LMEL"


def write_lmel(path, features):
    values = features.values if isinstance(features, FeatureMatrix) else np.asarray(features)
    t, f = values.shape
    with open(path, "wb") as fh:
        fh.write(LMEL_MAGIC + struct.pack("<II", t, f))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_lmel(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != LMEL_MAGIC:
        raise FeatureError(f"{path}: not an LMEL file")
    t, f = struct.unpack("<II", blob[4:12])
    if len(blob) != 12 + 4 * t * f:
        raise FeatureError(f"{path}: truncated ({len(blob)} bytes for {t}x{f})")
    return np.frombuffer(blob, dtype="<f4", offset=12).reshape(t, f).astype(np.float32)

"""Log-mel front-end: one F x M patch per second of audio."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .core_data import WORKING_RATE, AudioClip
from .errors import InputError


@dataclass(frozen=True)
class FrontendConfig:
    rate: int = WORKING_RATE
    fft_size: int = 400
    hop: int = 160
    n_bands: int = 64
    f_min: float = 125.0
    f_max: float = 7500.0
    log_floor: float = 1e-2

    @property
    def n_frames(self) -> int:
        return (self.rate - self.fft_size) // self.hop + 1

    @property
    def patch_shape(self) -> tuple[int, int]:
        return (self.n_frames, self.n_bands)


@dataclass(frozen=True, eq=False)
class MelSequence:
    patches: np.ndarray     # (T, F, M)
    timestamps: np.ndarray  # (T,) UTC seconds

    def __len__(self):
        return len(self.timestamps)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_magnitude(samples, fft_size: int = 400, hop: int = 160) -> np.ndarray:
    """|STFT| with a Hann window, no padding; shape (frames, fft_size//2 + 1)."""
    x = np.asarray(samples, dtype=np.float64)
    if fft_size < 2 or hop < 1 or hop > fft_size:
        raise InputError(f"bad STFT geometry fft_size={fft_size} hop={hop}")
    if x.size < fft_size:
        raise InputError(f"input of {x.size} samples is shorter than one window")
    n_frames = (x.size - fft_size) // hop + 1
    frames = np.lib.stride_tricks.as_strided(
        x, shape=(n_frames, fft_size), strides=(x.strides[0] * hop, x.strides[0]))
    return np.abs(np.fft.rfft(frames * hann(fft_size), axis=1))


def mel_filterbank(n_bands: int = 64, f_min: float = 125.0, f_max: float = 7500.0,
                   fft_size: int = 400, rate: int = WORKING_RATE) -> np.ndarray:
    """Triangular filters equally spaced on the mel scale, peak weight 1.

    Returns a (n_bands, fft_size//2 + 1) matrix. Raises if a filter
    covers no FFT bin.
    """
    if not 0 <= f_min < f_max <= rate / 2:
        raise InputError(f"need 0 <= f_min < f_max <= rate/2, got {f_min}, {f_max}")
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_bands + 2))
    freqs = np.arange(fft_size // 2 + 1) * rate / fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    empty = np.flatnonzero(fb.sum(axis=1) <= 0)
    if empty.size:
        raise InputError(f"{n_bands} bands too many for fft_size {fft_size}: "
                         f"filters {empty.tolist()} are empty")
    return fb


def band_centers(cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max),
                                 cfg.n_bands + 2))[1:-1]


@lru_cache(maxsize=8)
def _cached_bank(cfg: FrontendConfig) -> np.ndarray:
    return mel_filterbank(cfg.n_bands, cfg.f_min, cfg.f_max, cfg.fft_size, cfg.rate)


def segment_to_patch(segment, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """log(mel . |STFT|^2 + floor) for exactly one second; shorter input is zero-padded."""
    x = np.asarray(segment, dtype=np.float64)
    if x.size > cfg.rate:
        raise InputError(f"segment has {x.size} samples, expected {cfg.rate}")
    if x.size < cfg.rate:
        x = np.concatenate([x, np.zeros(cfg.rate - x.size)])
    power = stft_magnitude(x, cfg.fft_size, cfg.hop) ** 2
    return np.log(power @ _cached_bank(cfg).T + cfg.log_floor)


def clip_to_sequence(clip: AudioClip, cfg: FrontendConfig = FrontendConfig()) -> MelSequence:
    """One patch per whole second of ``clip``; a trailing partial second is dropped."""
    if clip.sample_rate != cfg.rate:
        raise InputError(f"clip at {clip.sample_rate} Hz, front-end expects {cfg.rate} Hz")
    n = clip.samples.size // cfg.rate
    if n < 1:
        raise InputError("clip shorter than one second")
    patches = np.stack([segment_to_patch(clip.samples[i * cfg.rate:(i + 1) * cfg.rate], cfg)
                        for i in range(n)])
    stamps = np.floor(clip.start_time).astype(np.int64) + np.arange(n)
    return MelSequence(patches, stamps)


# --------------------------------------------------------------------------
# feature cache: <u32 T, F, M> followed by T*F*M little-endian float32

def write_feature_cache(path, seq: MelSequence) -> None:
    t, f, m = seq.patches.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<III", t, f, m))
        fh.write(np.ascontiguousarray(seq.patches, dtype="<f4").tobytes())


def read_feature_cache(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise InputError(f"{path}: truncated feature cache")
    t, f, m = struct.unpack("<III", data[:12])
    body = np.frombuffer(data, dtype="<f4", offset=12)
    if body.size != t * f * m:
        raise InputError(f"{path}: expected {t * f * m} floats, found {body.size}")
    return body.reshape(t, f, m).astype(np.float64)

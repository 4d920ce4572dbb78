"""Audio and label ingestion, timeline alignment and dataset statistics."""

from __future__ import annotations

import csv
import logging
import math
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DuplicateLabelError,
    EmptyAudioError,
    InputError,
    LabelFormatError,
    MonotonicityError,
    RadiusDomainError,
    UnsupportedCodecError,
    WavHeaderError,
)

logger = logging.getLogger(__name__)

WORKING_RATE = 16000
RADII = (1, 3, 6, 9)
LABEL_HEADER = ("timestamp", "sensor_id", "radius_m", "count")


@dataclass(frozen=True, eq=False)
class AudioClip:
    """Mono PCM signal in [-1, 1] anchored at a UTC start time."""

    samples: np.ndarray
    sample_rate: int
    start_time: float = 0.0

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size < 1:
            raise InputError("AudioClip needs a non-empty 1-D sample array")
        if int(self.sample_rate) <= 0:
            raise InputError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise InputError("AudioClip samples must be finite")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def end_time(self) -> float:
        return self.start_time + self.duration


@dataclass(frozen=True, order=True)
class LabelRecord:
    timestamp: int
    sensor_id: str
    radius: int
    count: int


# --------------------------------------------------------------------------
# WAV

_PCM = 0x0001
_IEEE_FLOAT = 0x0003
_EXTENSIBLE = 0xFFFE


def _read_chunks(data: bytes) -> dict[bytes, bytes]:
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavHeaderError("missing RIFF/WAVE signature")
    chunks: dict[bytes, bytes] = {}
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        chunks.setdefault(cid, body)
        pos += 8 + size + (size & 1)
    return chunks


def load_wav(path) -> AudioClip:
    """Read a PCM/float WAV file into a mono clip.

    Integer formats are scaled by 1/2**(bits-1) (8-bit is unsigned and
    offset by 128 first); float data is clipped to [-1, 1]. Channels are
    averaged.
    """
    data = Path(path).read_bytes()
    chunks = _read_chunks(data)
    fmt = chunks.get(b"fmt ")
    if fmt is None or len(fmt) < 16:
        raise WavHeaderError("missing or truncated fmt chunk")
    if b"data" not in chunks:
        raise WavHeaderError("missing data chunk")
    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == _EXTENSIBLE:
        if len(fmt) < 26:
            raise WavHeaderError("truncated WAVE_FORMAT_EXTENSIBLE header")
        (tag,) = struct.unpack("<H", fmt[24:26])
    if channels not in (1, 2):
        raise UnsupportedCodecError(f"{channels} channels not supported")
    if rate <= 0:
        raise WavHeaderError("sample rate must be positive")
    if tag == _PCM and bits in (8, 16, 24, 32):
        pass
    elif tag == _IEEE_FLOAT and bits == 32:
        pass
    else:
        raise UnsupportedCodecError(f"format tag {tag:#x} with {bits} bits")

    width = bits // 8
    payload = chunks[b"data"]
    n_frames = len(payload) // (width * channels)
    if n_frames == 0:
        raise EmptyAudioError(f"{path}: empty data chunk")
    raw = payload[: n_frames * width * channels]

    if tag == _IEEE_FLOAT:
        x = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        x = np.clip(x, -1.0, 1.0)
    elif bits == 8:
        x = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif bits == 16:
        x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif bits == 24:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        x = v.astype(np.float64) / float(1 << 23)
    else:
        x = np.frombuffer(raw, dtype="<i4").astype(np.float64) / float(1 << 31)
    x = x.reshape(n_frames, channels).mean(axis=1)
    if not np.all(np.isfinite(x)):
        raise UnsupportedCodecError("non-finite float samples")
    return AudioClip(x, rate)


def write_wav(path, clip: AudioClip) -> None:
    """Write a clip as 16-bit mono PCM (deterministic byte layout)."""
    pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype("<i2")
    payload = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    fmt = struct.pack("<HHIIHH", _PCM, 1, clip.sample_rate, clip.sample_rate * 2, 2, 16)
    body = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    Path(path).write_bytes(header + body)


# --------------------------------------------------------------------------
# resampling

def _kaiser(u: np.ndarray, beta: float) -> np.ndarray:
    inside = np.abs(u) <= 1.0
    arg = np.sqrt(np.clip(1.0 - u * u, 0.0, None))
    return np.where(inside, np.i0(beta * arg) / np.i0(beta), 0.0)


def resample(clip: AudioClip, target_rate: int, *, beta: float = 8.0,
             taps_per_side: int = 64, block: int = 8192) -> AudioClip:
    """Band-limited resampling with a Kaiser-windowed sinc kernel.

    The kernel spans ``taps_per_side`` zero crossings of the lower of the
    two rates on each side, so downsampling low-passes at the new Nyquist.
    """
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise InputError("target rate must be positive")
    src = clip.sample_rate
    if target_rate == src:
        return AudioClip(clip.samples.copy(), src, clip.start_time)

    x = clip.samples
    n_in = x.size
    g = math.gcd(src, target_rate)
    up, down = target_rate // g, src // g
    n_out = max(1, int(round(n_in * up / down)))
    fc = min(1.0, up / down)
    half = taps_per_side / fc
    offs = np.arange(-math.ceil(half) + 1, math.ceil(half) + 1)

    def weights(frac):
        tau = frac[:, None] - offs[None, :]
        return fc * np.sinc(fc * tau) * _kaiser(tau / half, beta)

    # Rational ratio: only `up` distinct fractional offsets exist.
    table = weights(np.arange(up) / up) if up <= 4096 else None
    xp = np.concatenate([np.zeros(offs.size), x, np.zeros(offs.size)])
    out = np.empty(n_out)
    for start in range(0, n_out, block):
        j = np.arange(start, min(n_out, start + block), dtype=np.int64)
        base, phase = np.divmod(j * down, up)
        w = table[phase] if table is not None else weights(phase / up)
        k = base[:, None] + offs[None, :] + offs.size
        out[j] = np.einsum("ij,ij->i", w, xp[k])
    return AudioClip(out, target_rate, clip.start_time)


# --------------------------------------------------------------------------
# labels

def load_labels(path, radii: Sequence[int] = RADII) -> list[LabelRecord]:
    """Parse a label CSV, rejecting duplicates, foreign radii and records
    whose counts decrease with radius at a fixed (timestamp, sensor)."""
    allowed = set(int(r) for r in radii)
    records: list[LabelRecord] = []
    seen: set[tuple[int, str, int]] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != LABEL_HEADER:
            raise LabelFormatError(1, f"expected header {','.join(LABEL_HEADER)}")
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise LabelFormatError(rowno, f"expected 4 fields, got {len(row)}")
            try:
                ts = math.floor(float(row[0]))
                radius_f = float(row[2])
                count = int(row[3])
            except ValueError as exc:
                raise LabelFormatError(rowno, str(exc)) from None
            sensor = row[1].strip()
            if not sensor:
                raise LabelFormatError(rowno, "empty sensor id")
            if count < 0:
                raise LabelFormatError(rowno, "negative count")
            if radius_f != int(radius_f) or int(radius_f) not in allowed:
                raise RadiusDomainError(
                    f"row {rowno}: radius {row[2]} not in {sorted(allowed)}")
            key = (ts, sensor, int(radius_f))
            if key in seen:
                raise DuplicateLabelError(f"row {rowno}: duplicate key {key}")
            seen.add(key)
            records.append(LabelRecord(ts, sensor, int(radius_f), count))
    check_monotonic(records)
    return records


def check_monotonic(records: Iterable[LabelRecord]) -> None:
    by_key: dict[tuple[int, str], list[tuple[int, int]]] = defaultdict(list)
    for r in records:
        by_key[(r.timestamp, r.sensor_id)].append((r.radius, r.count))
    for key, pairs in by_key.items():
        pairs.sort()
        counts = [c for _, c in pairs]
        if any(b < a for a, b in zip(counts, counts[1:])):
            raise MonotonicityError(f"counts decrease with radius at {key}: {pairs}")


def write_labels(path, records: Iterable[LabelRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_HEADER)
        for r in sorted(records, key=lambda r: (r.timestamp, r.sensor_id, r.radius)):
            w.writerow((r.timestamp, r.sensor_id, r.radius, r.count))


# --------------------------------------------------------------------------
# statistics

def _at_radius(labels: Sequence[LabelRecord], radius) -> list[LabelRecord]:
    if not labels:
        raise InputError("empty label list")
    sel = [r for r in labels if r.radius == radius]
    if not sel:
        raise InputError(f"no labels at radius {radius}")
    return sel


def pedestrian_fraction(labels: Sequence[LabelRecord], radius) -> float:
    """Fraction of labelled seconds at ``radius`` with at least one pedestrian."""
    sel = _at_radius(labels, radius)
    return sum(1 for r in sel if r.count >= 1) / len(sel)


def hourly_fraction(labels: Sequence[LabelRecord], radius,
                    utc_offset_hours: float = 0.0) -> np.ndarray:
    """Per-hour-of-day positive fraction; hours without labels are NaN."""
    sel = _at_radius(labels, radius)
    ts = np.array([r.timestamp for r in sel], dtype=np.float64)
    pos = np.array([r.count >= 1 for r in sel], dtype=np.float64)
    hours = (np.floor((ts + utc_offset_hours * 3600.0) / 3600.0) % 24).astype(int)
    total = np.bincount(hours, minlength=24).astype(np.float64)
    hits = np.bincount(hours, weights=pos, minlength=24)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, hits / np.maximum(total, 1), np.nan)


def count_series(labels: Iterable[LabelRecord], sensor_id: str, radius,
                 start: int, length: int) -> np.ndarray:
    """Dense per-second counts for one (sensor, radius); -1 marks missing seconds."""
    out = np.full(length, -1, dtype=np.int64)
    for r in labels:
        if r.sensor_id == sensor_id and r.radius == radius:
            i = r.timestamp - start
            if 0 <= i < length:
                out[i] = r.count
    return out


# --------------------------------------------------------------------------
# alignment

@dataclass
class DatasetIndex:
    """Clips and labels aligned on a shared 1 Hz UTC timeline."""

    clips: list[tuple[AudioClip, str]]
    labels: dict[tuple[int, str, int], int]
    sessions: list[tuple[float, float]] = field(default_factory=list)
    dropped: int = 0

    @classmethod
    def build(cls, clips: Sequence[tuple[AudioClip, str]],
              records: Iterable[LabelRecord]) -> "DatasetIndex":
        spans = defaultdict(list)
        for clip, sensor in clips:
            spans[sensor].append((clip.start_time, clip.end_time))
        labels: dict[tuple[int, str, int], int] = {}
        dropped = 0
        for r in records:
            key = (r.timestamp, r.sensor_id, r.radius)
            if key in labels:
                raise DuplicateLabelError(f"duplicate key {key}")
            if any(a <= r.timestamp < b for a, b in spans.get(r.sensor_id, ())):
                labels[key] = r.count
            else:
                dropped += 1
        if dropped:
            logger.warning("dropped %d labels outside every clip", dropped)
        intervals = sorted(s for v in spans.values() for s in v)
        sessions: list[tuple[float, float]] = []
        for a, b in intervals:
            if sessions and a <= sessions[-1][1]:
                sessions[-1] = (sessions[-1][0], max(sessions[-1][1], b))
            else:
                sessions.append((a, b))
        return cls(list(clips), labels, sessions, dropped)

    def pairs(self):
        """Yield (clip, sensor_id, LabelRecord) for every aligned label."""
        for clip, sensor in self.clips:
            for (ts, sid, radius), count in sorted(self.labels.items()):
                if sid == sensor and clip.start_time <= ts < clip.end_time:
                    yield clip, sensor, LabelRecord(ts, sid, radius, count)

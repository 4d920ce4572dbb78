"""Synthetic pedestrian scenes with exact ground truth.

Walkers follow piecewise-linear ground paths. Per-second counts come
straight from their positions; the audio is seeded background noise plus
band-limited footstep bursts attenuated as ``level / (1 + d**2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.signal import lfilter

from .core_data import RADII, WORKING_RATE, AudioClip, LabelRecord
from .errors import InputError
from .geometry import SensorSite

BURST_SECONDS = 0.03
BURST_DECAY = 0.008
N_TEMPLATES = 32


@dataclass(frozen=True, eq=False)
class Walker:
    """``path`` rows are (t, x, y); position is linear between rows."""

    path: np.ndarray
    speed: float
    stride_period: float = 0.55
    footstep_band: tuple[float, float] = (1000.0, 3000.0)
    level: float = 1.0
    phase: float = 0.0

    def __post_init__(self):
        path = np.asarray(self.path, dtype=np.float64)
        if path.ndim != 2 or path.shape[1] != 3 or len(path) < 2:
            raise InputError("walker path needs at least two (t, x, y) rows")
        if np.any(np.diff(path[:, 0]) <= 0):
            raise InputError("walker path times must increase")
        if not (self.speed > 0 and self.stride_period > 0):
            raise InputError("speed and stride_period must be positive")
        object.__setattr__(self, "path", path)

    @property
    def t_start(self) -> float:
        return float(self.path[0, 0])

    @property
    def t_end(self) -> float:
        return float(self.path[-1, 0])

    def position(self, t) -> np.ndarray:
        """(n, 2) positions; NaN outside the walker's active interval."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        xy = np.column_stack([np.interp(t, self.path[:, 0], self.path[:, 1]),
                              np.interp(t, self.path[:, 0], self.path[:, 2])])
        xy[(t < self.t_start) | (t > self.t_end)] = np.nan
        return xy

    def step_times(self) -> np.ndarray:
        first = self.t_start + self.phase
        n = int(math.floor((self.t_end - first) / self.stride_period)) + 1
        return first + self.stride_period * np.arange(max(n, 0))

    @classmethod
    def straight(cls, start, end, t0: float, speed: float, **kw) -> "Walker":
        start, end = np.asarray(start, float), np.asarray(end, float)
        if not speed > 0:
            raise InputError(f"speed must be positive, got {speed}")
        dur = float(np.linalg.norm(end - start)) / speed
        return cls(np.array([[t0, *start], [t0 + dur, *end]]), speed, **kw)


def flat_profile() -> np.ndarray:
    return np.ones(24)


def lunchtime_profile(peak_hour: int = 12, night_level: float = 0.05) -> np.ndarray:
    """Daytime activity with a pronounced peak at ``peak_hour``."""
    h = np.arange(24)
    day = np.where((h >= 7) & (h <= 21), 0.5, night_level)
    peak = np.exp(-0.5 * (((h - peak_hour + 12) % 24 - 12) / 1.0) ** 2)
    return day + peak


@dataclass(frozen=True)
class SceneConfig:
    sites: tuple[SensorSite, ...]
    duration: int = 600
    seed: int = 0
    start_time: int = 1_690_000_000
    sample_rate: int = WORKING_RATE
    # arrivals: groups per hour, modulated by hour of day (UTC)
    arrival_rate: float = 80.0
    hourly_profile: tuple[float, ...] = tuple(flat_profile())
    group_extra_mean: float = 2.5
    layout: str = "crossing"          # "crossing" or "corridor"
    scene_radius: float = 12.0        # crossing: walkers traverse a disc this size
    corridor_margin: float = 12.0
    corridor_halfwidth: float = 1.5
    speed_range: tuple[float, float] = (1.0, 1.5)
    stride_range: tuple[float, float] = (0.5, 0.6)
    footstep_band: tuple[float, float] = (1000.0, 3000.0)
    level_jitter_db: float = 6.0
    # some walkers barely make a sound (soft soles)
    quiet_fraction: float = 0.3
    quiet_attenuation_db: float = 30.0
    # audio
    noise_rms: float = 0.005
    noise_spectrum: str = "lowpass"   # "white" or "lowpass"
    noise_cutoff: float = 500.0
    snr_db: float = 15.0
    snr_reference_m: float = 1.0
    walkers: tuple[Walker, ...] | None = None

    def __post_init__(self):
        if self.duration < 60:
            raise InputError("scene duration must be at least 60 s")
        if self.layout not in ("crossing", "corridor"):
            raise InputError(f"unknown layout {self.layout!r}")
        if not 0.0 <= self.quiet_fraction <= 1.0:
            raise InputError("quiet_fraction must lie in [0, 1]")
        if len(self.hourly_profile) != 24:
            raise InputError("hourly_profile needs 24 entries")

    @property
    def reference_level(self) -> float:
        """Footstep burst RMS at distance 0 for a walker with unit jitter."""
        return (self.noise_rms * 10 ** (self.snr_db / 20.0)
                * (1.0 + self.snr_reference_m ** 2))

    def with_walkers(self, walkers: Sequence[Walker]) -> "SceneConfig":
        return replace(self, walkers=tuple(walkers))


def corridor_sites(n: int = 6, spacing: float = 5.0, radii=RADII) -> tuple[SensorSite, ...]:
    return tuple(SensorSite(f"s{i + 1}", (i * spacing, 0.0), tuple(radii)) for i in range(n))


# --------------------------------------------------------------------------
# walkers

def _arrival_times(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    profile = np.asarray(cfg.hourly_profile, dtype=np.float64)
    peak = cfg.arrival_rate * profile.max() / 3600.0
    if peak <= 0:
        return np.zeros(0)
    n = rng.poisson(peak * cfg.duration)
    t = np.sort(rng.uniform(0.0, cfg.duration, n)) + cfg.start_time
    hours = (np.floor(t / 3600.0) % 24).astype(int)
    keep = rng.uniform(size=n) < profile[hours] / profile.max()
    return t[keep]


def sample_walkers(cfg: SceneConfig) -> list[Walker]:
    """Walkers for a scene: explicit ones if given, otherwise seeded arrivals."""
    if cfg.walkers is not None:
        return list(cfg.walkers)
    rng = np.random.default_rng(cfg.seed)
    centre = np.mean([s.ground_position for s in cfg.sites], axis=0)
    xs = [s.ground_position[0] for s in cfg.sites]
    ref = cfg.reference_level
    walkers = []
    for t0 in _arrival_times(cfg, rng):
        speed = rng.uniform(*cfg.speed_range)
        size = 1 + rng.poisson(cfg.group_extra_mean)
        if cfg.layout == "crossing":
            theta = rng.uniform(0, 2 * np.pi)
            b = rng.uniform(-cfg.scene_radius, cfg.scene_radius) * 0.999
            half = math.sqrt(cfg.scene_radius ** 2 - b ** 2)
            d = np.array([math.cos(theta), math.sin(theta)])
            n = np.array([-d[1], d[0]])
            a, z = centre + b * n - half * d, centre + b * n + half * d
        else:
            y = rng.uniform(-cfg.corridor_halfwidth, cfg.corridor_halfwidth)
            lo, hi = min(xs) - cfg.corridor_margin, max(xs) + cfg.corridor_margin
            a, z = np.array([lo, y]), np.array([hi, y])
            if rng.uniform() < 0.5:
                a, z = z, a
            d = (z - a) / np.linalg.norm(z - a)
            n = np.array([-d[1], d[0]])
        for _ in range(size):
            side = rng.uniform(-0.6, 0.6) if size > 1 else 0.0
            lag = rng.uniform(0.0, 1.0) if size > 1 else 0.0
            jitter = 10 ** (rng.uniform(-1, 1) * cfg.level_jitter_db / 20.0)
            if rng.uniform() < cfg.quiet_fraction:
                jitter *= 10 ** (-cfg.quiet_attenuation_db / 20.0)
            stride = rng.uniform(*cfg.stride_range)
            walkers.append(Walker.straight(
                a + side * n, z + side * n, t0 + lag, speed,
                stride_period=stride, footstep_band=cfg.footstep_band,
                level=ref * jitter, phase=rng.uniform(0, stride)))
    return walkers


# --------------------------------------------------------------------------
# labels

def _count_grid(walkers: Sequence[Walker], sites: Sequence[SensorSite],
                start: int, duration: int) -> dict[str, np.ndarray]:
    grids = {s.sensor_id: np.zeros((len(s.radii), duration), dtype=np.int64) for s in sites}
    for w in walkers:
        lo = max(start, math.ceil(w.t_start))
        hi = min(start + duration - 1, math.floor(w.t_end))
        if hi < lo:
            continue
        secs = np.arange(lo, hi + 1)
        xy = w.position(secs)
        for s in sites:
            d = np.hypot(xy[:, 0] - s.ground_position[0], xy[:, 1] - s.ground_position[1])
            inside = d[None, :] <= np.asarray(s.radii, dtype=np.float64)[:, None]
            grids[s.sensor_id][:, secs - start] += inside
    return grids


def simulate_counts(cfg: SceneConfig, walkers: Sequence[Walker] | None = None) -> list[LabelRecord]:
    """Exact per-second, per-site, per-radius counts (closed discs)."""
    walkers = sample_walkers(cfg) if walkers is None else walkers
    grids = _count_grid(walkers, cfg.sites, cfg.start_time, cfg.duration)
    out = []
    for s in cfg.sites:
        g = grids[s.sensor_id]
        for j, r in enumerate(s.radii):
            out.extend(LabelRecord(cfg.start_time + i, s.sensor_id, r, int(c))
                       for i, c in enumerate(g[j]))
    out.sort(key=lambda r: (r.timestamp, r.sensor_id, r.radius))
    return out


def generate_flow_traces(cfg: SceneConfig) -> list[LabelRecord]:
    """Corridor scene labels: downstream counts lag upstream by spacing/speed."""
    if cfg.layout != "corridor":
        cfg = replace(cfg, layout="corridor")
    return simulate_counts(cfg)


# --------------------------------------------------------------------------
# audio

def _burst_templates(rate: int, band: tuple[float, float], rng) -> np.ndarray:
    n = int(round(BURST_SECONDS * rate))
    noise = rng.standard_normal((N_TEMPLATES, n))
    spec = np.fft.rfft(noise, axis=1)
    f = np.fft.rfftfreq(n, 1.0 / rate)
    spec[:, (f < band[0]) | (f > band[1])] = 0.0
    env = np.exp(-np.arange(n) / (BURST_DECAY * rate)) * np.minimum(1.0, np.arange(n) / 16.0)
    x = np.fft.irfft(spec, n, axis=1) * env
    return x / np.sqrt(np.mean(x ** 2, axis=1, keepdims=True))


def background_noise(cfg: SceneConfig, n: int, rng) -> np.ndarray:
    white = rng.standard_normal(n)
    if cfg.noise_spectrum == "white":
        return cfg.noise_rms * white
    if cfg.noise_spectrum != "lowpass":
        raise InputError(f"unknown noise spectrum {cfg.noise_spectrum!r}")
    a = math.exp(-2 * math.pi * cfg.noise_cutoff / cfg.sample_rate)
    # a one-pole low-pass has output variance (1 - a) / (1 + a) for unit white input
    y = lfilter([1.0 - a], [1.0, -a], white)
    return cfg.noise_rms * y / math.sqrt((1 - a) / (1 + a))


def footstep_events(cfg: SceneConfig, site: SensorSite,
                    walkers: Sequence[Walker]) -> list[tuple[int, float, float]]:
    """(walker index, onset time, amplitude at the site) for every step in the clip."""
    events = []
    t_lo, t_hi = cfg.start_time, cfg.start_time + cfg.duration
    for i, w in enumerate(walkers):
        steps = w.step_times()
        steps = steps[(steps >= t_lo) & (steps < t_hi)]
        if steps.size == 0:
            continue
        xy = w.position(steps)
        d = np.hypot(xy[:, 0] - site.ground_position[0], xy[:, 1] - site.ground_position[1])
        amp = w.level / (1.0 + d ** 2)
        events.extend((i, float(t), float(a)) for t, a in zip(steps, amp))
    return events


def render_audio(cfg: SceneConfig, site: SensorSite,
                 walkers: Sequence[Walker] | None = None) -> AudioClip:
    walkers = sample_walkers(cfg) if walkers is None else walkers
    rate = cfg.sample_rate
    n = cfg.duration * rate
    # audio randomness is separate from the walker stream and keyed by site
    site_key = sum(ord(c) * 31 ** i for i, c in enumerate(site.sensor_id)) % (2 ** 31)
    rng = np.random.default_rng([cfg.seed, 1, site_key])
    x = background_noise(cfg, n, rng)
    templates = {}
    for i, t, amp in footstep_events(cfg, site, walkers):
        band = tuple(walkers[i].footstep_band)
        if band not in templates:
            templates[band] = _burst_templates(rate, band, np.random.default_rng([cfg.seed, 2]))
        tpl = templates[band][rng.integers(N_TEMPLATES)]
        k = int(round((t - cfg.start_time) * rate))
        m = min(tpl.size, n - k)
        if m > 0:
            x[k:k + m] += amp * tpl[:m]
    return AudioClip(np.clip(x, -1.0, 1.0), rate, float(cfg.start_time))

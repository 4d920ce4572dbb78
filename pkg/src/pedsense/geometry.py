"""Per-second pedestrian counts inside circular ground-plane buffers.

Person detections arrive as image-space bounding boxes. Each box is reduced
to its bottom-centre pixel, back-projected through a camera-to-ground
homography, and tested against closed discs around every sensor pole.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core_data import RADII, LabelRecord
from .errors import DegenerateCalibrationError, InputError

logger = logging.getLogger(__name__)

W_EPS = 1e-9
DEFAULT_CONFIDENCE = 0.7


class TimestampGapWarning(UserWarning):
    pass


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    confidence: float = 1.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InputError(f"degenerate box {self}")
        if not math.isfinite(self.confidence):
            raise InputError("box confidence must be finite")


@dataclass(frozen=True)
class DetectionFrame:
    timestamp: int
    camera_id: str
    boxes: tuple[BoundingBox, ...] = ()


@dataclass(frozen=True, eq=False)
class CameraCalibration:
    """Pixel -> ground-plane (metres) homography.

    ``pixel_points`` are kept when known so that points on the far side of
    the horizon line can be told apart from valid ground points.
    """

    homography: np.ndarray
    pixel_points: np.ndarray | None = None

    def __post_init__(self):
        h = np.asarray(self.homography, dtype=np.float64)
        if h.shape != (3, 3) or not np.all(np.isfinite(h)):
            raise DegenerateCalibrationError("homography must be a finite 3x3 matrix")
        if abs(np.linalg.det(h)) <= 1e-9:
            raise DegenerateCalibrationError("homography is singular")
        object.__setattr__(self, "homography", h)
        if self.pixel_points is not None:
            object.__setattr__(self, "pixel_points",
                               np.asarray(self.pixel_points, dtype=np.float64))

    def _reference_sign(self) -> float:
        if self.pixel_points is None:
            return 0.0
        c = self.pixel_points.mean(axis=0)
        return float(np.sign(self.homography[2] @ np.array([c[0], c[1], 1.0])))

    def to_ground(self, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map (n, 2) pixels to ground; returns (points, valid mask)."""
        pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        hom = np.column_stack([pixels, np.ones(len(pixels))]) @ self.homography.T
        w = hom[:, 2]
        valid = np.abs(w) >= W_EPS
        sign = self._reference_sign()
        if sign:
            valid &= np.sign(w) == sign
        safe_w = np.where(valid, w, 1.0)
        return hom[:, :2] / safe_w[:, None], valid


@dataclass(frozen=True)
class SensorSite:
    sensor_id: str
    ground_position: tuple[float, float]
    radii: tuple[float, ...] = RADII

    def __post_init__(self):
        radii = tuple(self.radii)
        if not radii or any(r <= 0 for r in radii) or list(radii) != sorted(set(radii)):
            raise InputError(f"radii must be non-empty, positive and ascending: {radii}")


@dataclass
class FrameCounts:
    counts: dict
    skipped: int = 0


# --------------------------------------------------------------------------

def _check_not_collinear(pts: np.ndarray, what: str) -> None:
    scale = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1e-12)
    for a, b, c in itertools.combinations(range(4), 3):
        u, v = pts[b] - pts[a], pts[c] - pts[a]
        if abs(u[0] * v[1] - u[1] * v[0]) <= 1e-9 * scale * scale:
            raise DegenerateCalibrationError(f"collinear {what} points {a},{b},{c}")


def _normalizer(pts: np.ndarray) -> np.ndarray:
    mean = pts.mean(axis=0)
    d = np.sqrt(((pts - mean) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2) / d
    return np.array([[s, 0, -s * mean[0]], [0, s, -s * mean[1]], [0, 0, 1.0]])


def estimate_homography(pixel_points, ground_points) -> CameraCalibration:
    """Direct linear transform from four pixel/ground correspondences.

    Points are Hartley-normalised before the SVD; the result is scaled so
    the bottom-right entry is 1.
    """
    px = np.asarray(pixel_points, dtype=np.float64)
    gd = np.asarray(ground_points, dtype=np.float64)
    if px.shape != (4, 2) or gd.shape != (4, 2):
        raise InputError("need exactly 4 pixel and 4 ground points")
    _check_not_collinear(px, "pixel")
    _check_not_collinear(gd, "ground")

    tp, tg = _normalizer(px), _normalizer(gd)
    p = np.column_stack([px, np.ones(4)]) @ tp.T
    g = np.column_stack([gd, np.ones(4)]) @ tg.T
    rows = []
    for (x, y, _), (u, v, _) in zip(p, g):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y, -u])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y, -v])
    a = np.asarray(rows)
    _, s, vt = np.linalg.svd(a)
    if s[-2] <= 1e-12 * s[0]:
        raise DegenerateCalibrationError("rank-deficient DLT system")
    h = np.linalg.inv(tg) @ vt[-1].reshape(3, 3) @ tp
    if abs(h[2, 2]) < 1e-12:
        raise DegenerateCalibrationError("homography maps the origin to infinity")
    h = h / h[2, 2]
    calib = CameraCalibration(h, px)
    mapped, valid = calib.to_ground(px)
    err = np.max(np.linalg.norm(mapped - gd, axis=1))
    if not valid.all() or err >= 1e-6:
        raise DegenerateCalibrationError(f"reprojection error {err:.3g} m")
    return calib


def box_anchor(box: BoundingBox) -> tuple[float, float]:
    """Bottom-centre pixel of a box (image y grows downwards)."""
    return ((box.x_min + box.x_max) / 2.0, box.y_max)


def label_frame(frame: DetectionFrame, calib: CameraCalibration,
                site: SensorSite) -> FrameCounts:
    """Count anchors inside each closed buffer disc of ``site``."""
    counts = {r: 0 for r in site.radii}
    if not frame.boxes:
        return FrameCounts(counts, 0)
    anchors = np.array([box_anchor(b) for b in frame.boxes])
    ground, valid = calib.to_ground(anchors)
    skipped = int((~valid).sum())
    if skipped:
        logger.debug("frame %s/%s: skipped %d anchors at infinity",
                     frame.camera_id, frame.timestamp, skipped)
    d = np.hypot(ground[valid, 0] - site.ground_position[0],
                 ground[valid, 1] - site.ground_position[1])
    for r in site.radii:
        counts[r] = int(np.count_nonzero(d <= r))
    return FrameCounts(counts, skipped)


def _radius_key(r):
    return int(r) if float(r).is_integer() else float(r)


def label_stream(frames: Sequence[DetectionFrame],
                 calib: CameraCalibration | Mapping[str, CameraCalibration],
                 sites: Sequence[SensorSite]) -> list[LabelRecord]:
    """One LabelRecord per (frame, site, radius), zero counts included.

    ``calib`` is either a single calibration or a mapping keyed by camera id.
    Output is sorted by (timestamp, sensor_id, radius).
    """
    stamps = [f.timestamp for f in frames]
    if any(b < a for a, b in zip(stamps, stamps[1:])):
        raise InputError("detection frames are not sorted by timestamp")
    gaps = sum(1 for a, b in zip(stamps, stamps[1:]) if b - a > 1)
    if gaps:
        warnings.warn(f"{gaps} timestamp gaps in detection stream", TimestampGapWarning)

    records = []
    skipped = 0
    for frame in frames:
        c = calib if isinstance(calib, CameraCalibration) else calib.get(frame.camera_id)
        if c is None:
            raise InputError(f"no calibration for camera {frame.camera_id!r}")
        for site in sites:
            fc = label_frame(frame, c, site)
            skipped += fc.skipped
            records.extend(LabelRecord(int(frame.timestamp), site.sensor_id, _radius_key(r), n)
                           for r, n in fc.counts.items())
    if skipped:
        logger.warning("skipped %d box evaluations mapping to infinity", skipped)
    records.sort(key=lambda r: (r.timestamp, r.sensor_id, r.radius))
    return records


# --------------------------------------------------------------------------
# file formats

def read_detections(path, min_confidence: float = DEFAULT_CONFIDENCE) -> list[DetectionFrame]:
    """Read JSON Lines detections; boxes under ``min_confidence`` are dropped."""
    frames = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                boxes = tuple(BoundingBox(*map(float, b)) for b in obj.get("boxes", ()))
                frames.append(DetectionFrame(int(obj["timestamp"]), str(obj["camera_id"]),
                                             tuple(b for b in boxes
                                                   if b.confidence >= min_confidence)))
            except (KeyError, TypeError, ValueError) as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
    return frames


def write_detections(path, frames: Iterable[DetectionFrame]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in frames:
            boxes = [[b.x_min, b.y_min, b.x_max, b.y_max, b.confidence] for b in f.boxes]
            fh.write(json.dumps({"timestamp": f.timestamp, "camera_id": f.camera_id,
                                 "boxes": boxes}) + "\n")


def read_calibration(path) -> dict[str, CameraCalibration]:
    """Calibration JSON: ``{"cameras": {id: {"pixel": [[u, v]]*4, "ground": [[x, y]]*4}}}``."""
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        cams = obj["cameras"]
        return {cid: estimate_homography(c["pixel"], c["ground"]) for cid, c in cams.items()}
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: bad calibration file ({exc})") from None


def sites_from_config(entries) -> list[SensorSite]:
    out = []
    for e in entries:
        out.append(SensorSite(str(e["sensor_id"]), tuple(map(float, e["position"])),
                              tuple(e.get("radii", RADII))))
    return out

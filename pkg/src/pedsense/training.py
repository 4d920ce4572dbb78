"""Imbalance-aware detector training, evaluation and experiment grids."""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np
import torch

from .core_data import LabelRecord
from .detector import Detector, DetectorConfig
from .errors import DivergenceError, InputError, NonFiniteError
from .frontend import FrontendConfig, clip_to_sequence
from .neural import ops
from .neural.optim import SgdConfig, sgd_step

logger = logging.getLogger(__name__)

# batch_size counts 10 s clips (80 seconds of audio per batch)
DEFAULT_SGD = SgdConfig(learning_rate=0.003, momentum=0.9, batch_size=8, epochs=15, seed=0)


@dataclass(frozen=True)
class ThresholdConfig:
    train_threshold: int = 1
    test_threshold: int = 1
    radius: int = 6

    def __post_init__(self):
        if self.train_threshold < 1 or self.test_threshold < 1:
            raise InputError("pedestrian count thresholds must be >= 1")


@dataclass
class WeightedLossTerms:
    loss_pos: float
    loss_neg: float
    num_pos: int
    num_neg: int
    lam: float


@dataclass
class EvalReport:
    recall_pos: float | None
    recall_neg: float | None
    macro_accuracy: float
    confusion: np.ndarray          # [[TN, FP], [FN, TP]]
    support_pos: int
    support_neg: int
    flagged: bool = False          # a class had zero support

    def to_row(self) -> dict:
        return {"recall_pos": self.recall_pos, "recall_neg": self.recall_neg,
                "macro_acc": self.macro_accuracy, "support_pos": self.support_pos,
                "support_neg": self.support_neg}


# --------------------------------------------------------------------------
# labels and data

def binarize_labels(records: Sequence[LabelRecord], cfg: ThresholdConfig,
                    threshold: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(timestamps, targets) at ``cfg.radius`` with target = count >= threshold.

    ``threshold`` defaults to ``cfg.train_threshold``.
    """
    thr = cfg.train_threshold if threshold is None else threshold
    sel = sorted((r for r in records if r.radius == cfg.radius), key=lambda r: r.timestamp)
    ts = np.array([r.timestamp for r in sel], dtype=np.int64)
    return ts, np.array([r.count >= thr for r in sel], dtype=np.int64)


@dataclass(eq=False)
class DetectorDataset:
    """Per-second mel patches with counts for every radius, on one timeline."""

    patches: np.ndarray                 # (S, F, M) float32
    counts: dict[int, np.ndarray]       # radius -> (S,) int
    timestamps: np.ndarray              # (S,)

    def __len__(self):
        return len(self.timestamps)

    def targets(self, radius: int, threshold: int) -> np.ndarray:
        if radius not in self.counts:
            raise InputError(f"dataset has no labels at radius {radius}")
        return (self.counts[radius] >= threshold).astype(np.int64)

    def subset(self, lo: int, hi: int) -> "DetectorDataset":
        return DetectorDataset(self.patches[lo:hi], {r: c[lo:hi] for r, c in self.counts.items()},
                               self.timestamps[lo:hi])

    @classmethod
    def from_clip(cls, clip, records: Sequence[LabelRecord], sensor_id: str,
                  frontend: FrontendConfig = FrontendConfig()) -> "DetectorDataset":
        seq = clip_to_sequence(clip, frontend)
        lookup = {(r.timestamp, r.radius): r.count for r in records if r.sensor_id == sensor_id}
        radii = sorted({r for _, r in lookup})
        keep = [i for i, t in enumerate(seq.timestamps)
                if all((int(t), r) in lookup for r in radii)]
        if len(keep) != len(seq.timestamps):
            logger.warning("dropping %d seconds without labels", len(seq.timestamps) - len(keep))
        ts = seq.timestamps[keep]
        counts = {r: np.array([lookup[(int(t), r)] for t in ts], dtype=np.int64) for r in radii}
        return cls(seq.patches[keep].astype(np.float32), counts, ts)


def time_block_split(data: DetectorDataset, fractions=(0.7, 0.1, 0.2)) -> list[DetectorDataset]:
    """Contiguous, disjoint time blocks in the given proportions."""
    if not np.isclose(sum(fractions), 1.0):
        raise InputError("split fractions must sum to 1")
    edges = np.round(np.cumsum((0.0,) + tuple(fractions)) * len(data)).astype(int)
    return [data.subset(a, b) for a, b in zip(edges[:-1], edges[1:])]


def clip_starts(n: int, length: int) -> np.ndarray:
    """Start indices of the non-overlapping full-length clips in ``n`` seconds."""
    return np.arange(0, n - length + 1, length)


# --------------------------------------------------------------------------
# sampling and loss

def balanced_batches(labels, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """One epoch of index batches with the minority class oversampled.

    Every majority-class index appears exactly once per epoch, in seeded
    shuffled order; each batch pairs them with as many minority indices
    drawn uniformly with replacement, so the expected positive fraction
    of a batch is 0.5.
    """
    labels = np.asarray(labels).astype(bool)
    pos, neg = np.flatnonzero(labels), np.flatnonzero(~labels)
    if pos.size == 0 or neg.size == 0:
        raise InputError("balanced sampling needs at least one sample of each class")
    major, minor = (neg, pos) if neg.size >= pos.size else (pos, neg)
    rng = np.random.default_rng(seed)
    order = rng.permutation(major)
    per = max(1, batch_size // 2)
    for s in range(0, order.size, per):
        maj = order[s:s + per]
        mnr = minor[rng.integers(0, minor.size, maj.size)]
        batch = np.concatenate([maj, mnr])
        yield batch[rng.permutation(batch.size)]


def lambda_weight(num_pos: int, num_neg: int) -> float:
    """Positive-class weight: (1/n+) / (1/n+ + 1/n-), 0 without positives.

    A batch without negatives gets weight 1 (the symmetric limit).
    """
    if num_pos == 0:
        return 0.0
    if num_neg == 0:
        return 1.0
    return (1.0 / num_pos) / (1.0 / num_pos + 1.0 / num_neg)


def weighted_loss(probs: torch.Tensor, targets: torch.Tensor):
    """lam * L_BCE+ + (1 - lam) * L_BCE-, with the summed class losses."""
    terms = ops.bce_loss(probs.reshape(-1), targets.reshape(-1))
    y = targets.reshape(-1)
    n_pos = int(y.sum().item())
    n_neg = int(y.numel() - n_pos)
    lam = lambda_weight(n_pos, n_neg)
    loss = lam * terms.loss_pos + (1.0 - lam) * terms.loss_neg
    return loss, WeightedLossTerms(float(terms.loss_pos.detach()), float(terms.loss_neg.detach()), n_pos, n_neg, lam)


# --------------------------------------------------------------------------
# evaluation

def evaluate_predictions(predictions, targets) -> EvalReport:
    """Per-class recall and their unweighted mean from binary vectors."""
    p = np.asarray(predictions).astype(bool)
    y = np.asarray(targets).astype(bool)
    if p.shape != y.shape:
        raise InputError("predictions and targets differ in length")
    tp = int(np.sum(p & y))
    fn = int(np.sum(~p & y))
    tn = int(np.sum(~p & ~y))
    fp = int(np.sum(p & ~y))
    rp = tp / (tp + fn) if tp + fn else None
    rn = tn / (tn + fp) if tn + fp else None
    defined = [r for r in (rp, rn) if r is not None]
    macro = float(np.mean(defined)) if defined else float("nan")
    return EvalReport(rp, rn, macro, np.array([[tn, fp], [fn, tp]]), tp + fn, tn + fp,
                      flagged=len(defined) < 2)


def evaluate(model: Detector, data: DetectorDataset, cfg: ThresholdConfig,
             decision: float | None = None) -> EvalReport:
    """Score a detector on ``data`` at ``cfg.test_threshold``."""
    decision = model.config.threshold if decision is None else decision
    probs = model.predict_patches(data.patches)
    return evaluate_predictions(probs >= decision, data.targets(cfg.radius, cfg.test_threshold))


# --------------------------------------------------------------------------
# training

@dataclass
class TrainingLog:
    train_loss: list[float] = field(default_factory=list)
    val_macro: list[float] = field(default_factory=list)
    best_epoch: int | None = None

    def to_json(self) -> dict:
        return asdict(self)


def _objective(probs, targets):
    loss, t = weighted_loss(probs, targets)
    # divide by the summed sample weights: a balanced mean over the batch
    norm = t.lam * t.num_pos + (1.0 - t.lam) * t.num_neg
    return loss / norm, t


def train_detector(train: DetectorDataset, val: DetectorDataset | None,
                   config: DetectorConfig = DetectorConfig(), sgd: SgdConfig = DEFAULT_SGD,
                   thresholds: ThresholdConfig = ThresholdConfig(),
                   dtype=torch.float32) -> tuple[Detector, TrainingLog]:
    """Train on non-overlapping context-length clips of ``train``.

    Clips count as positive when any second reaches the training threshold;
    batches oversample the minority clip class. Keeps the parameters from
    the epoch with the best validation macro accuracy (first on ties).
    """
    torch.manual_seed(sgd.seed)
    model = Detector(config, seed=sgd.seed, dtype=dtype)
    model.fit_input_stats(train.patches)
    log = TrainingLog()
    if sgd.epochs == 0:
        return model, log

    ctx = config.aggregator.context_seconds
    starts = clip_starts(len(train), ctx)
    if starts.size == 0:
        raise InputError(f"training block shorter than one {ctx}-second clip")
    y_sec = train.targets(thresholds.radius, thresholds.train_threshold)
    y_clip = np.array([y_sec[s:s + ctx].any() for s in starts])
    patches = torch.as_tensor(train.patches, dtype=dtype)
    targets = torch.as_tensor(y_sec, dtype=dtype)
    offs = torch.arange(ctx)

    state: dict[str, torch.Tensor] = {}
    best = (-1.0, None)
    val_cfg = ThresholdConfig(thresholds.train_threshold, thresholds.train_threshold,
                              thresholds.radius)
    for epoch in range(sgd.epochs):
        model.train()
        losses = []
        for batch in balanced_batches(y_clip, sgd.batch_size, seed=sgd.seed * 100003 + epoch):
            idx = torch.as_tensor(starts[batch])[:, None] + offs[None, :]
            try:
                probs = model(patches[idx])
                loss, _ = _objective(probs, targets[idx])
                model.zero_grad(set_to_none=True)
                loss.backward()
            except NonFiniteError as exc:
                raise DivergenceError(f"epoch {epoch + 1}: {exc}") from exc
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"epoch {epoch + 1}: loss is {loss.item()}")
            sgd_step(model.named_parameters(), sgd, state)
            losses.append(loss.item())
        log.train_loss.append(float(np.mean(losses)))
        if val is not None and len(val):
            model.eval()
            macro = evaluate(model, val, val_cfg).macro_accuracy
            log.val_macro.append(float(macro))
            if macro > best[0]:
                best = (macro, copy.deepcopy(model.state_dict()))
                log.best_epoch = epoch + 1
        logger.info("epoch %d loss %.4f val %s", epoch + 1, log.train_loss[-1],
                    log.val_macro[-1] if log.val_macro else "-")
    if best[1] is not None:
        model.load_state_dict(best[1])
    else:
        log.best_epoch = sgd.epochs
    return model, log


# --------------------------------------------------------------------------
# experiments

@dataclass
class ExperimentConfig:
    radii: tuple[int, ...] = (1, 3, 6, 9)
    train_thresholds: tuple[int, ...] = (1, 2, 3, 4)
    test_thresholds: tuple[int, ...] = (1, 2, 3, 4)
    seed: int = 0
    epochs: int = DEFAULT_SGD.epochs
    batch_size: int = DEFAULT_SGD.batch_size
    lr: float = DEFAULT_SGD.learning_rate
    momentum: float = 0.9
    grid_radius: int = 6

    @property
    def sgd(self) -> SgdConfig:
        return SgdConfig(self.lr, self.momentum, self.batch_size, self.epochs, self.seed)

    @classmethod
    def from_mapping(cls, obj: Mapping) -> "ExperimentConfig":
        known = {k: v for k, v in obj.items() if k in cls.__dataclass_fields__}
        for k in ("radii", "train_thresholds", "test_thresholds"):
            if k in known:
                known[k] = tuple(int(x) for x in known[k])
        return cls(**known)


@dataclass
class GridCell:
    radius: int
    train_thr: int
    test_thr: int
    report: EvalReport

    def to_row(self) -> dict:
        return {"radius": self.radius, "train_thr": self.train_thr,
                "test_thr": self.test_thr, **self.report.to_row()}


def radius_experiment(train: DetectorDataset, val, test: DetectorDataset,
                      radii: Sequence[int] = (1, 3, 6, 9), config: DetectorConfig = DetectorConfig(),
                      sgd: SgdConfig = DEFAULT_SGD, threshold: int = 1) -> list[GridCell]:
    """Same audio, radius-specific labels: one train/evaluate cycle per radius."""
    cells = []
    for r in radii:
        cfg = ThresholdConfig(threshold, threshold, r)
        model, _ = train_detector(train, val, config, sgd, cfg)
        cells.append(GridCell(r, threshold, threshold, evaluate(model, test, cfg)))
    return cells


def threshold_grid(train: DetectorDataset, val, test: DetectorDataset, radius: int = 6,
                   train_thresholds=(1, 2, 3, 4), test_thresholds=(1, 2, 3, 4),
                   config: DetectorConfig = DetectorConfig(),
                   sgd: SgdConfig = DEFAULT_SGD) -> list[GridCell]:
    """Train once per training threshold, evaluate at every test threshold."""
    cells = []
    for i in train_thresholds:
        model, _ = train_detector(train, val, config, sgd, ThresholdConfig(i, i, radius))
        for j in test_thresholds:
            cells.append(GridCell(radius, i, j, evaluate(model, test, ThresholdConfig(i, j, radius))))
    return cells


def grid_matrix(cells: Sequence[GridCell]) -> np.ndarray:
    trains = sorted({c.train_thr for c in cells})
    tests = sorted({c.test_thr for c in cells})
    m = np.full((len(trains), len(tests)), np.nan)
    for c in cells:
        m[trains.index(c.train_thr), tests.index(c.test_thr)] = c.report.macro_accuracy
    return m


REPORT_FIELDS = ("radius", "train_thr", "test_thr", "recall_pos", "recall_neg", "macro_acc",
                 "support_pos", "support_neg")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_report_csv(path, cells: Sequence[GridCell]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for c in cells:
            row = c.to_row()
            w.writerow([_fmt(row[k]) for k in REPORT_FIELDS])


def write_report_json(path, cells: Sequence[GridCell], extra: Mapping | None = None) -> None:
    rows = [{k: c.to_row()[k] for k in REPORT_FIELDS} for c in cells]
    macro = [r["macro_acc"] for r in rows if r["macro_acc"] == r["macro_acc"]]
    doc = {"cells": rows, "mean_macro_acc": float(np.mean(macro)) if macro else None,
           **(extra or {})}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")

"""Next-second pedestrian-flow prediction from an 11 s window of counts."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .core_data import RADII, LabelRecord
from .errors import InputError, ShapeError
from .neural import ops
from .neural.checkpoint import load_checkpoint, save_checkpoint
from .neural.init import kaiming_uniform, xavier_uniform
from .neural.optim import SgdConfig, sgd_step

WINDOW = 11
C_MAX = 8
FLOW_SGD = SgdConfig(learning_rate=0.001, momentum=0.9, batch_size=4, epochs=25, seed=0)


def column_order(sensors: Sequence[str], radii: Sequence[int] = RADII) -> list[tuple[str, int]]:
    """Count-column layout: sensor-major, radius-minor. The timestamp is the last column."""
    return [(s, int(r)) for s in sensors for r in radii]


@dataclass(eq=False)
class FlowSet:
    """Windows with raw counts; ``inputs`` holds the normalised copy once stats exist."""

    raw: np.ndarray            # (N, 11, C+1) counts then Unix timestamp
    targets: np.ndarray        # (N, C) counts of the following second
    timestamps: np.ndarray     # (N,) target timestamps
    columns: list[tuple[str, int]]
    inputs: np.ndarray | None = None
    gap_skipped: int = 0
    zero_excluded: int = 0

    def __len__(self):
        return len(self.targets)

    def take(self, idx) -> "FlowSet":
        return FlowSet(self.raw[idx], self.targets[idx], self.timestamps[idx], self.columns,
                       None if self.inputs is None else self.inputs[idx])


@dataclass
class NormalizationStats:
    mean: np.ndarray   # (C+1,)
    std: np.ndarray    # (C+1,), floored

    STD_FLOOR = 1e-8

    @classmethod
    def fit(cls, raw: np.ndarray) -> "NormalizationStats":
        rows = raw.reshape(-1, raw.shape[-1])
        return cls(rows.mean(axis=0), np.maximum(rows.std(axis=0), cls.STD_FLOOR))

    def apply(self, raw: np.ndarray) -> np.ndarray:
        return (raw - self.mean) / self.std

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, obj) -> "NormalizationStats":
        return cls(np.asarray(obj["mean"], dtype=np.float64), np.asarray(obj["std"], dtype=np.float64))


# --------------------------------------------------------------------------
# windows

def count_matrix(records: Sequence[LabelRecord], sensors: Sequence[str],
                 radii: Sequence[int] = RADII):
    """(timestamps, counts) over the seconds where all sensor-radius series are present."""
    cols = {c: i for i, c in enumerate(column_order(sensors, radii))}
    table: dict[int, np.ndarray] = {}
    seen: dict[int, np.ndarray] = {}
    for r in records:
        j = cols.get((r.sensor_id, r.radius))
        if j is None:
            continue
        if r.timestamp not in table:
            table[r.timestamp] = np.zeros(len(cols), dtype=np.int64)
            seen[r.timestamp] = np.zeros(len(cols), dtype=bool)
        table[r.timestamp][j] = r.count
        seen[r.timestamp][j] = True
    ts = np.array(sorted(t for t in table if seen[t].all()), dtype=np.int64)
    counts = np.array([table[t] for t in ts], dtype=np.int64).reshape(len(ts), len(cols))
    return ts, counts


def build_windows(records: Sequence[LabelRecord], sensors: Sequence[str],
                  radii: Sequence[int] = RADII, window: int = WINDOW) -> FlowSet:
    """Every run of ``window + 1`` complete consecutive seconds gives one sample.

    Windows whose input count cells are all zero are dropped. A start
    whose span would cross a missing second is skipped and counted in
    ``gap_skipped``.
    """
    if len(sensors) == 0:
        raise InputError("no sensors given")
    ts, counts = count_matrix(records, sensors, radii)
    cols = column_order(sensors, radii)
    n_cols = len(cols)
    span = window + 1
    xs, ys, tt = [], [], []
    gap_skipped = zero_excluded = 0
    # split into runs of consecutive seconds
    breaks = np.flatnonzero(np.diff(ts) != 1) + 1
    runs = np.split(np.arange(len(ts)), breaks)
    for k, run in enumerate(runs):
        if run.size == 0:
            continue
        if k + 1 < len(runs):
            gap_skipped += min(window, run.size)
        for s in range(run.size - span + 1):
            i = run[s]
            block = counts[i:i + window]
            if not block.any():
                zero_excluded += 1
                continue
            x = np.empty((window, n_cols + 1), dtype=np.float64)
            x[:, :n_cols] = block
            x[:, n_cols] = ts[i:i + window]
            xs.append(x)
            ys.append(counts[i + window])
            tt.append(ts[i + window])
    raw = np.array(xs, dtype=np.float64).reshape(len(xs), window, n_cols + 1)
    targets = np.array(ys, dtype=np.int64).reshape(len(ys), n_cols)
    return FlowSet(raw, targets, np.array(tt, dtype=np.int64), cols,
                   gap_skipped=gap_skipped, zero_excluded=zero_excluded)


def split_and_normalize(windows: FlowSet, ratio: float = 0.8, seed: int = 0,
                        block: bool = False) -> tuple[FlowSet, FlowSet, NormalizationStats]:
    """Seeded random split over windows (or a chronological one with ``block``);
    statistics come from the training windows only."""
    n = len(windows)
    if n < 2:
        raise InputError(f"need at least 2 windows to split, got {n}")
    n_train = min(n - 1, max(1, int(round(ratio * n))))
    order = np.arange(n) if block else np.random.default_rng(seed).permutation(n)
    train, test = windows.take(np.sort(order[:n_train])), windows.take(np.sort(order[n_train:]))
    stats = NormalizationStats.fit(train.raw)
    train.inputs, test.inputs = stats.apply(train.raw), stats.apply(test.raw)
    return train, test, stats


# --------------------------------------------------------------------------
# model

@dataclass(frozen=True)
class FlowConfig:
    window: int = WINDOW
    n_columns: int = 25          # count columns + timestamp
    channels: tuple[int, ...] = (16, 32, 64, 64)
    pool_after: int = 2
    hidden: int = 512
    c_max: int = C_MAX

    @property
    def n_targets(self) -> int:
        return self.n_columns - 1

    @property
    def n_classes(self) -> int:
        return self.c_max + 1

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj) -> "FlowConfig":
        obj = dict(obj)
        obj["channels"] = tuple(obj.get("channels", (16, 32, 64, 64)))
        return cls(**obj)


class FlowCNN(nn.Module):
    """4 conv (3x3, pad 1) + one 2x2 max pool + 2 fully connected layers."""

    def __init__(self, config: FlowConfig = FlowConfig(), seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(int(seed))
        self.conv_w = nn.ParameterList()
        self.conv_b = nn.ParameterList()
        c_in = 1
        for c_out in config.channels:
            self.conv_w.append(nn.Parameter(kaiming_uniform((c_out, c_in, 3, 3), c_in * 9, gen).to(dtype)))
            self.conv_b.append(nn.Parameter(torch.zeros(c_out, dtype=dtype)))
            c_in = c_out
        flat = c_in * (config.window // 2) * (config.n_columns // 2)
        self.fc1_w = nn.Parameter(kaiming_uniform((flat, config.hidden), flat, gen).to(dtype))
        self.fc1_b = nn.Parameter(torch.zeros(config.hidden, dtype=dtype))
        out = config.n_targets * config.n_classes
        self.fc2_w = nn.Parameter(xavier_uniform((config.hidden, out), config.hidden, out, gen).to(dtype))
        self.fc2_b = nn.Parameter(torch.zeros(out, dtype=dtype))

    @property
    def dtype(self):
        return self.fc2_w.dtype

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(N, window, columns) normalised windows -> (N, targets, classes) logits."""
        cfg = self.config
        if x.dim() != 3 or tuple(x.shape[1:]) != (cfg.window, cfg.n_columns):
            raise ShapeError(f"flow input must be (N, {cfg.window}, {cfg.n_columns}), "
                             f"got {tuple(x.shape)}")
        h = x.to(self.dtype).unsqueeze(1)
        for i in range(len(cfg.channels)):
            h = ops.relu(ops.conv2d(h, self.conv_w[i], self.conv_b[i], padding=1))
            if i + 1 == cfg.pool_after:
                h = ops.maxpool2d(h, 2)
        h = ops.relu(ops.linear(h.flatten(1), self.fc1_w, self.fc1_b))
        return ops.linear(h, self.fc2_w, self.fc2_b).reshape(-1, cfg.n_targets, cfg.n_classes)

    def save(self, path, columns: Sequence[tuple[str, int]], stats: NormalizationStats) -> None:
        path = Path(path)
        save_checkpoint(path, dict(self.named_parameters()))
        meta = {"kind": "flow", "config": self.config.to_json(),
                "columns": [[s, r] for s, r in columns] + [["timestamp", None]],
                "stats": stats.to_json()}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")

    @classmethod
    def load(cls, path, dtype=torch.float32):
        """-> (model, columns, stats)"""
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        if meta.get("kind") != "flow":
            raise InputError(f"{path}: not a flow checkpoint")
        model = cls(FlowConfig.from_json(meta["config"]), dtype=dtype)
        state = load_checkpoint(path)
        with torch.no_grad():
            for name, p in model.named_parameters():
                if name not in state or state[name].shape != tuple(p.shape):
                    raise InputError(f"{path}: missing or mis-shaped parameter {name}")
                p.copy_(torch.as_tensor(state[name]))
        columns = [(s, int(r)) for s, r in meta["columns"] if s != "timestamp"]
        return model, columns, NormalizationStats.from_json(meta["stats"])


def flow_forward(model: FlowCNN, window) -> torch.Tensor:
    """Per-target class probabilities, (targets, classes) or (N, targets, classes)."""
    x = torch.as_tensor(np.asarray(window) if not isinstance(window, torch.Tensor) else window)
    single = x.dim() == 2
    probs = ops.softmax(model(x.unsqueeze(0) if single else x), dim=-1)
    return probs[0] if single else probs


def predict_counts(model: FlowCNN, inputs: np.ndarray, batch: int = 512) -> np.ndarray:
    """Argmax classes, ties to the smaller count."""
    out = []
    with torch.no_grad():
        for s in range(0, len(inputs), batch):
            logits = model(torch.as_tensor(inputs[s:s + batch])).double().numpy()
            out.append(np.argmax(logits, axis=-1))   # first maximum wins
    if not out:
        return np.zeros((0, model.config.n_targets), dtype=np.int64)
    return np.concatenate(out).astype(np.int64)


@dataclass
class FlowLog:
    train_loss: list[float] = field(default_factory=list)


def flow_loss(logits: torch.Tensor, targets: torch.Tensor, c_max: int) -> torch.Tensor:
    """Mean over windows and targets of the cross-entropy on clipped counts."""
    logp = ops.log_softmax(logits, dim=-1)
    y = torch.clamp(targets, 0, c_max).long()
    return -logp.gather(-1, y.unsqueeze(-1)).mean()


def train_flow(train: FlowSet, config: FlowConfig | None = None, sgd: SgdConfig = FLOW_SGD,
               dtype=torch.float32) -> tuple[FlowCNN, FlowLog]:
    if train.inputs is None:
        raise InputError("training windows are not normalised")
    if config is None:
        config = FlowConfig(window=train.raw.shape[1], n_columns=train.raw.shape[2])
    torch.manual_seed(sgd.seed)
    model = FlowCNN(config, seed=sgd.seed, dtype=dtype)
    log = FlowLog()
    x = torch.as_tensor(train.inputs, dtype=dtype)
    y = torch.as_tensor(train.targets)
    rng = np.random.default_rng(sgd.seed)
    state: dict[str, torch.Tensor] = {}
    for _ in range(sgd.epochs):
        order = rng.permutation(len(train))
        total = 0.0
        for s in range(0, len(order), sgd.batch_size):
            idx = torch.as_tensor(order[s:s + sgd.batch_size])
            loss = flow_loss(model(x[idx]), y[idx], config.c_max)
            model.zero_grad(set_to_none=True)
            loss.backward()
            sgd_step(model.named_parameters(), sgd, state)
            total += loss.item() * len(idx)
        log.train_loss.append(total / len(order))
    return model, log


# --------------------------------------------------------------------------
# evaluation and forecasting

@dataclass
class AccuracyTable:
    sensors: list[str]
    radii: list[int]
    accuracy: np.ndarray       # (sensors, radii)
    support: int               # test windows per cell
    nonzero: np.ndarray        # (sensors, radii) windows with a nonzero target

    @property
    def mean(self) -> float:
        return float(self.accuracy.mean())


def _table(pred: np.ndarray, targets: np.ndarray, columns, c_max: int) -> AccuracyTable:
    sensors = list(dict.fromkeys(s for s, _ in columns))
    radii = list(dict.fromkeys(r for _, r in columns))
    hit = (pred == np.clip(targets, 0, c_max)).mean(axis=0) if len(targets) else \
        np.full(len(columns), np.nan)
    nz = (targets > 0).sum(axis=0)
    shape = (len(sensors), len(radii))
    return AccuracyTable(sensors, radii, hit.reshape(shape), len(targets), nz.reshape(shape))


def accuracy_by_boundary(model: FlowCNN, test: FlowSet) -> AccuracyTable:
    """Exact-match accuracy per (sensor, radius) target."""
    if test.inputs is None:
        raise InputError("test windows are not normalised")
    return _table(predict_counts(model, test.inputs), test.targets, test.columns,
                  model.config.c_max)


def persistence_accuracy(test: FlowSet, c_max: int = C_MAX) -> AccuracyTable:
    """Baseline that repeats the last observed frame."""
    last = np.clip(test.raw[:, -1, :-1], 0, c_max).astype(np.int64)
    return _table(last, test.targets, test.columns, c_max)


def sliding_forecast(history, model: FlowCNN, stats: NormalizationStats,
                     horizon: int) -> np.ndarray:
    """Autoregressive ``horizon``-step forecast from raw (>= window, columns) history.

    Each step predicts from the latest window, then appends the predicted
    counts with the timestamp advanced by one second.
    """
    cfg = model.config
    if horizon < 1:
        raise InputError("horizon must be >= 1")
    hist = np.asarray(history, dtype=np.float64)
    if hist.ndim != 2 or hist.shape[1] != cfg.n_columns:
        raise ShapeError(f"history must be (T, {cfg.n_columns}), got {hist.shape}")
    if hist.shape[0] < cfg.window:
        raise InputError(f"need at least {cfg.window} frames of history, got {hist.shape[0]}")
    frames = list(hist[-cfg.window:])
    out = np.zeros((horizon, cfg.n_targets), dtype=np.int64)
    for h in range(horizon):
        x = stats.apply(np.array(frames[-cfg.window:]))[None]
        out[h] = predict_counts(model, x)[0]
        nxt = np.empty(cfg.n_columns)
        nxt[:-1] = out[h]
        nxt[-1] = frames[-1][-1] + 1.0
        frames.append(nxt)
    return out


def history_from_records(records: Sequence[LabelRecord], columns: Sequence[tuple[str, int]],
                         window: int = WINDOW) -> np.ndarray:
    """The latest ``window`` consecutive complete frames as raw rows."""
    sensors = list(dict.fromkeys(s for s, _ in columns))
    radii = list(dict.fromkeys(r for _, r in columns))
    ts, counts = count_matrix(records, sensors, radii)
    if len(ts) < window or ts[-1] - ts[-window] != window - 1:
        raise InputError(f"need {window} consecutive complete seconds at the end of the labels")
    return np.column_stack([counts[-window:].astype(np.float64), ts[-window:].astype(np.float64)])


def write_accuracy_csv(path, table: AccuracyTable) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sensor"] + [f"r{r}" for r in table.radii]
                   + [f"nonzero_r{r}" for r in table.radii] + ["support"])
        for i, s in enumerate(table.sensors):
            w.writerow([s] + [f"{v:.6f}" for v in table.accuracy[i]]
                       + [str(int(v)) for v in table.nonzero[i]] + [str(table.support)])


def write_forecast_csv(path, start: int, forecast: np.ndarray,
                       columns: Sequence[tuple[str, int]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp"] + [f"{s}_r{r}" for s, r in columns])
        for h, row in enumerate(forecast):
            w.writerow([start + h] + [str(int(v)) for v in row])

"""Command-line entry point: ``pedsense <command> CONFIG [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .core_data import (RADII, AudioClip, hourly_fraction, load_labels, load_wav,
                        pedestrian_fraction, resample, write_labels, write_wav)
from .detector import Detector, DetectorConfig
from .errors import DegenerateCalibrationError, DivergenceError, InputError, NumericalError
from .flow import (FLOW_SGD, FlowCNN, FlowConfig, accuracy_by_boundary, build_windows,
                   history_from_records, persistence_accuracy, sliding_forecast,
                   split_and_normalize, train_flow, write_accuracy_csv, write_forecast_csv)
from .geometry import (DetectionFrame, label_stream, read_calibration, read_detections,
                       sites_from_config)
from .neural.checkpoint import VERSION as CHECKPOINT_VERSION
from .neural.optim import SgdConfig
from .synth import (SceneConfig, corridor_sites, flat_profile, lunchtime_profile, render_audio,
                    sample_walkers, simulate_counts)
from .training import (DEFAULT_SGD, DetectorDataset, ExperimentConfig, GridCell, ThresholdConfig,
                       evaluate, grid_matrix, radius_experiment, threshold_grid, time_block_split,
                       train_detector, write_report_csv, write_report_json)

logger = logging.getLogger("pedsense")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_DIVERGED = 0, 2, 3, 4


class Run:
    """Collects inputs/outputs for the manifest of one command."""

    def __init__(self, command: str, config: dict, out: Path, base: Path):
        self.command, self.config, self.out, self.base = command, config, out, base
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.t0 = time.time()

    def input(self, key: str, required: bool = True):
        value = self.config.get(key)
        if value is None:
            if required:
                raise InputError(f"config is missing {key!r}")
            return None
        path = Path(value)
        if not path.is_absolute():
            path = self.base / path
        self.inputs.append(str(path))
        return path

    def output(self, name: str) -> Path:
        path = self.out / name
        self.outputs.append(str(path))
        return path

    def manifest(self) -> None:
        blob = json.dumps(self.config, sort_keys=True, default=str).encode()
        doc = {"command": self.command, "config_hash": hashlib.sha256(blob).hexdigest(),
               "seed": self.config.get("seed"), "inputs": self.inputs, "outputs": self.outputs,
               "wall_time": round(time.time() - self.t0, 3), "version": __version__,
               "checkpoint_format": CHECKPOINT_VERSION}
        (self.out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                                encoding="utf-8")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# shared config readers

def _sites(cfg: dict):
    if "sites" in cfg:
        return sites_from_config(cfg["sites"])
    if "corridor" in cfg:
        c = cfg["corridor"] or {}
        return list(corridor_sites(int(c.get("n", 6)), float(c.get("spacing", 5.0))))
    raise InputError("config needs 'sites' or 'corridor'")


def _scene(cfg: dict, sites) -> SceneConfig:
    fields = {f.name for f in dataclasses.fields(SceneConfig)} - {"sites", "walkers"}
    kw = {k: v for k, v in cfg.get("scene", {}).items() if k in fields}
    for k in ("speed_range", "stride_range", "footstep_band"):
        if k in kw:
            kw[k] = tuple(float(x) for x in kw[k])
    prof = kw.get("hourly_profile")
    if prof == "flat":
        kw["hourly_profile"] = tuple(flat_profile())
    elif prof == "lunchtime":
        kw["hourly_profile"] = tuple(lunchtime_profile())
    elif prof is not None:
        kw["hourly_profile"] = tuple(float(x) for x in prof)
    kw["seed"] = int(cfg.get("seed", kw.get("seed", 0)))
    return SceneConfig(sites=tuple(sites), **kw)


def _detector_config(cfg: dict) -> DetectorConfig:
    return DetectorConfig.from_json(cfg.get("detector", {}))


def _sgd(cfg: dict, defaults: SgdConfig) -> SgdConfig:
    return SgdConfig(float(cfg.get("lr", defaults.learning_rate)),
                     float(cfg.get("momentum", defaults.momentum)),
                     int(cfg.get("batch_size", defaults.batch_size)),
                     int(cfg.get("epochs", defaults.epochs)), int(cfg.get("seed", defaults.seed)))


def _dataset(run: Run) -> DetectorDataset:
    """One audio file plus the label CSV -> per-second patches with counts."""
    cfg = run.config
    labels = load_labels(run.input("labels"))
    clip = load_wav(run.input("audio"))
    frontend = _detector_config(cfg).frontend
    if clip.sample_rate != frontend.rate:
        clip = resample(clip, frontend.rate)
    clip = AudioClip(clip.samples, clip.sample_rate, float(cfg.get("start_time", 0)))
    return DetectorDataset.from_clip(clip, labels, str(cfg["sensor_id"]), frontend)


def _splits(cfg: dict, data: DetectorDataset):
    return time_block_split(data, tuple(cfg.get("split", (0.7, 0.1, 0.2))))


# --------------------------------------------------------------------------
# commands

def cmd_annotate(run: Run) -> None:
    cfg = run.config
    det_path = run.input("detections")
    calib_path = run.input("calibration", required=False)
    if calib_path is None or not calib_path.exists():
        raise DegenerateCalibrationError("calibration file is missing")
    calib = read_calibration(calib_path)
    frames = read_detections(det_path, float(cfg.get("min_confidence", 0.7)))
    sites = sites_from_config(cfg["sites"])
    site_cams = {str(e["sensor_id"]): e.get("camera") for e in cfg["sites"]}
    span = cfg.get("span")
    records = []
    for cam in sorted(calib):
        own = [f for f in frames if f.camera_id == cam]
        if span is not None:
            have = {f.timestamp for f in own}
            own += [DetectionFrame(t, cam) for t in range(int(span[0]), int(span[1]))
                    if t not in have]
            own.sort(key=lambda f: f.timestamp)
        cam_sites = [s for s in sites if site_cams[s.sensor_id] in (None, cam)]
        if len(calib) > 1:
            cam_sites = [s for s in cam_sites if site_cams[s.sensor_id] == cam]
        records += label_stream(own, calib[cam], cam_sites)
    unknown = {f.camera_id for f in frames} - set(calib)
    if unknown:
        raise DegenerateCalibrationError(f"no calibration for cameras {sorted(unknown)}")
    write_labels(run.output(cfg.get("output", "labels.csv")), records)


def cmd_synth(run: Run) -> None:
    cfg = run.config
    scene = _scene(cfg, _sites(cfg))
    walkers = sample_walkers(scene)
    write_labels(run.output("labels.csv"), simulate_counts(scene, walkers))
    audio = cfg.get("audio", scene.layout == "crossing")
    wavs = {}
    if audio:
        for site in scene.sites:
            name = f"{site.sensor_id}.wav"
            write_wav(run.output(name), render_audio(scene, site, walkers))
            wavs[site.sensor_id] = name
    _write_json(run.output("scene.json"), {
        "start_time": scene.start_time, "duration": scene.duration, "walkers": len(walkers),
        "audio": wavs, "sites": [{"sensor_id": s.sensor_id, "position": list(s.ground_position),
                                  "radii": list(s.radii)} for s in scene.sites]})


def cmd_train_detector(run: Run) -> None:
    cfg = run.config
    train, val, _ = _splits(cfg, _dataset(run))
    radius = int(cfg.get("radius", 6))
    thr = int(cfg.get("train_threshold", 1))
    model, log = train_detector(train, val, _detector_config(cfg),
                                _sgd(cfg, DEFAULT_SGD), ThresholdConfig(thr, thr, radius))
    model.save(run.output("detector.ckpt"),
               {"radius": radius, "train_threshold": thr, "sensor_id": str(cfg["sensor_id"])})
    run.outputs.append(str(run.out / "detector.json"))
    _write_json(run.output("training_log.json"), log.to_json())


def cmd_eval_detector(run: Run) -> None:
    cfg = run.config
    model = Detector.load(run.input("checkpoint"))
    run.config.setdefault("detector", model.config.to_json())
    data = _dataset(run)
    part = cfg.get("part", "test")
    blocks = dict(zip(("train", "val", "test"), _splits(cfg, data)))
    if part != "all":
        if part not in blocks:
            raise InputError(f"part must be train, val, test or all, got {part!r}")
        data = blocks[part]
    radius = int(cfg.get("radius", 6))
    thr = int(cfg.get("test_threshold", 1))
    report = evaluate(model, data, ThresholdConfig(thr, thr, radius))
    write_report_csv(run.output("eval.csv"), [GridCell(radius, thr, thr, report)])


def cmd_grid(run: Run) -> None:
    cfg = run.config
    exp = ExperimentConfig.from_mapping(cfg)
    train, val, test = _splits(cfg, _dataset(run))
    det = _detector_config(cfg)
    cells = threshold_grid(train, val, test, exp.grid_radius, exp.train_thresholds,
                           exp.test_thresholds, det, exp.sgd)
    write_report_csv(run.output("grid.csv"), cells)
    write_report_json(run.output("grid.json"), cells)
    m = grid_matrix(cells)
    with open(run.output("grid_matrix.csv"), "w", encoding="utf-8") as fh:
        fh.write("train_thr," + ",".join(f"test_{j}" for j in sorted(exp.test_thresholds)) + "\n")
        for i, row in zip(sorted(exp.train_thresholds), m):
            fh.write(f"{i}," + ",".join(f"{v:.6f}" for v in row) + "\n")
    if cfg.get("radius_sweep", True):
        rcells = radius_experiment(train, val, test, exp.radii, det, exp.sgd)
        write_report_csv(run.output("radius.csv"), rcells)


def _flow_data(run: Run):
    cfg = run.config
    labels = load_labels(run.input("labels"))
    sensors = [str(s) for s in cfg.get("sensors") or sorted({r.sensor_id for r in labels})]
    radii = tuple(int(r) for r in cfg.get("radii", RADII))
    windows = build_windows(labels, sensors, radii)
    logger.info("%d windows, %d gap-skipped, %d all-zero excluded", len(windows),
                windows.gap_skipped, windows.zero_excluded)
    return split_and_normalize(windows, float(cfg.get("ratio", 0.8)), int(cfg.get("seed", 0)),
                               bool(cfg.get("block_split", False)))


def cmd_train_flow(run: Run) -> None:
    cfg = run.config
    train, test, stats = _flow_data(run)
    fc = FlowConfig(window=train.raw.shape[1], n_columns=train.raw.shape[2],
                    c_max=int(cfg.get("c_max", 8)))
    model, log = train_flow(train, fc, _sgd(cfg, FLOW_SGD))
    model.save(run.output("flow.ckpt"), train.columns, stats)
    run.outputs.append(str(run.out / "flow.json"))
    _write_json(run.output("flow_log.json"), dataclasses.asdict(log))
    write_accuracy_csv(run.output("flow_accuracy.csv"), accuracy_by_boundary(model, test))


def cmd_flow_report(run: Run) -> None:
    model, columns, stats = FlowCNN.load(run.input("checkpoint"))
    _, test, _ = _flow_data(run)
    if test.columns != columns:
        raise InputError("label columns do not match the checkpoint column map")
    test.inputs = stats.apply(test.raw)
    write_accuracy_csv(run.output("flow_report.csv"), accuracy_by_boundary(model, test))
    write_accuracy_csv(run.output("persistence_report.csv"),
                       persistence_accuracy(test, model.config.c_max))


def cmd_forecast(run: Run) -> None:
    cfg = run.config
    model, columns, stats = FlowCNN.load(run.input("checkpoint"))
    labels = load_labels(run.input("labels"))
    hist = history_from_records(labels, columns, model.config.window)
    horizon = int(cfg.get("horizon", 5))
    pred = sliding_forecast(hist, model, stats, horizon)
    write_forecast_csv(run.output("forecast.csv"), int(hist[-1, -1]) + 1, pred, columns)


def cmd_stats(run: Run) -> None:
    cfg = run.config
    labels = load_labels(run.input("labels"))
    radius = int(cfg.get("radius", 6))
    offset = float(cfg.get("utc_offset_hours", 0.0))
    sensors = sorted({r.sensor_id for r in labels})
    per = {s: pedestrian_fraction([r for r in labels if r.sensor_id == s], radius)
           for s in sensors}
    hourly = hourly_fraction(labels, radius, offset)
    _write_json(run.output("stats.json"), {
        "radius": radius, "overall_fraction": pedestrian_fraction(labels, radius),
        "per_sensor_fraction": per, "mean_sensor_fraction": float(np.mean(list(per.values()))),
        "peak_hour": int(np.nanargmax(hourly)) if np.isfinite(hourly).any() else None})
    with open(run.output("hourly.csv"), "w", encoding="utf-8") as fh:
        fh.write("hour,fraction\n")
        for h, v in enumerate(hourly):
            fh.write(f"{h},{'' if np.isnan(v) else f'{v:.6f}'}\n")


COMMANDS = {
    "annotate": cmd_annotate, "synth": cmd_synth, "train-detector": cmd_train_detector,
    "eval-detector": cmd_eval_detector, "grid": cmd_grid, "train-flow": cmd_train_flow,
    "forecast": cmd_forecast, "flow-report": cmd_flow_report, "stats": cmd_stats,
}


def _load_config(path: Path) -> dict:
    try:
        cfg = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None
    if cfg is None:
        cfg = {}
    if not isinstance(cfg, dict):
        raise InputError(f"{path}: config must be a mapping")
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pedsense", description=__doc__)
    p.add_argument("--version", action="version",
                   version=f"pedsense {__version__} (checkpoint format {CHECKPOINT_VERSION})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("config", type=Path, help="YAML or JSON config file")
        s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        s.add_argument("--out", type=Path, default=None, help="output directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        out = args.out or Path(cfg.get("out", "out"))
        if args.out is not None:
            cfg["out"] = str(args.out)
        out.mkdir(parents=True, exist_ok=True)
        run = Run(args.command, cfg, out, args.config.parent)
        COMMANDS[args.command](run)
        run.manifest()
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, OSError, KeyError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

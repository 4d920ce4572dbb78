"""Acceptance criteria, one report line each.

Run ``pytest tests/test_acceptance.py -v`` to see the PASS/FAIL lines; the
two training experiments (criteria 6 and 7) are marked ``slow`` and take
about 20 minutes together on one CPU core.
"""

import glob
import json
import os
import time

import numpy as np
import pytest
import torch
import yaml

import conftest
from oracles import reference_lambda, naive_dft, random_instance, raster_counts
from toy import TOY_DETECTOR

from pedsense.cli import main
from pedsense.core_data import LabelRecord, hourly_fraction, load_labels, pedestrian_fraction
from pedsense.detector import ConvEncoderConfig, Detector, DetectorConfig
from pedsense.flow import (FLOW_SGD, FlowCNN, NormalizationStats, accuracy_by_boundary,
                           build_windows, history_from_records, persistence_accuracy,
                           predict_counts, sliding_forecast, split_and_normalize, train_flow)
from pedsense.frontend import FrontendConfig, band_centers, segment_to_patch, stft_magnitude
from pedsense.geometry import SensorSite, label_frame
from pedsense.neural import (bce_loss, conv2d, grad_check, layer_norm, linear, log_softmax,
                             maxpool2d, multihead_attention, relu, sigmoid, softmax)
from pedsense.synth import SceneConfig, corridor_sites, generate_flow_traces, render_audio, \
    sample_walkers, simulate_counts
from pedsense.training import (DEFAULT_SGD, DetectorDataset, ThresholdConfig, balanced_batches,
                               evaluate, lambda_weight, time_block_split, train_detector)

D = torch.float64
# narrower encoder used for the 30-minute trainability run so it fits its time budget
DESK_ENCODER = ConvEncoderConfig(channels=(8, 16, 32, 32, 64, 64))


def report(n, passed, detail):
    status = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
    line = f"criterion {n}: {status}  {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print("\n" + line)
    return passed


def leaf(a):
    return torch.tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# --------------------------------------------------------------------------

def test_c01_gradients():
    t0 = time.time()
    rng = np.random.default_rng(1)
    worst = {}

    def run(name, fn, tensors, tol, **kw):
        rep = grad_check(fn, tensors, tolerance=tol, **kw)
        worst[name] = (rep.max_error, tol, rep.passed)

    x, w, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=5))
    run("linear", lambda: linear(x, w, b).pow(2).sum(), {"x": x, "w": w, "b": b}, 1e-6)
    z0 = rng.normal(size=(4, 5))
    z = leaf(np.where(np.abs(z0) < 0.1, 0.5, z0))
    c = torch.tensor(rng.normal(size=(4, 5)))
    run("relu", lambda: (relu(z) * c).sum(), {"z": z}, 1e-6)
    run("sigmoid", lambda: (sigmoid(z * 3) * c).sum(), {"z": z}, 1e-6)
    run("softmax", lambda: (softmax(z * 2) * c).sum(), {"z": z}, 1e-6)
    run("log_softmax", lambda: (log_softmax(z * 2) * c).sum(), {"z": z}, 1e-6)
    xc, wc, bc = leaf(rng.normal(size=(2, 2, 6, 6))), leaf(rng.normal(size=(3, 2, 3, 3))), \
        leaf(rng.normal(size=3))
    cc = torch.tensor(rng.normal(size=(2, 3, 6, 6)))
    run("conv2d", lambda: (conv2d(xc, wc, bc, padding=1) * cc).sum(), {"x": xc, "w": wc, "b": bc}, 1e-4)
    xp = leaf(rng.normal(size=(2, 3, 6, 6)))
    cp = torch.tensor(rng.normal(size=(2, 3, 3, 3)))
    run("maxpool2d", lambda: (maxpool2d(xp, 2) * cp).sum(), {"x": xp}, 1e-4)
    xl, gl, bl = leaf(rng.normal(size=(3, 6))), leaf(rng.normal(size=6)), leaf(rng.normal(size=6))
    cl = torch.tensor(rng.normal(size=(3, 6)))
    run("layer_norm", lambda: (layer_norm(xl, gl, bl) * cl).sum(), {"x": xl, "g": gl, "b": bl}, 1e-4)
    xa = leaf(rng.normal(size=(3, 8)))
    wa = {k: leaf(rng.normal(size=(8, 8)) * 0.5) for k in ("wq", "wk", "wv", "wo")}
    ca = torch.tensor(rng.normal(size=(3, 8)))
    run("attention", lambda: (multihead_attention(xa, 2, wa["wq"], wa["wk"], wa["wv"], wa["wo"]) * ca).sum(),
        {"x": xa, **wa}, 1e-4)
    pb = leaf(rng.uniform(0.05, 0.95, 6))
    yb = torch.tensor([1.0, 0, 0, 1, 1, 0], dtype=D)
    run("bce", lambda: bce_loss(pb, yb).mean, {"p": pb}, 1e-4)

    # both full models at their default sizes, float64, sub-sampled entries
    det = Detector(DetectorConfig(), seed=3, dtype=D)
    patch = torch.tensor(rng.normal(size=(1, 2) + DetectorConfig().encoder.patch_shape))
    y = torch.tensor([1.0, 0.0], dtype=D)
    run("detector", lambda: bce_loss(det(patch).reshape(-1), y).mean,
        dict(det.named_parameters()), 1e-4, max_entries=3)
    flow = FlowCNN(seed=3, dtype=D)
    xf = torch.tensor(rng.normal(size=(2, 11, 25)))
    yf = torch.tensor(rng.integers(0, 9, (2, 24)))
    from pedsense.flow import flow_loss
    run("flow_cnn", lambda: flow_loss(flow(xf), yf, 8), dict(flow.named_parameters()), 1e-4,
        max_entries=6)

    elapsed = time.time() - t0
    failed = [k for k, v in worst.items() if not v[2]]
    ok = not failed and elapsed < 120
    detail = ", ".join(f"{k} {v[0]:.1e}" for k, v in worst.items())
    report(1, ok, f"max rel. error per check: {detail}; failed={failed}; {elapsed:.1f}s (< 120s)")
    assert ok


def test_c02_lambda_oracle():
    t0 = time.time()
    worst = max(abs(lambda_weight(p, n) - reference_lambda(p, n)) for p in range(65) for n in range(65))
    zero = all(lambda_weight(0, n) == 0.0 for n in range(65))
    elapsed = time.time() - t0
    ok = worst <= 1e-12 and zero and elapsed < 1
    report(2, ok, f"max |lambda - reference| over [0,64]^2 = {worst:.1e}, lambda(0, n) = 0: {zero}; "
                  f"{elapsed:.3f}s (< 1s)")
    assert ok


def test_c03_sampler_balance():
    t0 = time.time()
    labels = np.zeros(1000, dtype=int)
    labels[::100] = 1
    fractions, coverage_ok, seed = [], True, 0
    while len(fractions) < 1000:
        batches = list(balanced_batches(labels, 32, seed))
        maj = np.concatenate([b[labels[b] == 0] for b in batches])
        coverage_ok &= sorted(maj.tolist()) == np.flatnonzero(labels == 0).tolist()
        fractions += [labels[b].mean() for b in batches]
        seed += 1
    mean = float(np.mean(fractions[:1000]))
    elapsed = time.time() - t0
    ok = 0.45 <= mean <= 0.55 and coverage_ok and elapsed < 30
    report(3, ok, f"mean positive fraction {mean:.3f} over 1000 batches, majority coverage "
                  f"exact in {seed} epochs: {coverage_ok}; {elapsed:.1f}s (< 30s)")
    assert ok


def test_c04_geometry_oracle():
    t0 = time.time()
    rng = np.random.default_rng(4)
    mismatches = non_monotone = boxes = 0
    for _ in range(10_000):
        calib, site, frame = random_instance(rng)
        got = label_frame(frame, calib, site).counts
        boxes += len(frame.boxes)
        mismatches += got != raster_counts(calib, site, frame)
        vals = [got[r] for r in sorted(site.radii)]
        non_monotone += any(b < a for a, b in zip(vals, vals[1:]))
    elapsed = time.time() - t0
    ok = mismatches == 0 and non_monotone == 0 and elapsed < 60
    report(4, ok, f"{mismatches} mismatches, {non_monotone} monotonicity violations on 10^4 "
                  f"instances ({boxes} boxes); {elapsed:.1f}s (< 60s)")
    assert ok


def test_c05_frontend_oracles():
    t0 = time.time()
    rng = np.random.default_rng(5)
    x = rng.normal(size=400)
    from pedsense.frontend import hann
    fast = stft_magnitude(x, 400, 160)[0]
    slow = np.abs(naive_dft(x * hann(400)))
    rel = float(np.max(np.abs(fast - slow)) / np.max(np.abs(slow)))
    cfg = FrontendConfig()
    t = np.arange(cfg.rate) / cfg.rate
    hits = sum(bool((np.argmax(segment_to_patch(0.5 * np.sin(2 * np.pi * f * t), cfg), axis=1)
                     == k).all()) for k, f in enumerate(band_centers(cfg)))
    elapsed = time.time() - t0
    ok = rel <= 1e-9 and hits == cfg.n_bands and elapsed < 60
    report(5, ok, f"STFT vs naive DFT rel. error {rel:.1e}; band-centre argmax {hits}/"
                  f"{cfg.n_bands}; {elapsed:.1f}s (< 60s)")
    assert ok


@pytest.mark.slow
def test_c06_detector_trainability():
    t0 = time.time()
    site = SensorSite("a", (0.0, 0.0))
    config = DetectorConfig(encoder=DESK_ENCODER)
    ba1, ba4, pos = [], [], []
    for seed in (0, 1, 2):
        scene = SceneConfig(sites=(site,), duration=1800, seed=seed, snr_db=15.0)
        walkers = sample_walkers(scene)
        data = DetectorDataset.from_clip(render_audio(scene, site, walkers),
                                         simulate_counts(scene, walkers), "a")
        pos.append(data.targets(6, 1).mean())
        train, val, test = time_block_split(data)
        sgd = DEFAULT_SGD.__class__(DEFAULT_SGD.learning_rate, DEFAULT_SGD.momentum,
                                    DEFAULT_SGD.batch_size, DEFAULT_SGD.epochs, seed)
        model, _ = train_detector(train, val, config, sgd, ThresholdConfig(1, 1, 6))
        ba1.append(evaluate(model, test, ThresholdConfig(1, 1, 6)).macro_accuracy)
        ba4.append(evaluate(model, test, ThresholdConfig(1, 4, 6)).macro_accuracy)
    elapsed = time.time() - t0
    m1, m4 = float(np.mean(ba1)), float(np.mean(ba4))
    ok = m1 >= 0.85 and m4 >= m1 and elapsed <= 900
    report(6, ok, f"test macro acc (thr 1) {np.round(ba1, 3).tolist()} mean {m1:.3f} (>= 0.85); "
                  f"test thr 4 mean {m4:.3f} (>= thr 1); positive seconds r=6 "
                  f"{np.mean(pos):.3f}; {elapsed:.0f}s (<= 900s)")
    assert ok


@pytest.mark.slow
def test_c07_flow_experiment():
    t0 = time.time()
    sites = corridor_sites()
    scene = SceneConfig(sites=sites, duration=7200, seed=0, layout="corridor")
    windows = build_windows(generate_flow_traces(scene), [s.sensor_id for s in sites])
    train, test, _ = split_and_normalize(windows, 0.8, seed=0)
    model, log = train_flow(train, sgd=FLOW_SGD)
    cnn = accuracy_by_boundary(model, test)
    pers = persistence_accuracy(test)
    elapsed = time.time() - t0
    gain = cnn.mean - pers.mean
    r1, r9 = cnn.accuracy[:, 0].mean(), cnn.accuracy[:, 3].mean()
    ok = gain >= 0.05 and r1 >= r9 and elapsed <= 600
    report(7, ok, f"CNN {cnn.mean:.3f} vs persistence {pers.mean:.3f} (gain {100 * gain:+.1f} "
                  f"points, need >= +5); r=1 {r1:.3f} >= r=9 {r9:.3f}: {r1 >= r9}; "
                  f"{len(windows)} windows, {FLOW_SGD.epochs} epochs lr {FLOW_SGD.learning_rate}; "
                  f"{elapsed:.0f}s (<= 600s)")
    assert ok


def test_c08_sliding_window_consistency():
    sites = corridor_sites()
    scene = SceneConfig(sites=sites, duration=600, seed=8, layout="corridor", arrival_rate=300)
    records = generate_flow_traces(scene)
    windows = build_windows(records, [s.sensor_id for s in sites])
    _, _, stats = split_and_normalize(windows, 0.8, seed=0)
    model = FlowCNN(seed=8, dtype=D)
    hist = history_from_records(records, windows.columns)
    fc = sliding_forecast(hist, model, stats, 5)
    frames = [row for row in hist]
    manual = []
    for _ in range(5):
        pred = predict_counts(model, stats.apply(np.array(frames[-11:]))[None])[0]
        manual.append(pred)
        frames.append(np.concatenate([pred, [frames[-1][-1] + 1]]))
    unroll_ok = np.array_equal(fc, np.array(manual))

    zero_model = FlowCNN(seed=8, dtype=D)
    with torch.no_grad():
        zero_model.fc2_w.zero_()
        zero_model.fc2_b.copy_(torch.tensor([5.0] + [0.0] * 8, dtype=D).repeat(24))
    zero_hist = np.column_stack([np.zeros((11, 24)), 1000 + np.arange(11)])
    zeros = sliding_forecast(zero_hist, zero_model, NormalizationStats(np.zeros(25), np.ones(25)), 5)
    fixed_ok = zeros.shape == (5, 24) and not zeros.any()
    ok = unroll_ok and fixed_ok
    report(8, ok, f"5-step forecast equals manual unroll: {unroll_ok}; all-zero fixed point: "
                  f"{fixed_ok}")
    assert ok


def test_c09_real_data_statistics():
    pattern = os.environ.get("PEDSENSE_REAL_LABELS")
    paths = sorted(glob.glob(pattern)) if pattern else []
    if not paths:
        report(9, "SKIP", "(optional; set PEDSENSE_REAL_LABELS to a glob of session "
                        "label CSVs)")
        pytest.skip("real-data label files not available")
    fractions, all_records = [], []
    for p in paths:
        recs = load_labels(p)
        fractions.append(pedestrian_fraction(recs, 6))
        all_records += recs
    offset = float(os.environ.get("PEDSENSE_UTC_OFFSET", "0"))
    peak = int(np.nanargmax(hourly_fraction(all_records, 6, offset)))
    mean = float(np.mean(fractions))
    in_range = all(0.0458 <= f <= 0.1075 for f in fractions)
    ok = in_range and abs(mean - 0.0879) <= 0.002 and 11 <= peak <= 13
    report(9, ok, f"session fractions {np.round(fractions, 4).tolist()} in [4.58%, 10.75%]: "
                  f"{in_range}; mean {100 * mean:.2f}% (8.79 +/- 0.2); hourly peak {peak}:00")
    assert ok


def test_c10_determinism(tmp_path):
    t0 = time.time()

    def cfg(name, obj):
        p = tmp_path / f"{name}.yaml"
        p.write_text(yaml.safe_dump(obj))
        return str(p)

    sites = [{"sensor_id": "a", "position": [0.0, 0.0]}, {"sensor_id": "b", "position": [8.0, 3.0]}]
    runs = []

    def twice(command, config, tag=""):
        outs = []
        for k in ("r1", "r2"):
            out = tmp_path / f"{command}{tag}_{k}"
            assert main([command, config, "--out", str(out)]) == 0, command
            outs.append(out)
        runs.append((command, outs))
        return outs[0]

    synth = twice("synth", cfg("synth", {"sites": sites, "seed": 5,
                                         "scene": {"duration": 60, "start_time": 0,
                                                   "arrival_rate": 1000}}))
    corridor = twice("synth", cfg("corr", {"corridor": {"n": 6}, "seed": 2,
                                           "scene": {"duration": 600, "layout": "corridor",
                                                     "arrival_rate": 240}}), "_corridor")
    # detections derived from the scene for annotate
    from pedsense.geometry import BoundingBox, DetectionFrame, write_detections
    scene = SceneConfig(sites=tuple(SensorSite(s["sensor_id"], tuple(s["position"])) for s in sites),
                        duration=60, start_time=0, seed=5, arrival_rate=1000)
    frames = []
    for t in range(60):
        boxes = []
        for w in sample_walkers(scene):
            x, y = w.position([float(t)])[0]
            if np.isfinite(x):
                boxes.append(BoundingBox(92 + 20 * x, 860 - 20 * y, 108 + 20 * x, 900 - 20 * y))
        frames.append(DetectionFrame(t, "cam0", tuple(boxes)))
    write_detections(tmp_path / "det.jsonl", frames)
    ground = [[-20.0, -20.0], [20.0, -20.0], [20.0, 20.0], [-20.0, 20.0]]
    (tmp_path / "calib.json").write_text(json.dumps({"cameras": {"cam0": {
        "pixel": [[100 + 20 * x, 900 - 20 * y] for x, y in ground], "ground": ground}}}))
    twice("annotate", cfg("ann", {"detections": str(tmp_path / "det.jsonl"),
                                  "calibration": str(tmp_path / "calib.json"), "sites": sites}))
    det = {"audio": str(synth / "a.wav"), "labels": str(synth / "labels.csv"), "sensor_id": "a",
           "start_time": 0, "detector": TOY_DETECTOR.to_json(), "epochs": 1, "batch_size": 4,
           "seed": 1, "split": [0.6, 0.2, 0.2]}
    model = twice("train-detector", cfg("td", det))
    twice("eval-detector", cfg("ed", {**det, "checkpoint": str(model / "detector.ckpt")}))
    twice("grid", cfg("grid", {**det, "radius_sweep": False}))
    flow = {"labels": str(corridor / "labels.csv"), "epochs": 1, "batch_size": 64, "seed": 0}
    fmodel = twice("train-flow", cfg("tf", flow))
    twice("flow-report", cfg("fr", {**flow, "checkpoint": str(fmodel / "flow.ckpt")}))
    twice("forecast", cfg("fc", {**flow, "checkpoint": str(fmodel / "flow.ckpt"), "horizon": 5}))
    twice("stats", cfg("st", {"labels": str(corridor / "labels.csv")}))

    differing = []
    for command, (a, b) in runs:
        names = sorted(p.name for p in a.iterdir())
        if names != sorted(p.name for p in b.iterdir()):
            differing.append(f"{command}: file sets")
        for n in names:
            if n == "manifest.json":
                ma, mb = (json.loads((d / n).read_text()) for d in (a, b))
                for m in (ma, mb):
                    m.pop("wall_time")
                    m["outputs"] = [os.path.basename(o) for o in m["outputs"]]
                    m.pop("config_hash")   # config differs only by --out
                if ma != mb:
                    differing.append(f"{command}/{n}")
            elif (a / n).read_bytes() != (b / n).read_bytes():
                differing.append(f"{command}/{n}")
    elapsed = time.time() - t0
    ok = not differing
    report(10, ok, f"{len(runs)} commands run twice, differing outputs: {differing or 'none'}; "
                   f"{elapsed:.1f}s")
    assert ok

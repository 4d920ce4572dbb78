"""Per-second pedestrian detector: conv encoder -> transformer -> classifier."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .core_data import AudioClip
from .errors import InputError, ShapeError
from .frontend import FrontendConfig, clip_to_sequence
from .neural import ops
from .neural.checkpoint import load_checkpoint, save_checkpoint
from .neural.init import kaiming_uniform, xavier_uniform


@dataclass(frozen=True)
class ConvEncoderConfig:
    channels: tuple[int, ...] = (16, 32, 64, 64, 128, 128)
    kernel_size: int = 3
    pool_after: tuple[int, ...] = (2, 4, 6)
    embedding_dim: int = 128
    patch_shape: tuple[int, int] = FrontendConfig().patch_shape

    def __post_init__(self):
        if len(self.channels) != 6:
            raise InputError("the encoder has exactly six convolutional layers")


@dataclass(frozen=True)
class AggregatorConfig:
    layers: int = 2
    heads: int = 4
    model_dim: int = 128
    ffn_dim: int = 256
    context_seconds: int = 10
    positional: bool = True


@dataclass(frozen=True)
class DetectorConfig:
    encoder: ConvEncoderConfig = field(default_factory=ConvEncoderConfig)
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    threshold: float = 0.5

    def __post_init__(self):
        if self.aggregator.model_dim != self.encoder.embedding_dim:
            raise InputError("aggregator model_dim must equal the embedding dimension")
        if tuple(self.encoder.patch_shape) != self.frontend.patch_shape:
            raise InputError("encoder patch shape does not match the front-end")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "DetectorConfig":
        enc = dict(obj.get("encoder", {}))
        for k in ("channels", "pool_after", "patch_shape"):
            if k in enc:
                enc[k] = tuple(enc[k])
        return cls(ConvEncoderConfig(**enc), AggregatorConfig(**obj.get("aggregator", {})),
                   FrontendConfig(**obj.get("frontend", {})), obj.get("threshold", 0.5))


@dataclass
class DetectorOutput:
    probabilities: np.ndarray
    timestamps: np.ndarray
    labels: np.ndarray | None = None


def positional_encoding(t: int, d: int, dtype=torch.float64) -> torch.Tensor:
    pos = torch.arange(t, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d)
    pe = torch.zeros(t, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe.to(dtype)


class Detector(nn.Module):
    """All parameters are created from a single seeded generator, in a
    fixed order, so a seed fully determines the initial state."""

    def __init__(self, config: DetectorConfig = DetectorConfig(), seed: int = 0,
                 dtype=torch.float64):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(int(seed))
        enc, agg = config.encoder, config.aggregator
        k = enc.kernel_size

        def param(t):
            return nn.Parameter(t.to(dtype))

        def zeros(*shape):
            return nn.Parameter(torch.zeros(*shape, dtype=dtype))

        def ones(*shape):
            return nn.Parameter(torch.ones(*shape, dtype=dtype))

        self.conv_w = nn.ParameterList()
        self.conv_b = nn.ParameterList()
        self.norm_g = nn.ParameterList()
        self.norm_b = nn.ParameterList()
        c_in = 1
        for c_out in enc.channels:
            self.conv_w.append(param(kaiming_uniform((c_out, c_in, k, k), c_in * k * k, gen)))
            self.conv_b.append(zeros(c_out))
            self.norm_g.append(ones(c_out))
            self.norm_b.append(zeros(c_out))
            c_in = c_out
        self.proj_w = param(xavier_uniform((c_in, enc.embedding_dim), c_in, enc.embedding_dim, gen))
        self.proj_b = zeros(enc.embedding_dim)

        d, f = agg.model_dim, agg.ffn_dim
        self.blocks = nn.ModuleList()
        for _ in range(agg.layers):
            blk = nn.Module()
            blk.ln1_g, blk.ln1_b = ones(d), zeros(d)
            for name in ("wq", "wk", "wv", "wo"):
                setattr(blk, name, param(xavier_uniform((d, d), d, d, gen)))
            blk.ln2_g, blk.ln2_b = ones(d), zeros(d)
            blk.ff1_w = param(kaiming_uniform((d, f), d, gen))
            blk.ff1_b = zeros(f)
            blk.ff2_w = param(xavier_uniform((f, d), f, d, gen))
            blk.ff2_b = zeros(d)
            self.blocks.append(blk)
        self.final_g, self.final_b = ones(d), zeros(d)
        self.cls_w = param(xavier_uniform((d, 1), d, 1, gen))
        self.cls_b = zeros(1)
        # scalar input standardisation, fitted on training patches
        self.register_buffer("in_mean", torch.zeros((), dtype=dtype))
        self.register_buffer("in_std", torch.ones((), dtype=dtype))

    def fit_input_stats(self, patches) -> None:
        x = np.asarray(patches, dtype=np.float64)
        with torch.no_grad():
            self.in_mean.fill_(float(x.mean()))
            self.in_std.fill_(max(float(x.std()), 1e-8))

    @property
    def dtype(self):
        return self.cls_w.dtype

    # ------------------------------------------------------------------
    def encode(self, patches: torch.Tensor) -> torch.Tensor:
        """(N, F, M) mel patches -> (N, embedding_dim)."""
        enc = self.config.encoder
        if patches.dim() != 3 or tuple(patches.shape[1:]) != tuple(enc.patch_shape):
            raise ShapeError(f"encode: expected (N, {enc.patch_shape}), got {tuple(patches.shape)}")
        h = ((patches.to(self.dtype) - self.in_mean) / self.in_std).unsqueeze(1)
        pad = enc.kernel_size // 2
        for i in range(6):
            h = ops.conv2d(h, self.conv_w[i], self.conv_b[i], padding=pad)
            # normalise across channels at every time-frequency position
            h = ops.layer_norm(h.permute(0, 2, 3, 1), self.norm_g[i], self.norm_b[i])
            h = ops.relu(h.permute(0, 3, 1, 2))
            if i + 1 in enc.pool_after:
                h = ops.maxpool2d(h, 2)
        return ops.linear(h.mean(dim=(2, 3)), self.proj_w, self.proj_b)

    def aggregate(self, emb: torch.Tensor) -> torch.Tensor:
        """(..., T, D) -> (..., T, D), pre-norm transformer encoder, no mask."""
        agg = self.config.aggregator
        t = emb.shape[-2]
        if not 1 <= t <= agg.context_seconds:
            raise ShapeError(f"aggregate: {t} seconds outside [1, {agg.context_seconds}]")
        x = emb
        if agg.positional:
            x = x + positional_encoding(t, agg.model_dim, self.dtype)
        for blk in self.blocks:
            a = ops.layer_norm(x, blk.ln1_g, blk.ln1_b)
            x = x + ops.multihead_attention(a, agg.heads, blk.wq, blk.wk, blk.wv, blk.wo)
            a = ops.layer_norm(x, blk.ln2_g, blk.ln2_b)
            a = ops.relu(ops.linear(a, blk.ff1_w, blk.ff1_b))
            x = x + ops.linear(a, blk.ff2_w, blk.ff2_b)
        return ops.layer_norm(x, self.final_g, self.final_b)

    def logits(self, context: torch.Tensor) -> torch.Tensor:
        return ops.linear(context, self.cls_w, self.cls_b).squeeze(-1)

    def classify(self, context: torch.Tensor) -> torch.Tensor:
        """Per-second probability sigmoid(w . c_t + b)."""
        return ops.sigmoid(self.logits(context))

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        """(B, T, F, M) patches -> (B, T) probabilities."""
        b, t = patches.shape[:2]
        emb = self.encode(patches.reshape(b * t, *patches.shape[2:]))
        return self.classify(self.aggregate(emb.reshape(b, t, -1)))

    # ------------------------------------------------------------------
    def predict_patches(self, patches: np.ndarray) -> np.ndarray:
        """Probabilities for a (T, F, M) sequence, aggregated in context-sized chunks."""
        ctx = self.config.aggregator.context_seconds
        out = []
        with torch.no_grad():
            for s in range(0, len(patches), ctx):
                chunk = torch.as_tensor(np.asarray(patches[s:s + ctx]), dtype=self.dtype)
                out.append(self(chunk.unsqueeze(0))[0].double().numpy())
        return np.concatenate(out) if out else np.zeros(0)

    def save(self, path, labels: dict | None = None) -> None:
        """Binary checkpoint plus a ``.json`` sidecar with the config and,
        optionally, the labelling it was trained for (radius, thresholds)."""
        path = Path(path)
        save_checkpoint(path, {**dict(self.named_parameters()), **dict(self.named_buffers())})
        meta = {"kind": "detector", "config": self.config.to_json(), "labels": labels or {}}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")

    @classmethod
    def load(cls, path, dtype=torch.float32) -> "Detector":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        if meta.get("kind") != "detector":
            raise InputError(f"{path}: not a detector checkpoint")
        model = cls(DetectorConfig.from_json(meta["config"]), dtype=dtype)
        model.label_info = meta.get("labels", {})
        state = load_checkpoint(path)
        with torch.no_grad():
            for name, p in [*model.named_parameters(), *model.named_buffers()]:
                if name not in state or state[name].shape != tuple(p.shape):
                    raise InputError(f"{path}: missing or mis-shaped parameter {name}")
                p.copy_(torch.as_tensor(state[name]))
        return model


def predict(clip: AudioClip, model: Detector, threshold: float | None = None) -> DetectorOutput:
    """Per-second probabilities and binary labels ``p >= threshold`` for a clip."""
    threshold = model.config.threshold if threshold is None else threshold
    seq = clip_to_sequence(clip, model.config.frontend)
    probs = model.predict_patches(seq.patches)
    return DetectorOutput(probs, seq.timestamps, (probs >= threshold).astype(np.int64))


def apply_threshold(probabilities, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(probabilities) >= threshold).astype(np.int64)

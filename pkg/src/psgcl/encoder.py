"""1D EfficientNet-style encoder, one instance per modality."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .modalities import CLIP_LEN, ModalitySpec

# EfficientNet-B0 stride and kernel size per stage (stem first, then the seven MBConv stages)
STAGE_STRIDES = (2, 1, 2, 2, 2, 1, 2, 1)
STAGE_KERNELS = (3, 3, 5, 3, 5, 5, 3)
CHECKPOINT_FORMAT = 1


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    in_channels: int = 10
    stage_widths: list = field(default_factory=lambda: [32, 16, 24, 40, 80, 112, 192, 320, 1280])
    stage_depths: list = field(default_factory=lambda: [1, 2, 2, 3, 3, 3, 3])
    expansion: int = 6
    dropout_rate: float = 0.5
    block_dropout_rate: float = 0.2
    embed_dim: int = 512
    dilation: int = 1
    strides: list = field(default_factory=lambda: list(STAGE_STRIDES))
    kernels: list = field(default_factory=lambda: list(STAGE_KERNELS))

    def validate(self):
        if len(self.stage_widths) != 9:
            raise ConfigError(f"stage_widths needs 9 entries, got {len(self.stage_widths)}")
        if len(self.stage_depths) != 7:
            raise ConfigError(f"stage_depths needs 7 entries, got {len(self.stage_depths)}")
        if len(self.strides) != 8 or len(self.kernels) != 7:
            raise ConfigError("strides needs 8 entries and kernels 7")
        if min(self.stage_widths) < 1 or min(self.stage_depths) < 1:
            raise ConfigError("widths and depths must be positive")
        if not 0.0 <= self.dropout_rate <= 1.0 or not 0.0 <= self.block_dropout_rate <= 1.0:
            raise ConfigError("dropout rates must lie in [0, 1]")
        if self.in_channels < 1 or self.embed_dim < 1 or self.expansion < 1:
            raise ConfigError("in_channels, embed_dim and expansion must be positive")
        return self

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, (list, tuple)) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)

    @classmethod
    def for_modality(cls, spec: ModalitySpec, **overrides) -> "EncoderConfig":
        return cls(in_channels=spec.channel_count, **overrides)


def desk_profile(spec: ModalitySpec, **overrides) -> EncoderConfig:
    """Small encoder for CPU-scale experiments: quarter widths, one block per stage, no dropout."""
    base = dict(stage_widths=[8, 4, 6, 10, 20, 28, 48, 80, 320], stage_depths=[1] * 7,
                embed_dim=128, dropout_rate=0.0, block_dropout_rate=0.0)
    base.update(overrides)
    return EncoderConfig.for_modality(spec, **base)


class Bottleneck(nn.Module):
    """Inverted residual: 1x1 expand, depthwise conv, 1x1 project."""

    def __init__(self, c_in, c_out, kernel, stride, expansion, drop):
        super().__init__()
        hidden = c_in * expansion
        self.block = nn.Sequential(
            nn.Conv1d(c_in, hidden, 1, bias=False),
            nn.BatchNorm1d(hidden),
            nn.SiLU(),
            nn.Conv1d(hidden, hidden, kernel, stride, kernel // 2, groups=hidden, bias=False),
            nn.BatchNorm1d(hidden),
            nn.SiLU(),
            nn.Conv1d(hidden, c_out, 1, bias=False),
            nn.BatchNorm1d(c_out),
            nn.Dropout(drop),
        )
        self.residual = stride == 1 and c_in == c_out

    def forward(self, x):
        y = self.block(x)
        return x + y if self.residual else y


class Encoder(nn.Module):
    """Maps (batch, in_channels, clip_len) clips to (batch, embed_dim) embeddings."""

    def __init__(self, spec: ModalitySpec, config: EncoderConfig):
        super().__init__()
        config.validate()
        if config.in_channels != spec.channel_count:
            raise ConfigError(f"{spec.name} has {spec.channel_count} channels, config says {config.in_channels}")
        self.spec = spec
        self.config = config
        w, d = config.stage_widths, config.stage_depths
        layers = [nn.Sequential(
            nn.Conv1d(config.in_channels, w[0], 3, config.strides[0], padding=config.dilation,
                      dilation=config.dilation, bias=False),
            nn.BatchNorm1d(w[0]),
            nn.SiLU(),
        )]
        for i in range(7):
            blocks = [Bottleneck(w[i] if j == 0 else w[i + 1], w[i + 1], config.kernels[i],
                                 config.strides[i + 1] if j == 0 else 1, config.expansion,
                                 config.block_dropout_rate)
                      for j in range(d[i])]
            if i == 1:  # after stage 3
                blocks.append(nn.MaxPool1d(3, stride=1, padding=1))
            layers.append(nn.Sequential(*blocks))
        layers.append(nn.Sequential(nn.Conv1d(w[7], w[8], 1, bias=False), nn.BatchNorm1d(w[8]), nn.SiLU()))
        self.trunk = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool1d(1)
        self.head = nn.Sequential(nn.ReLU(), nn.Dropout(config.dropout_rate),
                                  nn.Linear(w[8], config.embed_dim))
        self._init_weights()

    @property
    def feature_dim(self) -> int:
        return self.config.stage_widths[8]

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv1d):
                fan_out = m.out_channels * m.kernel_size[0] // m.groups
                nn.init.normal_(m.weight, 0.0, math.sqrt(2.0 / fan_out))
            elif isinstance(m, nn.BatchNorm1d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Linear):
                bound = 1.0 / math.sqrt(m.in_features)
                nn.init.uniform_(m.weight, -bound, bound)
                nn.init.zeros_(m.bias)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Pooled trunk output before the embedding head."""
        self._check(x)
        return self.pool(self.trunk(x)).flatten(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    def _check(self, x):
        if x.ndim != 3 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"{self.spec.name} encoder expects (batch, {self.config.in_channels}, length) "
                             f"input, got channel count {x.shape[1] if x.ndim == 3 else '?'} "
                             f"in shape {tuple(x.shape)}")

    def temporal_lengths(self, length: int = CLIP_LEN) -> list[int]:
        """Sequence length after each trunk stage, for downsampling bookkeeping."""
        out = []
        with torch.no_grad():
            x = torch.zeros(1, self.config.in_channels, length)
            was = self.training
            self.eval()
            for layer in self.trunk:
                x = layer(x)
                out.append(x.shape[-1])
            self.train(was)
        return out


def build_encoder(spec: ModalitySpec, config: EncoderConfig | None = None, seed: int | None = None) -> Encoder:
    if config is None:
        config = EncoderConfig.for_modality(spec)
    if seed is not None:
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            return Encoder(spec, config)
    return Encoder(spec, config)


def count_parameters(enc: nn.Module) -> int:
    return sum(p.numel() for p in enc.parameters() if p.requires_grad)


def forward(enc: Encoder, batch, train_mode: bool = False) -> np.ndarray:
    """Embed a ClipBatch (or raw array) and return a numpy array."""
    data = batch.data if hasattr(batch, "data") else batch
    if hasattr(batch, "modality") and batch.modality.name != enc.spec.name:
        raise ValueError(f"batch modality {batch.modality.name} does not match {enc.spec.name} encoder")
    x = torch.as_tensor(np.asarray(data, dtype=np.float32))
    was = enc.training
    enc.train(train_mode)
    try:
        with torch.set_grad_enabled(train_mode):
            y = enc(x)
    finally:
        enc.train(was)
    return y.detach().numpy()


# checkpoints -----------------------------------------------------------------

def save_checkpoint(path, encoders: dict[str, Encoder], tau: float, extra: dict | None = None) -> None:
    """Write encoders and temperature as one ``.npz`` container with a JSON header."""
    meta = {
        "format_version": CHECKPOINT_FORMAT,
        "tau": float(tau),
        "modalities": {name: {"spec": enc.spec.to_dict(), "config": enc.config.to_dict()}
                       for name, enc in encoders.items()},
        "extra": extra or {},
    }
    arrays = {}
    for name, enc in encoders.items():
        for k, v in enc.state_dict().items():
            arrays[f"{name}/{k}"] = v.detach().cpu().numpy()
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def read_checkpoint_meta(path) -> dict:
    with np.load(path) as z:
        return json.loads(bytes(z["__meta__"]).decode())


def load_checkpoint(path, expected: dict[str, EncoderConfig] | None = None) -> tuple[dict[str, Encoder], float, dict]:
    """Rebuild encoders from a checkpoint.

    When ``expected`` configs are given they must equal the stored ones
    before any parameter is assigned.
    """
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format_version") != CHECKPOINT_FORMAT:
            raise ConfigError(f"unsupported checkpoint format {meta.get('format_version')!r}")
        encoders = {}
        for name, info in meta["modalities"].items():
            cfg = EncoderConfig.from_dict(info["config"])
            if expected is not None and name in expected and expected[name].to_dict() != cfg.to_dict():
                raise ConfigError(f"{name}: checkpoint config {cfg.to_dict()} != expected {expected[name].to_dict()}")
            enc = Encoder(ModalitySpec.from_dict(info["spec"]), cfg)
            state = {k.split("/", 1)[1]: torch.from_numpy(np.array(z[k]))
                     for k in z.files if k.startswith(name + "/")}
            enc.load_state_dict(state)
            enc.eval()
            encoders[name] = enc
    return encoders, meta["tau"], meta.get("extra", {})

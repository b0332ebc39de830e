"""Contrastive pretraining of the per-modality encoders and the temperature."""
from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .data.corpus import ClipCorpus
from .embeddings import EmbeddingSet
from .encoder import Encoder, EncoderConfig, build_encoder, desk_profile, load_checkpoint, save_checkpoint
from .losses import leave_one_out_loss, pairwise_loss, single_modality_temporal_loss
from .modalities import MODALITY_NAMES

log = logging.getLogger(__name__)

OBJECTIVES = ("pairwise", "leave_one_out", "single_modality", "pair_subset")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    objective: str = "leave_one_out"
    modalities: tuple = MODALITY_NAMES
    lr0: float = 0.01
    momentum: float = 0.9
    lr_step_epochs: int = 5
    lr_decay_factor: float = 10.0
    max_epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    early_stop_patience: int = 3
    min_delta: float = 0.0
    tau_init: float = 0.0
    reduction: str = "mean"
    encoder_profile: str = "full"
    embed_dim: int = 512
    fusion: str = "concat"
    bn_recal_batches: int = 20

    def __post_init__(self):
        if isinstance(self.modalities, str):
            self.modalities = tuple(m.strip() for m in self.modalities.split(",") if m.strip())
        self.modalities = tuple(self.modalities)
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        bad = [m for m in self.modalities if m not in MODALITY_NAMES]
        if bad:
            raise ValueError(f"unknown modalities {bad}")
        if self.objective == "single_modality" and len(self.modalities) != 1:
            raise ValueError("single_modality objective needs exactly one modality")
        if self.objective == "pair_subset" and len(self.modalities) != 2:
            raise ValueError("pair_subset objective needs exactly two modalities")
        if self.objective != "single_modality" and len(self.modalities) < 2:
            raise ValueError(f"{self.objective} objective needs at least two modalities")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.bn_recal_batches < 0:
            raise ValueError("bn_recal_batches must be non-negative")
        if self.encoder_profile not in ("full", "desk"):
            raise ValueError("encoder_profile must be 'full' or 'desk'")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["modalities"] = ",".join(self.modalities)
        return d

    def encoder_config(self, spec) -> EncoderConfig:
        if self.encoder_profile == "desk":
            return desk_profile(spec, embed_dim=self.embed_dim)
        return EncoderConfig.for_modality(spec, embed_dim=self.embed_dim)


def _coerce(value: str, typ):
    if typ in (int, "int"):
        return int(value)
    if typ in (float, "float"):
        return float(value)
    return value


def load_train_config(path, **overrides) -> TrainConfig:
    """Read a flat ``key = value`` file into a TrainConfig. Unknown keys are errors."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":"
        if sep not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split(sep, 1))
        if key not in fields:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(value.strip("'\""), fields[key].type)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: divide by ``lr_decay_factor`` every ``lr_step_epochs`` (0-based epochs)."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.lr0 / cfg.lr_decay_factor ** (epoch // cfg.lr_step_epochs)


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=cfg.lr0, momentum=cfg.momentum)


class EarlyStopper:
    """Stop once validation loss fails to improve for ``patience`` consecutive epochs."""

    def __init__(self, patience: int, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = None
        self.bad_epochs = 0

    def step(self, epoch: int, loss: float) -> bool:
        if loss < self.best - self.min_delta:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    lr: float
    tau: float
    path: str | None = None


@dataclass
class CheckpointSet:
    config: TrainConfig
    encoder_configs: dict
    specs: dict
    initial_valid_loss: float
    epochs: list = field(default_factory=list)
    best_epoch: int | None = None
    best_state: dict | None = None
    best_tau: float = 0.0
    states: dict = field(default_factory=dict)
    stopped_early: bool = False

    @property
    def valid_losses(self) -> list[float]:
        return [e.valid_loss for e in self.epochs]

    def encoders(self, epoch: int | None = None) -> dict[str, Encoder]:
        """Encoders in evaluation mode at ``epoch`` (default: best epoch)."""
        if epoch is None or epoch == self.best_epoch:
            state = self.best_state
        elif epoch in self.states:
            state = self.states[epoch]
        else:
            rec = next((e for e in self.epochs if e.epoch == epoch and e.path), None)
            if rec is None:
                raise KeyError(f"no stored parameters for epoch {epoch}")
            encs, _, _ = load_checkpoint(rec.path)
            return encs
        out = {}
        for name, st in state.items():
            enc = Encoder(self.specs[name], self.encoder_configs[name])
            enc.load_state_dict(st)
            enc.eval()
            out[name] = enc
        return out

    @property
    def tau(self) -> float:
        return self.best_tau


def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        chunk = order[start:start + size]
        if len(chunk) >= 2:
            yield chunk


class _Views:
    """Turns a list of corpus positions into the tensors one loss call needs."""

    def __init__(self, cfg: TrainConfig, corpus: ClipCorpus):
        self.cfg = cfg
        self.corpus = corpus
        if cfg.objective == "single_modality":
            nxt = corpus.next_clip()
            self.anchors = np.flatnonzero(nxt >= 0)
            self.next = nxt
        else:
            self.anchors = np.arange(len(corpus))

    def __len__(self):
        return len(self.anchors)

    def loss(self, encoders, tau, pos):
        cfg, c = self.cfg, self.corpus
        idx = self.anchors[pos]
        if cfg.objective == "single_modality":
            m = cfg.modalities[0]
            both = torch.from_numpy(np.concatenate([c.get(m, idx), c.get(m, self.next[idx])]))
            e = encoders[m](both)
            return single_modality_temporal_loss(e[: len(idx)], e[len(idx):], tau, cfg.reduction)
        embs = [encoders[m](torch.from_numpy(c.get(m, idx))) for m in cfg.modalities]
        if cfg.objective == "leave_one_out":
            return leave_one_out_loss(embs, tau, cfg.reduction)
        return pairwise_loss(embs, tau, cfg.reduction)


def _evaluate(views: _Views, encoders, tau, batch_size) -> float:
    for enc in encoders.values():
        enc.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for pos in _batches(np.arange(len(views)), batch_size):
            total += float(views.loss(encoders, tau, pos)) * len(pos)
            count += len(pos)
    return total / count if count else math.nan


def recalibrate_batch_norm(encoders, clips: ClipCorpus, n_batches: int, batch_size: int, seed: int = 0) -> None:
    """Replace batch-norm running statistics with plain averages over ``n_batches`` training batches.

    The exponential running averages lag far behind the weights at high
    learning rates, which makes evaluation-mode outputs erratic.
    """
    if n_batches <= 0 or len(clips) == 0:
        return
    order = np.random.default_rng(seed).permutation(len(clips))
    chunks = list(_batches(order, batch_size))[:n_batches]
    for m, enc in encoders.items():
        bns = [mod for mod in enc.modules() if isinstance(mod, torch.nn.modules.batchnorm._BatchNorm)]
        saved = [mod.momentum for mod in bns]
        for mod in bns:
            mod.reset_running_stats()
            mod.momentum = None  # cumulative average
        enc.train()
        with torch.no_grad():
            for pos in chunks:
                enc(torch.from_numpy(clips.get(m, np.sort(pos))))
        for mod, mom in zip(bns, saved):
            mod.momentum = mom
        enc.eval()


def _grad_norm(params) -> float:
    sq = sum(float((p.grad.detach() ** 2).sum()) for p in params if p.grad is not None)
    return math.sqrt(sq)


def build_encoders(cfg: TrainConfig, corpus: ClipCorpus) -> dict[str, Encoder]:
    out = {}
    for i, m in enumerate(cfg.modalities):
        spec = corpus.spec(m)
        out[m] = build_encoder(spec, cfg.encoder_config(spec), seed=cfg.seed * 1000 + i)
    return out


def pretrain(cfg: TrainConfig, pretrain_clips: ClipCorpus, valid_clips: ClipCorpus,
             encoders: Mapping[str, Encoder] | None = None, out_dir=None,
             keep_states: bool = False) -> CheckpointSet:
    """Train encoders and temperature with SGD + momentum and a step LR schedule.

    Validation loss is measured before training and after every epoch; the
    best epoch is the one with the lowest validation loss. With ``out_dir``
    every epoch's checkpoint and an append-only ``metrics.csv`` are written.
    """
    if len(pretrain_clips) == 0:
        raise ValueError("pretraining set is empty")
    torch.manual_seed(cfg.seed)
    encoders = dict(encoders) if encoders is not None else build_encoders(cfg, pretrain_clips)
    tau = torch.nn.Parameter(torch.tensor(float(cfg.tau_init)))
    params = [p for enc in encoders.values() for p in enc.parameters()] + [tau]
    opt = make_optimizer(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    train_views, valid_views = _Views(cfg, pretrain_clips), _Views(cfg, valid_clips)
    if len(train_views) < 2:
        raise ValueError("pretraining set has fewer than two usable samples")

    out = CheckpointSet(cfg, {m: e.config for m, e in encoders.items()},
                        {m: e.spec for m, e in encoders.items()},
                        _evaluate(valid_views, encoders, tau, cfg.batch_size))
    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "metrics.csv"
        new = not log_path.exists()
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(["epoch", "train_loss", "valid_loss", "lr", "tau"])
        writer.writerow([0, "", f"{out.initial_valid_loss:.10g}", "", f"{cfg.tau_init:.10g}"])
    stopper = EarlyStopper(cfg.early_stop_patience, cfg.min_delta)
    log.info("epoch 0: valid %.5f", out.initial_valid_loss)
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            lr = lr_at_epoch(cfg, epoch - 1)
            for group in opt.param_groups:
                group["lr"] = lr
            for enc in encoders.values():
                enc.train()
            order = rng.permutation(len(train_views))
            total, count = 0.0, 0
            for b, pos in enumerate(_batches(order, cfg.batch_size)):
                opt.zero_grad()
                loss = train_views.loss(encoders, tau, pos)
                if not torch.isfinite(loss):
                    loss.backward()
                    raise TrainingDiverged(
                        f"non-finite loss {loss.item()} at epoch {epoch}, batch {b}, "
                        f"tau={tau.item():.6g}, grad-norm={_grad_norm(params):.6g}")
                loss.backward()
                opt.step()
                total += loss.item() * len(pos)
                count += len(pos)
            recalibrate_batch_norm(encoders, pretrain_clips, cfg.bn_recal_batches, cfg.batch_size,
                                   seed=cfg.seed * 7919 + epoch)
            valid = _evaluate(valid_views, encoders, tau, cfg.batch_size)
            rec = EpochRecord(epoch, total / count, valid, lr, tau.item())
            state = {m: copy.deepcopy(e.state_dict()) for m, e in encoders.items()}
            if keep_states:
                out.states[epoch] = state
            if out_dir is not None:
                rec.path = str(out_dir / f"epoch{epoch:03d}.npz")
                save_checkpoint(rec.path, encoders, rec.tau, {"epoch": epoch, "valid_loss": valid})
                writer.writerow([epoch, f"{rec.train_loss:.10g}", f"{valid:.10g}", f"{lr:.10g}", f"{rec.tau:.10g}"])
                fh.flush()
            out.epochs.append(rec)
            log.info("epoch %d: train %.5f valid %.5f lr %.3g tau %.4f", epoch, rec.train_loss, valid, lr, rec.tau)
            stop = stopper.step(epoch, valid)
            if stopper.best_epoch == epoch:
                out.best_epoch, out.best_state, out.best_tau = epoch, state, rec.tau
            if stop:
                out.stopped_early = True
                break
    finally:
        if writer is not None:
            fh.close()
    if out_dir is not None and out.best_epoch is not None:
        best_path = out_dir / "best.npz"
        encs = out.encoders()
        save_checkpoint(best_path, encs, out.best_tau, {"epoch": out.best_epoch})
        (out_dir / "best.json").write_text(json.dumps(
            {"best_epoch": out.best_epoch, "path": str(best_path),
             "valid_losses": out.valid_losses, "initial_valid_loss": out.initial_valid_loss}, indent=2))
    return out


def extract_embeddings(checkpoint, clips: ClipCorpus, fusion: str = "concat",
                       batch_size: int = 64) -> EmbeddingSet:
    """Evaluation-mode embeddings per modality plus a fused representation.

    ``checkpoint`` may be a CheckpointSet, a checkpoint path, or a mapping of
    modality name to Encoder.
    """
    if isinstance(checkpoint, CheckpointSet):
        encoders = checkpoint.encoders()
    elif isinstance(checkpoint, (str, os.PathLike)):
        encoders, _, _ = load_checkpoint(checkpoint)
    else:
        encoders = dict(checkpoint)
    for m, enc in encoders.items():
        if m not in clips.modalities:
            raise ValueError(f"checkpoint has a {m} encoder but clips only carry {clips.modalities}")
        if clips.spec(m).channel_count != enc.config.in_channels:
            raise ValueError(f"{m}: clips have {clips.spec(m).channel_count} channels, "
                             f"encoder expects {enc.config.in_channels}")
    per = {}
    n = len(clips)
    for m, enc in encoders.items():
        enc.eval()
        dim = enc.config.embed_dim
        arr = np.zeros((n, dim), np.float32)
        with torch.no_grad():
            for start in range(0, n, batch_size):
                idx = np.arange(start, min(n, start + batch_size))
                arr[idx] = enc(torch.from_numpy(clips.get(m, idx))).numpy()
        per[m] = arr
    return EmbeddingSet(per, clips.participant_ids.copy(), clips.clip_indices.copy(),
                        {k: v.copy() for k, v in clips.labels.items()}, clips.split.copy(),
                        fusion=fusion, rec_of=clips.rec_of.copy())

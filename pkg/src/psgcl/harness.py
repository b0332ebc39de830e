"""Experiment plans that chain pretraining, embedding and probing.

The pieces here are what the CLI verbs call: modality ablations, the
end-to-end supervised baseline, external-site validation and figure output.
Every run directory gets a ``manifest.json`` (config hash, seed, code version).
"""
from __future__ import annotations

import csv
import copy
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from . import __version__
from .data.corpus import ClipCorpus, build_corpus
from .data.recording import read_alias_map
from .data.splits import ManifestRow, read_manifest
from .embeddings import EmbeddingSet
from .encoder import Encoder, load_checkpoint
from .modalities import MODALITY_NAMES
from .pretrain import EarlyStopper, TrainConfig, build_encoders, extract_embeddings, lr_at_epoch, make_optimizer, pretrain
from .probe import FEW_SHOT_K, TASKS, FewShotCurve, MetricsReport, evaluate_task, few_shot_curve, score_predictions

log = logging.getLogger(__name__)

ABLATION_SUBSETS = (("BAS", "ECG", "RESP"), ("BAS", "RESP"), ("BAS", "ECG"), ("ECG", "RESP"), ("BAS",), ("RESP",))
# which modality's embeddings each downstream task is probed on
EVAL_MODALITY = {"stage5": "BAS", "sdb": "RESP"}


def objective_for(modalities: Sequence[str]) -> str:
    """Default objective for a modality subset: 1 -> adjacent clips, 2 -> pairwise, 3+ -> leave-one-out."""
    n = len(modalities)
    if n == 1:
        return "single_modality"
    return "pairwise" if n == 2 else "leave_one_out"


def subset_name(modalities: Sequence[str]) -> str:
    return "+".join(modalities)


@dataclass
class ExperimentPlan:
    name: str
    modalities: tuple = MODALITY_NAMES
    objective: str | None = None
    tasks: tuple = ("stage5", "sdb")
    eval_modality: dict = field(default_factory=lambda: dict(EVAL_MODALITY))
    seeds: tuple = (0,)
    out_dir: str | None = None
    train: dict = field(default_factory=dict)  # TrainConfig overrides

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        bad = [m for m in self.modalities if m not in MODALITY_NAMES]
        if bad or not self.modalities:
            raise ValueError(f"bad modality subset {self.modalities}")
        if len(self.modalities) == 1:
            if self.objective not in (None, "single_modality"):
                log.info("%s: single-modality plan forces the temporal-adjacent objective", self.name)
            self.objective = "single_modality"
        elif self.objective is None:
            self.objective = objective_for(self.modalities)
        elif self.objective == "single_modality":
            raise ValueError("single_modality objective needs a one-modality plan")
        unknown = [t for t in self.tasks if t not in TASKS]
        if unknown:
            raise ValueError(f"unknown tasks {unknown}")

    def train_config(self, seed: int | None = None) -> TrainConfig:
        over = dict(self.train)
        over.update(objective=self.objective, modalities=self.modalities)
        if seed is not None:
            over["seed"] = seed
        return TrainConfig(**over)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["modalities"] = list(self.modalities)
        return d


# manifests -------------------------------------------------------------------

def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def source_digest() -> str:
    """Hash of the package sources, a stand-in for a commit id."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*.py")):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def write_run_manifest(out_dir, name: str, config: Mapping, seed: int, extra: Mapping | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"name": name, "seed": seed, "config": dict(config), "config_hash": config_hash(config),
           "version": __version__, "source_digest": source_digest(), "torch": torch.__version__,
           "numpy": np.__version__}
    if extra:
        doc.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
    return path


# ablation --------------------------------------------------------------------

@dataclass
class AblationResult:
    curves: dict = field(default_factory=dict)   # subset name -> list[FewShotCurve]
    skipped: dict = field(default_factory=dict)  # subset name -> {task: reason}
    checkpoints: dict = field(default_factory=dict)

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "task", "source", "k", "auroc", "auprc", "replicates"])
            for variant, curves in self.curves.items():
                for c in curves:
                    for r in c.rows():
                        w.writerow([variant, r["task"], r["source"], r["k"], f"{r['auroc']:.6g}",
                                    f"{r['auprc']:.6g}", r["replicates"]])


def usable_k_grid(n_participants: int, k_values=FEW_SHOT_K) -> list:
    """Drop grid points larger than the available participant pool; 'all' is always kept."""
    out = [k for k in k_values if k == "all" or int(k) < n_participants]
    return out if "all" in out else out + ["all"]


def _n_labelled_participants(embset: EmbeddingSet, task: str) -> int:
    y = embset.labels[TASKS[task][0]]
    return len(set(embset.participant_ids[y >= 0].astype(str)))


def run_plan_curves(plan: ExperimentPlan, embset: EmbeddingSet, k_values=FEW_SHOT_K, replicates: int = 3,
                    seed: int = 0) -> tuple[list[FewShotCurve], dict]:
    """Few-shot curves for each of the plan's tasks on that task's evaluation modality."""
    curves, skipped = [], {}
    train, test = embset.by_split("train"), embset.by_split("test")
    for task in plan.tasks:
        source = plan.eval_modality.get(task, "fused")
        if source != "fused" and source not in embset.modalities:
            reason = f"no {source} encoder in subset {subset_name(plan.modalities)}"
            log.info("%s: skipping %s (%s)", plan.name, task, reason)
            skipped[task] = reason
            continue
        ks = usable_k_grid(_n_labelled_participants(train, task), k_values)
        curve = few_shot_curve(train, test, ks, task=task, replicates=replicates, seed=seed, source=source)
        curves.append(curve)
    return curves, skipped


def run_ablation(corpus: ClipCorpus, base: Mapping | None = None, subsets=ABLATION_SUBSETS,
                 tasks=("stage5", "sdb"), k_values=FEW_SHOT_K, replicates: int = 3, seed: int = 0,
                 out_dir=None) -> AblationResult:
    """Pretrain one model per modality subset and trace its few-shot curves.

    ``corpus`` needs pretrain/valid/train/test splits. ``base`` holds
    TrainConfig overrides shared by all subsets (objective and modalities are
    set per subset).
    """
    result = AblationResult()
    base = {k: v for k, v in dict(base or {}).items() if k not in ("objective", "modalities")}
    out_dir = Path(out_dir) if out_dir is not None else None
    for subset in subsets:
        name = subset_name(subset)
        plan = ExperimentPlan(name, tuple(subset), tasks=tuple(tasks), seeds=(seed,), train=base)
        cfg = plan.train_config(seed)
        sub = corpus.select_modalities(subset)
        run_dir = out_dir / name if out_dir is not None else None
        log.info("ablation %s: objective %s", name, plan.objective)
        ck = pretrain(cfg, sub.by_split("pretrain"), sub.by_split("valid"), out_dir=run_dir)
        result.checkpoints[name] = ck
        emb = extract_embeddings(ck, sub.subset(np.flatnonzero(np.isin(sub.split, ("train", "test")))))
        curves, skipped = run_plan_curves(plan, emb, k_values, replicates, seed)
        result.curves[name], result.skipped[name] = curves, skipped
        if run_dir is not None:
            write_run_manifest(run_dir, name, {"plan": plan.to_dict(), "train": cfg.to_dict()}, seed,
                               {"skipped": skipped})
    if out_dir is not None:
        result.write(out_dir / "ablation_curves.csv")
    return result


# supervised baseline ---------------------------------------------------------

class SupervisedNet(nn.Module):
    """Modality trunks -> concatenated pooled features -> dropout -> linear head."""

    def __init__(self, encoders: Mapping[str, Encoder], n_classes: int, dropout: float = 0.5):
        super().__init__()
        self.names = list(encoders)
        self.encoders = nn.ModuleDict(encoders)
        width = sum(e.feature_dim for e in encoders.values())
        self.drop = nn.Dropout(dropout)
        self.head = nn.Linear(width, n_classes)

    def forward(self, inputs: Mapping[str, torch.Tensor]) -> torch.Tensor:
        feats = [self.encoders[m].features(inputs[m]) for m in self.names]
        return self.head(self.drop(torch.cat(feats, dim=1)))


def _labelled(corpus: ClipCorpus, task: str, splits: Sequence[str]) -> np.ndarray:
    y = corpus.labels[TASKS[task][0]]
    return np.flatnonzero(np.isin(corpus.split, splits) & (y >= 0))


def _predict(net: SupervisedNet, corpus: ClipCorpus, idx: np.ndarray, batch: int = 64) -> np.ndarray:
    net.eval()
    out = []
    with torch.no_grad():
        for s in range(0, len(idx), batch):
            b = idx[s:s + batch]
            out.append(net({m: torch.from_numpy(corpus.get(m, b)) for m in net.names}))
    return torch.cat(out).numpy() if out else np.zeros((0, net.head.out_features), np.float32)


def _ce(net, corpus, idx, y, batch) -> float:
    logits = torch.from_numpy(_predict(net, corpus, idx, batch))
    return float(nn.functional.cross_entropy(logits, torch.from_numpy(y[idx]), reduction="mean"))


def run_supervised_baseline(task: str, clips: ClipCorpus, cfg: TrainConfig | None = None,
                            train_splits=("pretrain", "train"), valid_split="valid", test_split="test",
                            n_boot: int = 1000, return_history: bool = False):
    """Train encoders and a classification head end to end with cross-entropy.

    Uses the pretraining optimiser, schedule and early stopping. By default it
    trains on the pretrain and train splits together, i.e. more labelled
    participants than the probes get; pass ``train_splits=("train",)`` to match
    the probes instead.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    cfg = cfg or TrainConfig()
    n_classes = len(TASKS[task][1])
    y = clips.labels[TASKS[task][0]].astype(np.int64)
    tr, va, te = (_labelled(clips, task, s) for s in (tuple(train_splits), (valid_split,), (test_split,)))
    if len(tr) < 2 or len(te) == 0:
        raise ValueError(f"not enough labelled clips for {task}: train {len(tr)}, test {len(te)}")
    if "pretrain" in train_splits:
        log.warning("supervised baseline trains on %s; probes only see the train split", "+".join(train_splits))
    torch.manual_seed(cfg.seed)
    mods = [m for m in cfg.modalities if m in clips.modalities]
    net = SupervisedNet(build_encoders(dataclasses.replace(cfg, modalities=tuple(mods),
                                                           objective="pairwise" if len(mods) > 1 else "single_modality"),
                                       clips), n_classes)
    opt = make_optimizer(net.parameters(), cfg)
    rng = np.random.default_rng(cfg.seed)
    stopper = EarlyStopper(cfg.early_stop_patience, cfg.min_delta)
    best = copy.deepcopy(net.state_dict())
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        for g in opt.param_groups:
            g["lr"] = lr_at_epoch(cfg, epoch - 1)
        net.train()
        order = tr[rng.permutation(len(tr))]
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            b = np.sort(order[s:s + cfg.batch_size])
            if len(b) < 2:
                continue
            opt.zero_grad()
            logits = net({m: torch.from_numpy(clips.get(m, b)) for m in mods})
            loss = nn.functional.cross_entropy(logits, torch.from_numpy(y[b]))
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite baseline loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item() * len(b)
        train_loss = total / len(tr)
        valid_loss = _ce(net, clips, va, y, cfg.batch_size) if len(va) else train_loss
        history.append((epoch, train_loss, valid_loss))
        log.info("baseline %s epoch %d: train %.5f valid %.5f", task, epoch, train_loss, valid_loss)
        stop = stopper.step(epoch, valid_loss)
        if stopper.best_epoch == epoch:
            best = copy.deepcopy(net.state_dict())
        if stop:
            break
    net.load_state_dict(best)
    probs = torch.softmax(torch.from_numpy(_predict(net, clips, te, cfg.batch_size)), dim=1).numpy()
    report = score_predictions(task, probs.astype(np.float64), y[te], source="supervised",
                               n_boot=n_boot, seed=cfg.seed)
    return (report, history) if return_history else report


# external validation ---------------------------------------------------------

def assign_external_splits(rows: Sequence[ManifestRow], n_test: int = 100, seed: int = 0) -> list[ManifestRow]:
    """Keep explicit train/test tags; otherwise hold out up to ``n_test`` participants (at most half)."""
    if all(r.split in ("train", "test") for r in rows):
        return list(rows)
    ids = sorted({r.participant_id for r in rows})
    n = min(n_test, len(ids) // 2) if len(ids) > 1 else 0
    if n == 0:
        raise ValueError("external validation needs at least two participants")
    test = set(np.random.default_rng(seed).permutation(ids)[:n].tolist())
    return [dataclasses.replace(r, split="test" if r.participant_id in test else "train") for r in rows]


def run_external_validation(checkpoint, external_manifest, alias_map=None, n_test: int = 100, seed: int = 0,
                            cache_dir=None, n_boot: int = 1000, task: str = "stage5",
                            source: str = "fused") -> MetricsReport:
    """Frozen-encoder probe on an external cohort, with per-class F1.

    Channels are mapped through ``alias_map`` and any still missing are zero
    padded. Recordings that cannot be mapped are skipped and summarised.
    """
    rows = read_manifest(external_manifest) if not isinstance(external_manifest, (list, tuple)) else list(external_manifest)
    if not rows:
        raise ValueError("external manifest is empty")
    encoders, _, _ = load_checkpoint(checkpoint) if not isinstance(checkpoint, Mapping) else (dict(checkpoint), 0, {})
    specs = tuple(e.spec for e in encoders.values())
    aliases = read_alias_map(alias_map) if isinstance(alias_map, (str, Path)) else (alias_map or {})
    rows = assign_external_splits(rows, n_test, seed)
    corpus = build_corpus(rows, cache_dir, specs, aliases=aliases, pad_missing=True, skip_failures=True)
    if corpus.skipped:
        log.warning("external validation skipped %d recording(s): %s", len(corpus.skipped),
                    "; ".join(f"{pid}: {why}" for pid, why in corpus.skipped))
    if len(corpus) == 0:
        raise ValueError("no external recording could be mapped onto the checkpoint's channels")
    emb = extract_embeddings(encoders, corpus)
    return evaluate_task(emb, task, source=source, n_boot=n_boot, seed=seed, with_f1=True)[0]


# figures ---------------------------------------------------------------------

def _k_sort(k: str):
    return (1, 0) if k == "all" else (0, int(k))


def emit_figures(results_dir, out_dir=None) -> list[Path]:
    """One PNG per (task, metric) from every curve table under ``results_dir``.

    Each line is one variant (the file's variant column, or its stem).
    The plotted numbers are also written to ``figure_data.csv``.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    results_dir = Path(results_dir)
    out_dir = Path(out_dir) if out_dir is not None else results_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    table = {}
    for path in sorted(results_dir.rglob("*curve*.csv")):
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                variant = r.get("variant") or path.stem
                for metric in ("auroc", "auprc"):
                    key = (r["task"], metric)
                    table.setdefault(key, {}).setdefault(variant, {})[r["k"]] = float(r[metric])
    written = []
    with open(out_dir / "figure_data.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "metric", "variant", "k", "value"])
        for (task, metric), lines in sorted(table.items()):
            fig, ax = plt.subplots(figsize=(5, 3.5))
            ticks = sorted({k for pts in lines.values() for k in pts}, key=_k_sort)
            pos = {k: i for i, k in enumerate(ticks)}
            for variant, pts in sorted(lines.items()):
                ks = sorted(pts, key=_k_sort)
                ax.plot([pos[k] for k in ks], [pts[k] for k in ks], marker="o", label=variant)
                for k in ks:
                    w.writerow([task, metric, variant, k, f"{pts[k]:.6g}"])
            ax.set_xticks(range(len(ticks)), ticks)
            ax.set_xlabel("number of participants")
            ax.set_ylabel(metric.upper())
            ax.set_title(task)
            ax.legend(fontsize=7)
            fig.tight_layout()
            path = out_dir / f"{task}_{metric}.png"
            fig.savefig(path, dpi=100, metadata={"Software": None})
            plt.close(fig)
            written.append(path)
    if not written:
        log.warning("no curve tables under %s", results_dir)
    return written

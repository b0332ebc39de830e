"""
Pretraining, retrieval and linear probes on a small synthetic corpus
======================================================================

A compact end-to-end run: twelve synthetic participants, desk-sized
encoders, a few epochs of leave-one-out pretraining, then cross-modal
retrieval and stage/SDB probes on held-out participants. Expect a few
minutes on one CPU core. The acceptance suite runs the same pipeline at
forty participants.
"""

import logging
import tempfile
from pathlib import Path

import numpy as np

from psgcl.data import ManifestRow, SynthParams, build_corpus, split_participants, synthesize_recording
from psgcl.data.recording import save_native_recording
from psgcl.pretrain import TrainConfig, extract_embeddings, pretrain
from psgcl.probe import evaluate_task
from psgcl.retrieval import cross_modal_matrix

logging.basicConfig(level=logging.INFO, format="%(message)s")
work = Path(tempfile.mkdtemp(prefix="psgcl-demo-"))

# 1. data: write native recordings and index them through the clip cache
params = SynthParams(duration_s=1800.0, coupling=0.9)
ids = [f"demo{i:02d}" for i in range(12)]
splits = split_participants(ids, {"pretrain": 0.5, "train": 0.25, "valid": 1 / 12, "test": 1 / 6}, seed=0)
rows = []
for i, pid in enumerate(ids):
    save_native_recording(synthesize_recording(params, seed=i, participant_id=pid), work / f"{pid}.npz")
    rows.append(ManifestRow(pid, str(work / f"{pid}.npz"), splits[pid]))
corpus = build_corpus(rows, work / "cache")
print({s: int((corpus.split == s).sum()) for s in ("pretrain", "train", "valid", "test")}, "clips per split")

# 2. pretraining; the desk profile is the small CPU-friendly encoder
cfg = TrainConfig(encoder_profile="desk", embed_dim=128, lr0=0.1, max_epochs=4)
ck = pretrain(cfg, corpus.by_split("pretrain"), corpus.by_split("valid"), out_dir=work / "run")
print("validation loss per epoch:", [round(v, 3) for v in [ck.initial_valid_loss] + ck.valid_losses])

# 3. frozen embeddings for the probe splits
emb = extract_embeddings(ck, corpus.subset(np.flatnonzero(np.isin(corpus.split, ("train", "test")))))

# 4. retrieval: does a BAS clip find its own ECG / RESP window?
test = emb.by_split("test")
for (q, t), r in cross_modal_matrix(test, len(test), 10).items():
    print(f"{q:>4} -> {t:<4} Recall@10 {r.recall_at_k:.2f}  median rank {r.median_rank:g} of {r.n_candidates}")

# 5. linear probes on the fused embedding: fit on the train split, score on test
for task in ("stage5", "sdb"):
    rep = evaluate_task(emb, task, n_boot=200)[0]
    print(f"{task}: macro AUROC {rep.metric('auroc'):.3f}, AUPRC {rep.metric('auprc'):.3f}")
print("outputs in", work)

"""
Few-shot label efficiency and figure export
============================================

Probe quality as a function of how many labelled participants the probe
is allowed to see. Embeddings here are simulated directly (class centres
plus per-participant offsets) so the script runs in seconds.
"""

import tempfile
from pathlib import Path

import numpy as np

from psgcl.embeddings import EmbeddingSet
from psgcl.harness import emit_figures
from psgcl.probe import FEW_SHOT_K, few_shot_curve, write_curve

rng = np.random.default_rng(0)
n_part, clips, d = 40, 60, 16
stage = rng.integers(0, 5, n_part * clips)
sdb = (rng.random(n_part * clips) < 0.05).astype(int)
pid = np.repeat([f"p{i:02d}" for i in range(n_part)], clips).astype(object)
offset = np.repeat(rng.standard_normal((n_part, d)), clips, axis=0)  # participant effect


def embeddings(signal):
    centres = rng.standard_normal((5, d)) * signal
    x = centres[stage] + offset + rng.standard_normal((len(stage), d))
    x[:, 0] += 2 * signal * sdb
    return x.astype(np.float32)


split = np.where(np.repeat(np.arange(n_part), clips) < 30, "train", "test").astype(object)
out = Path(tempfile.mkdtemp(prefix="psgcl-fewshot-"))
for variant, signal in (("strong", 1.0), ("weak", 0.4)):
    emb = EmbeddingSet({"BAS": embeddings(signal)}, pid, np.tile(np.arange(clips), n_part),
                       {"stage_label": stage, "sdb_label": sdb}, split)
    tr, te = emb.by_split("train"), emb.by_split("test")
    grid = [k for k in FEW_SHOT_K if k == "all" or k < 30]
    curves = [few_shot_curve(tr, te, grid, task=t, replicates=3, source="BAS") for t in ("stage5", "sdb")]
    write_curve(curves, out / f"{variant}_curve.csv", variant=variant)
    print(variant, {k: round(v, 3) for k, v in curves[0].mean().items()})

# one PNG per (task, metric); the plotted numbers land in figure_data.csv
for path in emit_figures(out):
    print(path)

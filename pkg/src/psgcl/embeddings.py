"""Aligned per-modality embeddings with clip identity, labels and split tags."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LABEL_FIELDS = ("stage_label", "sdb_label", "age_group", "sex")
FORMAT_VERSION = 1


@dataclass
class EmbeddingSet:
    per_modality: dict
    participant_ids: np.ndarray
    clip_indices: np.ndarray
    labels: dict
    split: np.ndarray
    fusion: str = "concat"
    rec_of: np.ndarray | None = None
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.participant_ids)
        for m, arr in self.per_modality.items():
            if len(arr) != n:
                raise ValueError(f"{m} embeddings have {len(arr)} rows, expected {n}")
        if self.fusion not in ("concat", "mean"):
            raise ValueError(f"fusion must be 'concat' or 'mean', got {self.fusion!r}")
        self.participant_ids = np.asarray(self.participant_ids, dtype=object)
        self.split = np.asarray(self.split, dtype=object)
        if self.rec_of is None:
            _, self.rec_of = np.unique(self.participant_ids.astype(str), return_inverse=True)

    def __len__(self):
        return len(self.participant_ids)

    @property
    def modalities(self) -> list[str]:
        return list(self.per_modality)

    @property
    def fused(self) -> np.ndarray:
        arrays = list(self.per_modality.values())
        if not arrays:
            return np.zeros((len(self), 0), np.float32)
        if self.fusion == "mean":
            return np.mean(arrays, axis=0)
        return np.concatenate(arrays, axis=1)

    def features(self, source: str = "fused") -> np.ndarray:
        if source == "fused":
            return self.fused
        if source not in self.per_modality:
            raise KeyError(f"no {source!r} embeddings (have {self.modalities})")
        return self.per_modality[source]

    def subset(self, idx) -> "EmbeddingSet":
        idx = np.asarray(idx)
        idx = np.flatnonzero(idx) if idx.dtype == bool else idx.astype(np.int64)
        return EmbeddingSet({m: a[idx] for m, a in self.per_modality.items()},
                            self.participant_ids[idx], self.clip_indices[idx],
                            {k: v[idx] for k, v in self.labels.items()}, self.split[idx],
                            self.fusion, self.rec_of[idx], dict(self.source))

    def by_split(self, split: str) -> "EmbeddingSet":
        return self.subset(self.split == split)

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        arrays = {f"emb_{m}": a for m, a in self.per_modality.items()}
        arrays.update({f"label_{k}": v for k, v in self.labels.items()})
        np.savez(d / "embeddings.npz", clip_indices=self.clip_indices, rec_of=self.rec_of,
                 participant_ids=self.participant_ids.astype(str), split=self.split.astype(str), **arrays)
        (d / "embeddings.json").write_text(json.dumps(
            {"format_version": FORMAT_VERSION, "modalities": self.modalities,
             "fusion": self.fusion, "source": self.source}, indent=2))
        return d

    @classmethod
    def load(cls, directory) -> "EmbeddingSet":
        d = Path(directory)
        meta = json.loads((d / "embeddings.json").read_text())
        with np.load(d / "embeddings.npz") as z:
            per = {m: z[f"emb_{m}"] for m in meta["modalities"]}
            labels = {k: z[f"label_{k}"] for k in LABEL_FIELDS if f"label_{k}" in z.files}
            return cls(per, z["participant_ids"].astype(object), z["clip_indices"], labels,
                       z["split"].astype(object), meta["fusion"], z["rec_of"], meta.get("source", {}))

"""On-disk clip cache and the aligned multi-modal clip corpus built on it.

Each (recording, modality) pair is cached as a little-endian float32 ``.npy``
array of shape (n_clips, channels, clip_len); a JSON sidecar per recording
holds identity and label arrays. Files are written once via an atomic
rename, so concurrent writers of the same key race harmlessly.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..modalities import CLIP_SECONDS, DEFAULT_SPECS, TARGET_HZ, ModalitySpec
from .clips import ClipBatch, preprocess
from .recording import MissingChannel, load_recording
from .splits import ManifestRow

log = logging.getLogger(__name__)

CACHE_ENV = "PSGCL_CACHE"
CACHE_VERSION = 1
SEX_CODES = {"male": 0, "m": 0, "female": 1, "f": 1}


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "psgcl"))


class ClipCorpus:
    """Aligned clips of several modalities across many recordings.

    Clip arrays stay wherever they live (often memory-mapped cache files);
    only the per-clip index and label vectors are held in memory.
    """

    LABEL_FIELDS = ("stage_label", "sdb_label", "age_group", "sex")

    def __init__(self, specs: Sequence[ModalitySpec], arrays: Mapping[str, list],
                 rec_of, local, participant_ids, clip_indices, labels: Mapping[str, np.ndarray],
                 split=None):
        self.specs = tuple(specs)
        self.arrays = {k: list(v) for k, v in arrays.items()}
        self.rec_of = np.asarray(rec_of, np.int64)
        self.local = np.asarray(local, np.int64)
        self.participant_ids = np.asarray(participant_ids, dtype=object)
        self.clip_indices = np.asarray(clip_indices, np.int64)
        n = len(self.rec_of)
        self.labels = {k: np.asarray(labels.get(k, np.full(n, -1)), np.int64) for k in self.LABEL_FIELDS}
        self.split = np.asarray(split if split is not None else np.full(n, ""), dtype=object)

    def __len__(self):
        return len(self.rec_of)

    @property
    def modalities(self) -> list[str]:
        return [s.name for s in self.specs]

    def spec(self, name: str) -> ModalitySpec:
        for s in self.specs:
            if s.name == name:
                return s
        raise KeyError(f"corpus has no modality {name!r} (has {self.modalities})")

    @property
    def clip_len(self) -> int:
        first = self.arrays[self.specs[0].name]
        return first[0].shape[-1] if first else 0

    def get(self, modality: str, idx) -> np.ndarray:
        idx = np.asarray(idx, np.int64)
        spec = self.spec(modality)
        out = np.empty((len(idx), spec.channel_count, self.clip_len), np.float32)
        recs = self.rec_of[idx]
        loc = self.local[idx]
        for r in np.unique(recs):
            m = recs == r
            out[m] = self.arrays[modality][r][loc[m]]
        return out

    def batch(self, modality: str, idx) -> ClipBatch:
        idx = np.asarray(idx, np.int64)
        return ClipBatch(self.spec(modality), self.get(modality, idx), self.participant_ids[idx],
                         self.clip_indices[idx], **{k: v[idx] for k, v in self.labels.items()})

    def subset(self, idx) -> "ClipCorpus":
        idx = np.asarray(idx)
        idx = np.flatnonzero(idx) if idx.dtype == bool else idx.astype(np.int64)
        return ClipCorpus(self.specs, self.arrays, self.rec_of[idx], self.local[idx],
                          self.participant_ids[idx], self.clip_indices[idx],
                          {k: v[idx] for k, v in self.labels.items()}, self.split[idx])

    def select_modalities(self, names: Iterable[str]) -> "ClipCorpus":
        specs = [self.spec(n) for n in names]
        return ClipCorpus(specs, {s.name: self.arrays[s.name] for s in specs}, self.rec_of,
                          self.local, self.participant_ids, self.clip_indices, self.labels, self.split)

    def by_split(self, split: str) -> "ClipCorpus":
        return self.subset(self.split == split)

    def next_clip(self) -> np.ndarray:
        """Position of the clip immediately following each clip in the same recording, -1 if none."""
        key = {(r, c): i for i, (r, c) in enumerate(zip(self.rec_of.tolist(), self.clip_indices.tolist()))}
        return np.array([key.get((r, c + 1), -1)
                         for r, c in zip(self.rec_of.tolist(), self.clip_indices.tolist())], np.int64)

    @classmethod
    def from_batches(cls, recordings: Sequence[Mapping[str, ClipBatch]], splits: Sequence[str] | None = None):
        """Build an in-memory corpus from per-recording ``{modality: ClipBatch}`` dicts."""
        if not recordings:
            raise ValueError("no recordings given")
        names = list(recordings[0])
        specs = [recordings[0][n].modality for n in names]
        arrays = {n: [] for n in names}
        rec_of, local, pids, cidx = [], [], [], []
        labels = {k: [] for k in cls.LABEL_FIELDS}
        split = []
        for r, rec in enumerate(recordings):
            ref = rec[names[0]]
            for n in names:
                if not np.array_equal(rec[n].clip_indices, ref.clip_indices):
                    raise ValueError(f"recording {r}: modality {n} clips are not aligned with {names[0]}")
                arrays[n].append(rec[n].data)
            k = len(ref)
            rec_of.append(np.full(k, r))
            local.append(np.arange(k))
            pids.append(ref.participant_ids)
            cidx.append(ref.clip_indices)
            for f in cls.LABEL_FIELDS:
                labels[f].append(getattr(ref, f))
            split.append(np.full(k, splits[r] if splits is not None else "", dtype=object))
        cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0)
        return cls(specs, arrays, cat(rec_of), cat(local), cat(pids), cat(cidx),
                   {k: cat(v) for k, v in labels.items()}, cat(split))


def cache_key(path: str, specs: Sequence[ModalitySpec], aliases, pad_missing: bool,
              target_hz: float, clip_seconds: float) -> str:
    st = os.stat(path)
    blob = json.dumps({
        "v": CACHE_VERSION, "path": os.path.abspath(path), "size": st.st_size, "mtime": st.st_mtime_ns,
        "specs": [s.to_dict() for s in specs], "aliases": sorted((aliases or {}).items()),
        "pad": pad_missing, "hz": target_hz, "clip": clip_seconds,
    }, sort_keys=True)
    return hashlib.sha1(blob.encode()).hexdigest()[:16]


def _atomic_save(path: Path, array: np.ndarray):
    tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp.npy")
    np.save(tmp, np.ascontiguousarray(array, dtype="<f4"))
    os.replace(tmp, path)


def _atomic_json(path: Path, obj):
    tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp")
    tmp.write_text(json.dumps(obj))
    os.replace(tmp, path)


def cache_recording(row: ManifestRow, cache_dir: Path, specs=DEFAULT_SPECS, aliases=None,
                    pad_missing=False, target_hz=TARGET_HZ, clip_seconds=CLIP_SECONDS,
                    ignore=()) -> tuple[dict[str, np.ndarray], dict]:
    """Return (memory-mapped clip arrays, sidecar) for one manifest row, building them if needed."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    key = cache_key(row.path, specs, aliases, pad_missing, target_hz, clip_seconds)
    sidecar = cache_dir / f"{key}.json"
    files = {s.name: cache_dir / f"{key}_{s.name}.npy" for s in specs}
    if not (sidecar.exists() and all(f.exists() for f in files.values())):
        rec = load_recording(row.path, specs, aliases, pad_missing, row.participant_id)
        rec.participant_id = row.participant_id
        if row.age is not None:
            rec.age = row.age
        if row.sex:
            rec.sex = row.sex
        clips = preprocess(rec, target_hz, clip_seconds, ignore)
        for s in specs:
            _atomic_save(files[s.name], clips[s.name].data)
        ref = clips[specs[0].name]
        _atomic_json(sidecar, {
            "participant_id": row.participant_id, "source": os.path.abspath(row.path),
            "target_hz": target_hz, "clip_seconds": clip_seconds,
            "modalities": [s.to_dict() for s in specs],
            "clip_indices": ref.clip_indices.tolist(),
            **{f: getattr(ref, f).tolist() for f in ClipCorpus.LABEL_FIELDS},
        })
    meta = json.loads(sidecar.read_text())
    arrays = {name: np.load(f, mmap_mode="r") for name, f in files.items()}
    return arrays, meta


def build_corpus(rows: Sequence[ManifestRow], cache_dir=None, specs=DEFAULT_SPECS, aliases=None,
                 pad_missing=False, target_hz=TARGET_HZ, clip_seconds=CLIP_SECONDS,
                 ignore=(), skip_failures=False) -> ClipCorpus:
    """Ingest every manifest row through the cache and index the result.

    With ``skip_failures`` recordings whose channels cannot be mapped are
    logged and left out instead of aborting the whole build.
    """
    cache_dir = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    specs = tuple(specs)
    arrays = {s.name: [] for s in specs}
    rec_of, local, pids, cidx, split = [], [], [], [], []
    labels = {k: [] for k in ClipCorpus.LABEL_FIELDS}
    skipped = []
    for row in rows:
        try:
            arrs, meta = cache_recording(row, cache_dir, specs, aliases, pad_missing,
                                         target_hz, clip_seconds, ignore)
        except (MissingChannel, ValueError) as exc:
            if not skip_failures:
                raise
            skipped.append((row.participant_id, str(exc)))
            log.warning("skipping %s: %s", row.participant_id, exc)
            continue
        r = len(arrays[specs[0].name])
        for s in specs:
            arrays[s.name].append(arrs[s.name])
        k = len(meta["clip_indices"])
        rec_of.append(np.full(k, r))
        local.append(np.arange(k))
        pids.append(np.full(k, row.participant_id, dtype=object))
        cidx.append(np.asarray(meta["clip_indices"], np.int64))
        for f in ClipCorpus.LABEL_FIELDS:
            labels[f].append(np.asarray(meta[f], np.int64))
        split.append(np.full(k, row.split, dtype=object))
    cat = lambda xs, dt=np.int64: np.concatenate(xs) if xs else np.zeros(0, dt)
    corpus = ClipCorpus(specs, arrays, cat(rec_of), cat(local), cat(pids, object), cat(cidx),
                        {k: cat(v) for k, v in labels.items()}, cat(split, object))
    corpus.skipped = skipped
    return corpus

"""Participant-level splits and the recording manifest."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

SPLITS = ("pretrain", "train", "valid", "test")


def split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items over ``fractions``."""
    raw = np.asarray(fractions, dtype=float) * n
    counts = np.floor(raw + 1e-9).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    # every split asked for must receive somebody
    for i in np.flatnonzero((np.asarray(fractions) > 0) & (counts == 0)):
        donor = int(np.argmax(counts))
        counts[donor] -= 1
        counts[i] += 1
    return counts.tolist()


def split_participants(participant_ids: Sequence[str], fractions: Sequence[float] | Mapping[str, float],
                       seed: int = 0) -> dict[str, str]:
    """Assign every participant to exactly one of pretrain/train/valid/test.

    The assignment depends only on the sorted set of ids, the fractions and
    the seed.
    """
    if isinstance(fractions, Mapping):
        fractions = [fractions.get(s, 0.0) for s in SPLITS]
    fractions = list(fractions)
    if len(fractions) != len(SPLITS):
        raise ValueError(f"need {len(SPLITS)} fractions ({', '.join(SPLITS)}), got {len(fractions)}")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions} (sum {sum(fractions)})")
    ids = sorted(set(participant_ids))
    wanted = sum(f > 0 for f in fractions)
    if len(ids) < wanted:
        raise ValueError(f"{len(ids)} participants cannot fill {wanted} non-empty splits")
    counts = split_counts(len(ids), fractions)
    perm = np.random.default_rng(seed).permutation(len(ids))
    out, start = {}, 0
    for split, c in zip(SPLITS, counts):
        for i in perm[start:start + c]:
            out[ids[i]] = split
        start += c
    return out


@dataclass
class ManifestRow:
    participant_id: str
    path: str
    split: str = ""
    age: float | None = None
    sex: str | None = None


MANIFEST_COLUMNS = ("participant_id", "path", "split", "age", "sex")


def read_manifest(path: str | os.PathLike) -> list[ManifestRow]:
    """Read a delimited manifest; relative paths resolve against its directory."""
    path = Path(path)
    text = path.read_text()
    dialect = csv.Sniffer().sniff(text.splitlines()[0], delimiters=",\t;") if text else csv.excel
    rows = []
    for rec in csv.DictReader(text.splitlines(), dialect=dialect):
        missing = [c for c in ("participant_id", "path") if not rec.get(c)]
        if missing:
            raise ValueError(f"{path}: row {rec} lacks {missing}")
        p = Path(rec["path"])
        if not p.is_absolute():
            p = path.parent / p
        age = rec.get("age") or None
        rows.append(ManifestRow(rec["participant_id"], str(p), rec.get("split") or "",
                                float(age) if age is not None else None, rec.get("sex") or None))
    return rows


def write_manifest(rows: Sequence[ManifestRow], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        for r in rows:
            w.writerow([r.participant_id, r.path, r.split, "" if r.age is None else r.age, r.sex or ""])

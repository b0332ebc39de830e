"""Cross-modal retrieval: rank the true mate of each query among candidates."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .losses import cosine_similarity_matrix


@dataclass
class RetrievalResult:
    query_modality: str
    target_modality: str
    ranks: np.ndarray
    recall_at_k: float
    median_rank: float
    n_candidates: int
    k: int = 10


def ranks_from_similarity(sim: np.ndarray) -> np.ndarray:
    """1-based rank of the diagonal entry in each row.

    Ties count against the true mate: every other candidate scoring at least
    as high is ranked ahead of it.
    """
    sim = np.asarray(sim)
    diag = np.diagonal(sim)[:, None]
    ahead = (sim >= diag).sum(axis=1) - 1
    return 1 + ahead


def rank_true_mates(queries, candidates, block: int = 4096) -> np.ndarray:
    """Row ``k`` of ``candidates`` is the true mate of query ``k``."""
    queries = np.asarray(queries, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.float64)
    if queries.shape != candidates.shape or len(queries) < 1:
        raise ValueError(f"need equally shaped non-empty arrays, got {queries.shape} and {candidates.shape}")
    ranks = np.empty(len(queries), np.int64)
    for start in range(0, len(queries), block):
        stop = min(start + block, len(queries))
        sim = cosine_similarity_matrix(queries[start:stop], candidates)
        true = sim[np.arange(stop - start), np.arange(start, stop)][:, None]
        ranks[start:stop] = (sim >= true).sum(axis=1)
    return ranks


def recall_at_k(ranks, k: int = 10) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    ranks = np.asarray(ranks)
    return float(np.mean(ranks <= k)) if len(ranks) else 0.0


def median_rank(ranks) -> float:
    ranks = np.asarray(ranks, dtype=float)
    if len(ranks) == 0:
        raise ValueError("median rank of an empty rank list")
    return float(np.median(ranks))


def cross_modal_matrix(embset, n_candidates: int = 1000, k: int = 10, seed: int = 0,
                       modalities=None) -> dict[tuple[str, str], RetrievalResult]:
    """Evaluate every ordered modality pair on one shared, uniformly drawn pool.

    Self-retrieval cells are not produced.
    """
    modalities = list(modalities or embset.modalities)
    n = len(embset)
    if n_candidates > n:
        raise ValueError(f"pool of {n_candidates} requested but only {n} clips available")
    if n_candidates < 2:
        raise ValueError("candidate pool must hold at least 2 clips")
    pool = np.sort(np.random.default_rng(seed).choice(n, n_candidates, replace=False))
    out = {}
    for q, t in permutations(modalities, 2):
        ranks = rank_true_mates(embset.per_modality[q][pool], embset.per_modality[t][pool])
        out[(q, t)] = RetrievalResult(q, t, ranks, recall_at_k(ranks, k), median_rank(ranks), n_candidates, k)
    return out


def write_retrieval_csv(results: dict, path) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query", "target", "metric", "value", "n_candidates"])
        for (q, t), r in results.items():
            w.writerow([q, t, "median_rank", f"{r.median_rank:.6g}", r.n_candidates])
            w.writerow([q, t, f"recall@{r.k}", f"{r.recall_at_k:.6g}", r.n_candidates])

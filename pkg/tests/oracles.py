"""Independent scalar re-implementations used as test oracles.

Written with plain Python loops and the math module only, so they share no
code path with the vectorised library versions they check.
"""
import math
from itertools import permutations


def _norm(v):
    return math.sqrt(sum(a * a for a in v))


def cosine(u, v):
    return sum(a * b for a, b in zip(u, v)) / (_norm(u) * _norm(v))


def info_nce_term(query_row, keys, k, tau):
    """-log of the softmax weight of key k for one query row."""
    scale = math.exp(tau)
    logits = [cosine(query_row, key) * scale for key in keys]
    top = max(logits)
    denom = sum(math.exp(l - top) for l in logits)
    return -(logits[k] - top - math.log(denom))


def pairwise_loss(emb, tau):
    """emb: list over modalities of lists of rows."""
    n = len(emb[0])
    terms = [info_nce_term(emb[i][k], emb[j], k, tau)
             for i, j in permutations(range(len(emb)), 2) for k in range(n)]
    return sum(terms) / len(terms)


def loo_reference(emb, i, k):
    others = [emb[j][k] for j in range(len(emb)) if j != i]
    units = [[a / _norm(row) for a in row] for row in others]
    return [sum(col) / len(units) for col in zip(*units)]


def leave_one_out_loss(emb, tau):
    n, m = len(emb[0]), len(emb)
    terms = []
    for i in range(m):
        refs = [loo_reference(emb, i, kk) for kk in range(n)]
        for k in range(n):
            terms.append(info_nce_term(emb[i][k], refs, k, tau))
    return sum(terms) / len(terms)


def auroc_pairs(scores, labels):
    """Fraction of (positive, negative) pairs ranked correctly, ties 1/2."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def auprc_staircase(scores, labels):
    """Sum over distinct thresholds (high to low) of (recall gain) * precision."""
    n_pos = sum(labels)
    ap, prev_recall = 0.0, 0.0
    for thr in sorted(set(scores), reverse=True):
        chosen = [y for s, y in zip(scores, labels) if s >= thr]
        tp = sum(chosen)
        recall = tp / n_pos
        precision = tp / len(chosen)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def ranks_pessimistic(sim):
    """1 + number of candidates with similarity >= the true mate's, excluding itself."""
    out = []
    for k, row in enumerate(sim):
        out.append(1 + sum(1 for m, s in enumerate(row) if m != k and s >= row[k]))
    return out

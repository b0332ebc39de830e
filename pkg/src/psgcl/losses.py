"""Pairwise and leave-one-out contrastive objectives.

Logits are cosine similarities multiplied by ``exp(tau)`` where ``tau`` is a
trainable scalar. All functions accept torch tensors (and then stay
differentiable) or array-likes (and then return plain floats / arrays).
"""
from __future__ import annotations

from itertools import permutations
from typing import Mapping, Sequence

import numpy as np
import torch


class DegenerateInput(ValueError):
    pass


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), True


def _embeddings(emb) -> list[torch.Tensor]:
    if isinstance(emb, Mapping):
        emb = list(emb.values())
    return list(emb)


def _unit_rows(x: torch.Tensor, what: str = "row") -> torch.Tensor:
    norms = x.norm(dim=1, keepdim=True)
    zero = (norms.squeeze(1) == 0).nonzero()
    if len(zero):
        raise DegenerateInput(f"zero-norm {what} {int(zero[0])}; cosine similarity undefined")
    return x / norms


def cosine_similarity_matrix(a, b):
    """``S[k, m] = <a_k, b_m> / (|a_k| |b_m|)``."""
    (a, a_np), (b, _) = _as_tensor(a), _as_tensor(b)
    s = _unit_rows(a, "row of A") @ _unit_rows(b, "row of B").T
    return s.numpy() if a_np else s


def _info_nce(query, keys, tau):
    """Per-row loss -log softmax(logits)[k, k] with logits = cos * exp(tau)."""
    logits = (_unit_rows(query) @ _unit_rows(keys).T) * torch.exp(tau)
    return torch.logsumexp(logits, dim=1) - logits.diagonal()


def _reduce(terms: list[torch.Tensor], reduction: str):
    stacked = torch.stack(terms)
    if reduction == "mean":
        return stacked.mean()
    if reduction == "sum":
        return stacked.sum()
    if reduction == "none":
        return stacked
    raise ValueError(f"unknown reduction {reduction!r}")


def _prepare(emb, tau):
    xs = _embeddings(emb)
    if not xs:
        raise ValueError("no embeddings given")
    converted = [_as_tensor(x) for x in xs]
    numpy_in = converted[0][1]
    xs = [c[0] for c in converted]
    if isinstance(tau, torch.Tensor):
        t = tau
    else:
        t = torch.tensor(float(tau), dtype=xs[0].dtype)
    n = {x.shape for x in xs}
    if len(n) != 1:
        raise ValueError(f"modalities disagree on (N, D): {sorted(n)}")
    return xs, t, numpy_in


def _out(value, numpy_in):
    if numpy_in:
        value = value.detach().numpy()
        return float(value) if value.ndim == 0 else value
    return value


def pairwise_loss(emb, tau=0.0, reduction: str = "mean"):
    """Contrast every ordered pair of modalities.

    ``reduction="mean"`` averages over samples and ordered pairs; ``"sum"``
    adds everything up; ``"none"`` returns the (pairs, N) term matrix.
    """
    xs, t, numpy_in = _prepare(emb, tau)
    if len(xs) < 2:
        raise ValueError("pairwise loss needs at least two modalities")
    terms = [_info_nce(xs[i], xs[j], t) for i, j in permutations(range(len(xs)), 2)]
    return _out(_reduce(terms, reduction), numpy_in)


def leave_one_out_reference(emb, i: int):
    """Mean of the unit-normalized embeddings of every modality except ``i``."""
    xs, _, numpy_in = _prepare(emb, 0.0)
    if len(xs) < 2:
        raise ValueError("leave-one-out reference needs at least two modalities")
    others = [_unit_rows(x) for j, x in enumerate(xs) if j != i]
    ref = torch.stack(others).mean(dim=0)
    return _out(ref, numpy_in)


def leave_one_out_loss(emb, tau=0.0, reduction: str = "mean"):
    """Contrast each modality against the average of all the others."""
    xs, t, numpy_in = _prepare(emb, tau)
    if len(xs) < 2:
        raise ValueError("leave-one-out loss needs at least two modalities")
    units = [_unit_rows(x) for x in xs]
    total = torch.stack(units).sum(dim=0)
    m = len(xs)
    terms = [_info_nce(xs[i], (total - units[i]) / (m - 1), t) for i in range(m)]
    return _out(_reduce(terms, reduction), numpy_in)


def single_modality_temporal_loss(emb_t, emb_next, tau=0.0, reduction: str = "mean"):
    """Pairwise loss where the two views are a clip and the clip right after it."""
    return pairwise_loss([emb_t, emb_next], tau, reduction)


OBJECTIVES = {
    "pairwise": pairwise_loss,
    "leave_one_out": leave_one_out_loss,
    "pair_subset": pairwise_loss,
    "single_modality": single_modality_temporal_loss,
}

"""Competing eviction policies: attention-weight oracle, random, recency."""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np

from .kvcache import HeadCache
from .numerics import default_scale
from .retention import SlotScores

POLICIES = ("diversity", "attn-oracle", "random", "recency")


def attention_oracle_scores(hc: HeadCache, queries, scale: Optional[float] = None) -> SlotScores:
    """Summed softmax weight each candidate receives from the current frame's queries.

    Builds the full ``P x N`` weight matrix over ``[anchor; candidates]``; that
    materialization is the point of this baseline.
    """
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] == 0:
        raise ValueError("empty queries")
    if scale is None:
        scale = default_scale(q.shape[1])
    keys = np.concatenate([hc.anchor.keys, hc.candidates.keys]).astype(np.float64)
    w = q @ keys.T
    w *= scale
    w -= w.max(axis=1, keepdims=True)
    np.exp(w, out=w)
    w /= w.sum(axis=1, keepdims=True)
    importance = w[:, len(hc.anchor):].sum(axis=0)
    return SlotScores(hc.layer, hc.head, hc.candidates.insert_seq.copy(), importance)


def policy_rng(seed: Union[int, Sequence[int]]) -> np.random.Generator:
    entropy = [seed] if np.isscalar(seed) else list(seed)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(x) for x in entropy])))


def random_keep(candidates, budget: int, seed) -> np.ndarray:
    """Uniform subset of ``min(budget, n)`` insert_seqs; ``seed`` may be an int or a tuple
    such as ``(run_seed, layer, head, event)``."""
    seq = np.asarray(candidates.insert_seq if hasattr(candidates, "insert_seq") else candidates)
    if budget >= len(seq):
        return np.sort(seq)
    pick = policy_rng(seed).choice(len(seq), size=max(budget, 0), replace=False)
    return np.sort(seq[pick])


def recency_keep(candidates, budget: int) -> np.ndarray:
    seq = np.asarray(candidates.insert_seq if hasattr(candidates, "insert_seq") else candidates)
    if budget >= len(seq):
        return np.sort(seq)
    if budget <= 0:
        return np.empty(0, dtype=np.int64)
    return np.sort(np.partition(seq, len(seq) - budget)[len(seq) - budget:])

"""Key-diversity scoring and TopK retention for a single (layer, head) slot.

Nothing in here sees a query, a value or an attention weight: scoring is a
function of the candidate keys alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .kvcache import TIEBREAKS, HeadCache, Segment
from .numerics import NORM_EPS


@dataclass
class SlotScores:
    layer: int
    head: int
    insert_seq: np.ndarray
    scores: np.ndarray
    mean_key: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.scores)

    def as_dict(self) -> dict:
        return dict(zip(self.insert_seq.tolist(), self.scores.tolist()))


def _unit_keys(candidates) -> np.ndarray:
    if isinstance(candidates, Segment):
        return candidates.key_unit
    if isinstance(candidates, np.ndarray):
        return candidates
    return np.array([c.key_unit for c in candidates], dtype=np.float32)


def _insert_seq(candidates, n: int) -> np.ndarray:
    if isinstance(candidates, Segment):
        return candidates.insert_seq
    if isinstance(candidates, np.ndarray):
        return np.arange(n, dtype=np.int64)
    return np.array([c.insert_seq for c in candidates], dtype=np.int64)


def mean_key(candidates) -> np.ndarray:
    """Plain average of the normalized candidate keys (not renormalized)."""
    units = _unit_keys(candidates)
    if len(units) == 0:
        raise ValueError("no candidates")
    return np.array(units, dtype=np.float64).sum(axis=0) / len(units)


def diversity_scores(candidates, mu=None, layer: int = 0, head: int = 0) -> SlotScores:
    """Negative cosine similarity of each normalized key to the mean key.

    Zero-norm keys get -1 so they are the first to go.
    """
    units = np.array(_unit_keys(candidates), dtype=np.float64)
    if len(units) == 0:
        raise ValueError("no candidates")
    if mu is None:
        mu = units.sum(axis=0) / len(units)
    mu = np.asarray(mu, dtype=np.float64)
    seq = _insert_seq(candidates, len(units))
    norms = np.sqrt(np.einsum("ij,ij->i", units, units))
    mu_norm = np.sqrt(mu @ mu)
    zero = norms < NORM_EPS
    if mu_norm < NORM_EPS:
        cos = np.zeros(len(units))
    else:
        norms[zero] = 1.0
        cos = units @ mu
        cos /= norms * mu_norm
        np.clip(cos, -1.0, 1.0, out=cos)
    s = -cos
    s[zero] = -1.0
    return SlotScores(layer, head, seq.copy(), s, mu)


def score_slot(hc: HeadCache) -> Optional[SlotScores]:
    if len(hc.candidates) == 0:
        return None
    return diversity_scores(hc.candidates, layer=hc.layer, head=hc.head)


def select_topk(scores: SlotScores, budget: int, tiebreak: str = "recent-first") -> np.ndarray:
    """insert_seq values of the ``budget`` highest-scoring candidates, ascending."""
    if tiebreak not in TIEBREAKS:
        raise ValueError(f"tiebreak must be one of {TIEBREAKS}, got {tiebreak!r}")
    if budget < 0:
        raise ValueError(f"budget must be >= 0, got {budget}")
    n = len(scores.scores)
    if budget >= n:
        return np.sort(scores.insert_seq)
    if budget == 0:
        return np.empty(0, dtype=np.int64)
    s = scores.scores
    # kth largest value; everything strictly above it is kept outright
    thresh = np.partition(s, n - budget)[n - budget]
    above = np.flatnonzero(s > thresh)
    tied = np.flatnonzero(s == thresh)
    need = budget - len(above)
    tied_seq = scores.insert_seq[tied]
    order = np.argsort(tied_seq, kind="stable")
    if tiebreak == "recent-first":
        order = order[::-1]
    chosen = np.concatenate([scores.insert_seq[above], tied_seq[order[:need]]])
    return np.sort(chosen)


def slot_mean_diversity(scores: SlotScores) -> float:
    if len(scores.scores) == 0:
        raise ValueError("no scores")
    return float(np.mean(scores.scores))

"""Layer-wise budget allocation from per-layer mean key diversity."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .kvcache import EngineConfig
from .numerics import softmax

EMPTY_LAYER_SCORE = -1.0


@dataclass
class BudgetPlan:
    p_layer: np.ndarray
    b_layer: np.ndarray  # after per-head floors
    b_head: np.ndarray  # (L, H)
    b_total: int
    tau: float
    b_layer_raw: Optional[np.ndarray] = None  # before per-head floors

    def head(self, l: int, h: int) -> int:
        return int(self.b_head[l, h])


def layer_diversity(slot_means) -> np.ndarray:
    """Mean over non-empty heads of each layer; ``None``/NaN marks an empty slot."""
    rows = []
    for row in slot_means:
        vals = [float(x) for x in row if x is not None and not np.isnan(x)]
        rows.append(float(np.mean(vals)) if vals else EMPTY_LAYER_SCORE)
    return np.asarray(rows, dtype=np.float64)


def _largest_remainder(p: np.ndarray, total: int) -> np.ndarray:
    raw = p * total
    snapped = np.round(raw)
    raw = np.where(np.abs(raw - snapped) < 1e-9 * max(total, 1), snapped, raw)
    base = np.floor(raw).astype(np.int64)
    rem = total - int(base.sum())
    # largest fractional part first; ties by larger p, then lower layer index
    order = np.lexsort((np.arange(len(p)), -p, -(raw - base)))
    base[order[:rem]] += 1
    return base


def _apply_floor(b_head: np.ndarray, floor: int, total: int) -> np.ndarray:
    b = np.maximum(b_head, floor).ravel().astype(np.int64)
    excess = int(b.sum()) - total
    while excess > 0:
        top = b.max()
        if top <= floor:
            break
        at_top = np.flatnonzero(b == top)
        below = b[b < top]
        nxt = max(int(below.max()) if below.size else floor, floor)
        step = min(top - nxt, excess // len(at_top))
        if step >= 1:
            b[at_top] -= step
            excess -= step * len(at_top)
        else:
            # fewer tokens to shave than tied entries: take from the highest flat indices
            b[at_top[::-1][:excess]] -= 1
            excess = 0
    return b.reshape(b_head.shape)


def allocate(s_layer: Sequence[float], config: EngineConfig, tau: Optional[float] = None) -> BudgetPlan:
    tau = config.tau if tau is None else tau
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    s = np.asarray(s_layer, dtype=np.float64)
    L, H = config.L, config.H
    if s.shape != (L,):
        raise ValueError(f"expected {L} layer scores, got shape {s.shape}")
    b_total = config.b_init_per_head * L * H
    if config.layer_allocation == "uniform":
        p = np.full(L, 1.0 / L)
    else:
        p = softmax(s, tau)
    b_layer_raw = _largest_remainder(p, b_total)
    b_head = np.repeat((b_layer_raw // H)[:, None], H, axis=1)
    extra = b_layer_raw % H
    for l in range(L):
        b_head[l, :extra[l]] += 1
    b_head = _apply_floor(b_head, config.min_head_budget, b_total)
    return BudgetPlan(p, b_head.sum(axis=1), b_head, b_total, tau, b_layer_raw)

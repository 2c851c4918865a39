"""Per-frame attention over the cached context of every (layer, head) slot."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .kvcache import CacheState
from .numerics import BufferTracker, EmptyContextError, attend_naive, attend_tiles, iter_tiles

MODES = ("streaming", "naive")


@dataclass
class FrameQueries:
    """Queries ``(L, H, P, d_k)`` issued by one frame."""

    frame_id: int
    queries: np.ndarray


@dataclass
class FrameOutputs:
    frame_id: int
    outputs: np.ndarray  # (L, H, P, d_v)


def forward_frame(
    cache: CacheState,
    queries: FrameQueries,
    mode: str = "streaming",
    tracker: Optional[BufferTracker] = None,
) -> FrameOutputs:
    """Attend each slot's queries over ``[anchor; candidates]``. Read-only on ``cache``."""
    cfg = cache.config
    q = np.asarray(queries.queries, dtype=np.float32)
    if q.ndim != 4 or q.shape[:2] != (cfg.L, cfg.H) or q.shape[3] != cfg.d_k:
        raise ValueError(f"queries shape {q.shape} does not match config")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    out = np.empty(q.shape[:3] + (cfg.d_v,), dtype=np.float32)
    for hc in cache.slots():
        if hc.size == 0:
            raise EmptyContextError(f"no context in slot ({hc.layer},{hc.head})")
        qs = q[hc.layer, hc.head]
        # grab both references once so a concurrent prune swap cannot split the view
        anchor, cand = hc.anchor, hc.candidates
        if mode == "naive":
            keys = np.concatenate([anchor.keys, cand.keys])
            values = np.concatenate([anchor.values, cand.values])
            out[hc.layer, hc.head] = attend_naive(qs, keys, values)
        else:
            tiles = (t for seg in (anchor, cand) if len(seg)
                     for t in iter_tiles(seg.keys, seg.values, cfg.block_size))
            out[hc.layer, hc.head] = attend_tiles(qs, tiles, tracker=tracker)
    return FrameOutputs(queries.frame_id, out)


def fidelity_error(pruned_out: FrameOutputs, full_out: FrameOutputs) -> float:
    """Relative Frobenius error per slot, averaged over slots."""
    a = np.asarray(pruned_out.outputs, dtype=np.float64)
    b = np.asarray(full_out.outputs, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = np.sqrt(((a - b) ** 2).sum(axis=(-2, -1)))
    ref = np.maximum(np.sqrt((b ** 2).sum(axis=(-2, -1))), 1e-12)
    return float(np.mean(diff / ref))

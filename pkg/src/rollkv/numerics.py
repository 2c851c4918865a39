"""Dense-vector helpers: normalization, cosine similarity, softmax, attention.

Storage is float32; every reduction (dot products, softmax sums, the online
softmax running max/normalizer) is carried out in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import numpy as np

NORM_EPS = 1e-12


class EmptyContextError(ValueError):
    pass


def _finite_or_raise(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite vector")


def normalize(v) -> np.ndarray:
    """Return ``v / ||v||`` as float32, or the all-zero sentinel if ``||v|| < 1e-12``."""
    x = np.asarray(v, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {x.shape}")
    _finite_or_raise(x)
    n = np.sqrt(np.dot(x, x))
    if n < NORM_EPS:
        return np.zeros(x.shape, dtype=np.float32)
    return (x / n).astype(np.float32)


def normalize_rows(m) -> np.ndarray:
    """Row-wise :func:`normalize` for an ``(n, d)`` matrix."""
    x = np.asarray(m, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {x.shape}")
    _finite_or_raise(x)
    n = np.sqrt(np.einsum("ij,ij->i", x, x))
    out = np.zeros(x.shape, dtype=np.float64)
    ok = n >= NORM_EPS
    out[ok] = x[ok] / n[ok, None]
    return out.astype(np.float32)


def cos_sim(a, b) -> float:
    a64 = np.asarray(a, dtype=np.float64)
    b64 = np.asarray(b, dtype=np.float64)
    if a64.shape != b64.shape:
        raise ValueError(f"length mismatch: {a64.shape} vs {b64.shape}")
    na = np.sqrt(np.dot(a64, a64))
    nb = np.sqrt(np.dot(b64, b64))
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0
    c = float(np.dot(a64, b64) / (na * nb))
    return min(1.0, max(-1.0, c))


def softmax(scores, temperature: float = 1.0) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("softmax of empty input")
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite scores")
    z = s / temperature
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass
class BufferTracker:
    """Accounting hook for :func:`attend_tiles`.

    ``peak_work`` counts float elements of intermediate buffers (score tile,
    per-tile value contribution, running statistics, output accumulator).
    ``peak_staging`` counts the float64 copy of the current key/value tile.
    """

    peak_work: int = 0
    peak_staging: int = 0
    tiles: int = 0

    def note(self, work: int, staging: int) -> None:
        self.peak_work = max(self.peak_work, work)
        self.peak_staging = max(self.peak_staging, staging)
        self.tiles += 1


def default_scale(d_k: int) -> float:
    return 1.0 / np.sqrt(d_k)


def attend_naive(queries, keys, values, scale: Optional[float] = None) -> np.ndarray:
    """Reference attention; materializes the full ``Q x N`` weight matrix."""
    q = np.asarray(queries, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if k.shape[0] == 0:
        raise EmptyContextError("empty context")
    if k.shape[0] != v.shape[0] or q.shape[1] != k.shape[1]:
        raise ValueError(f"inconsistent shapes q={q.shape} k={k.shape} v={v.shape}")
    if scale is None:
        scale = default_scale(q.shape[1])
    s = q @ k.T
    s *= scale
    m = s.max(axis=1)
    s -= m[:, None]
    np.exp(s, out=s)
    l = s.sum(axis=1)
    # Same operation order as a single-tile online pass.
    acc = s @ v
    return (acc / l[:, None]).astype(np.float32)


def iter_tiles(keys, values, block_size: int) -> Iterable[Tuple[np.ndarray, np.ndarray]]:
    if block_size < 1:
        raise ValueError(f"block_size must be >= 1, got {block_size}")
    n = keys.shape[0]
    for start in range(0, n, block_size):
        yield keys[start:start + block_size], values[start:start + block_size]


def attend_tiles(
    queries,
    tiles: Iterable[Tuple[np.ndarray, np.ndarray]],
    scale: Optional[float] = None,
    tracker: Optional[BufferTracker] = None,
) -> np.ndarray:
    """Online-softmax attention over a stream of ``(K_tile, V_tile)`` pairs.

    Only a ``Q x T`` score tile is alive at any time; the running max and
    normalizer are rescaled as each tile arrives.
    """
    q = np.asarray(queries, dtype=np.float64)
    n_q = q.shape[0]
    if scale is None:
        scale = default_scale(q.shape[1])
    run_max = np.full(n_q, -np.inf)
    run_sum = np.zeros(n_q)
    acc = None
    for k_tile, v_tile in tiles:
        if k_tile.shape[0] == 0:
            continue
        if k_tile.shape[0] != v_tile.shape[0] or k_tile.shape[1] != q.shape[1]:
            raise ValueError(f"inconsistent tile shapes k={k_tile.shape} v={v_tile.shape}")
        k64 = k_tile.astype(np.float64)
        v64 = v_tile.astype(np.float64)
        if acc is None:
            acc = np.zeros((n_q, v64.shape[1]))
        s = q @ k64.T
        s *= scale
        new_max = np.maximum(run_max, s.max(axis=1))
        alpha = np.exp(run_max - new_max)
        s -= new_max[:, None]
        np.exp(s, out=s)
        run_sum *= alpha
        run_sum += s.sum(axis=1)
        contrib = s @ v64
        acc *= alpha[:, None]
        acc += contrib
        run_max = new_max
        if tracker is not None:
            work = s.size + contrib.size + acc.size + run_max.size + run_sum.size + alpha.size
            tracker.note(work, k64.size + v64.size)
    if acc is None:
        raise EmptyContextError("empty context")
    return (acc / run_sum[:, None]).astype(np.float32)


def attend_streaming(
    queries,
    keys,
    values,
    scale: Optional[float] = None,
    block_size: int = 512,
    tracker: Optional[BufferTracker] = None,
) -> np.ndarray:
    k = np.asarray(keys)
    v = np.asarray(values)
    if k.shape[0] == 0:
        raise EmptyContextError("empty context")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"inconsistent shapes k={k.shape} v={v.shape}")
    return attend_tiles(queries, iter_tiles(k, v, block_size), scale=scale, tracker=tracker)

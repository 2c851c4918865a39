"""Rolling KV store: one anchor segment and one candidate segment per (layer, head)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from .numerics import normalize_rows

TIEBREAKS = ("recent-first", "stable-index")
LAYER_ALLOCATIONS = ("adaptive", "uniform")

Slot = Tuple[int, int]

_RUN_COPY_LIMIT = 64


class NonCausalAppendError(ValueError):
    pass


class IllegalEvictionError(ValueError):
    pass


@dataclass
class EngineConfig:
    L: int
    H: int
    d_k: int
    d_v: int
    b_init_per_head: int
    tokens_per_frame: int = 16
    tau: float = 1.0
    anchor_frame_count: int = 1
    prune_interval: int = 1
    min_head_budget: Optional[int] = None  # None -> tokens_per_frame
    tiebreak: str = "recent-first"
    layer_allocation: str = "adaptive"
    anchor_enabled: bool = True
    block_size: int = 512
    freeze_after_first: bool = False

    def __post_init__(self) -> None:
        if self.min_head_budget is None:
            self.min_head_budget = self.tokens_per_frame
        self.validate()

    def validate(self) -> None:
        for name in ("L", "H", "d_k", "d_v", "b_init_per_head", "tokens_per_frame",
                     "anchor_frame_count", "prune_interval", "min_head_budget", "block_size"):
            val = getattr(self, name)
            if int(val) != val or val < 1:
                raise ValueError(f"{name} must be a positive integer, got {val!r}")
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.b_init_per_head < self.min_head_budget:
            raise ValueError(
                f"b_init_per_head ({self.b_init_per_head}) < min_head_budget ({self.min_head_budget})"
            )
        if self.tiebreak not in TIEBREAKS:
            raise ValueError(f"tiebreak must be one of {TIEBREAKS}, got {self.tiebreak!r}")
        if self.layer_allocation not in LAYER_ALLOCATIONS:
            raise ValueError(
                f"layer_allocation must be one of {LAYER_ALLOCATIONS}, got {self.layer_allocation!r}"
            )


@dataclass(frozen=True)
class TokenEntry:
    key: np.ndarray
    key_unit: np.ndarray
    value: np.ndarray
    frame_id: int
    token_idx: int
    insert_seq: int


class Segment:
    """Columnar, append-friendly storage for a run of TokenEntries."""

    def __init__(self, d_k: int, d_v: int, capacity: int = 16):
        capacity = max(int(capacity), 1)
        self.d_k = d_k
        self.d_v = d_v
        self._n = 0
        self._keys = np.empty((capacity, d_k), dtype=np.float32)
        self._units = np.empty((capacity, d_k), dtype=np.float32)
        self._values = np.empty((capacity, d_v), dtype=np.float32)
        self._frame = np.empty(capacity, dtype=np.int64)
        self._tok = np.empty(capacity, dtype=np.int64)
        self._seq = np.empty(capacity, dtype=np.int64)
        self._spare = None

    @classmethod
    def from_arrays(cls, keys, values=None, frame_id=None, token_idx=None, insert_seq=None,
                    key_unit=None) -> "Segment":
        keys = np.asarray(keys, dtype=np.float32)
        n, d_k = keys.shape
        if values is None:
            values = np.zeros((n, 1), dtype=np.float32)
        values = np.asarray(values, dtype=np.float32)
        seg = cls(d_k, values.shape[1], capacity=n)
        seg.extend(
            keys,
            normalize_rows(keys) if key_unit is None else key_unit,
            values,
            np.zeros(n, dtype=np.int64) if frame_id is None else frame_id,
            np.arange(n) if token_idx is None else token_idx,
            np.arange(n) if insert_seq is None else insert_seq,
        )
        return seg

    def __len__(self) -> int:
        return self._n

    @property
    def keys(self) -> np.ndarray:
        return self._keys[:self._n]

    @property
    def key_unit(self) -> np.ndarray:
        return self._units[:self._n]

    @property
    def values(self) -> np.ndarray:
        return self._values[:self._n]

    @property
    def frame_id(self) -> np.ndarray:
        return self._frame[:self._n]

    @property
    def token_idx(self) -> np.ndarray:
        return self._tok[:self._n]

    @property
    def insert_seq(self) -> np.ndarray:
        return self._seq[:self._n]

    def __getitem__(self, i: int) -> TokenEntry:
        if not -self._n <= i < self._n:
            raise IndexError(i)
        i %= self._n
        return TokenEntry(self._keys[i].copy(), self._units[i].copy(), self._values[i].copy(),
                          int(self._frame[i]), int(self._tok[i]), int(self._seq[i]))

    def __iter__(self) -> Iterator[TokenEntry]:
        for i in range(self._n):
            yield self[i]

    def _grow(self, need: int) -> None:
        cap = self._keys.shape[0]
        if need <= cap:
            return
        new_cap = max(need, 2 * cap)
        for name in ("_keys", "_units", "_values", "_frame", "_tok", "_seq"):
            old = getattr(self, name)
            buf = np.empty((new_cap,) + old.shape[1:], dtype=old.dtype)
            buf[:self._n] = old[:self._n]
            setattr(self, name, buf)

    def extend(self, keys, key_unit, values, frame_id, token_idx, insert_seq) -> None:
        m = len(keys)
        self._grow(self._n + m)
        sl = slice(self._n, self._n + m)
        self._keys[sl] = keys
        self._units[sl] = key_unit
        self._values[sl] = values
        self._frame[sl] = frame_id
        self._tok[sl] = token_idx
        self._seq[sl] = insert_seq
        self._n += m

    def compress(self, mask: np.ndarray, headroom: int = 0) -> "Segment":
        """New segment holding the rows where ``mask`` is true, order preserved.

        The result is written into this segment's spare buffers (allocated on
        first use) and this segment's live buffers become the result's spares,
        so steady-state eviction does not allocate. A stale reference to
        ``self`` stays valid until the result is compressed in turn.
        """
        k = int(np.count_nonzero(mask))
        spare = self._spare
        if spare is None or spare[0].shape[0] < k:
            cap = max(k + headroom, self._keys.shape[0])
            spare = tuple(np.empty((cap,) + a.shape[1:], dtype=a.dtype) for a in self._buffers())
        dropped = np.flatnonzero(~mask)
        if len(dropped) <= _RUN_COPY_LIMIT:
            # few holes: copy the surviving runs slice-by-slice
            starts = np.concatenate(([0], dropped + 1)).tolist()
            ends = np.concatenate((dropped, [self._n])).tolist()
            runs = [(a, b) for a, b in zip(starts, ends) if b > a]
            for src, dst in zip(self._buffers(), spare):
                pos = 0
                for a, b in runs:
                    dst[pos:pos + b - a] = src[a:b]
                    pos += b - a
        else:
            for src, dst in zip(self._buffers(), spare):
                dst[:k] = src[:self._n][mask]
        out = Segment.__new__(Segment)
        out.d_k, out.d_v, out._n = self.d_k, self.d_v, k
        out._keys, out._units, out._values, out._frame, out._tok, out._seq = spare
        out._spare = self._buffers()
        return out

    def _buffers(self) -> tuple:
        return (self._keys, self._units, self._values, self._frame, self._tok, self._seq)

    def take(self, positions: np.ndarray, headroom: int = 0) -> "Segment":
        """New segment holding the rows at ``positions`` (order as given)."""
        positions = np.asarray(positions, dtype=np.int64)
        out = Segment(self.d_k, self.d_v, capacity=len(positions) + headroom)
        out.extend(self.keys[positions], self.key_unit[positions], self.values[positions],
                   self.frame_id[positions], self.token_idx[positions], self.insert_seq[positions])
        return out


@dataclass
class HeadCache:
    layer: int
    head: int
    anchor: Segment
    candidates: Segment
    next_seq: int = 0

    @property
    def size(self) -> int:
        return len(self.anchor) + len(self.candidates)

    def context(self) -> Tuple[Segment, ...]:
        return (self.anchor, self.candidates)


@dataclass
class FrameKV:
    """Keys ``(L, H, P, d_k)`` and values ``(L, H, P, d_v)`` for one frame."""

    frame_id: int
    keys: np.ndarray
    values: np.ndarray

    @property
    def tokens(self) -> int:
        return self.keys.shape[2]


@dataclass
class CacheState:
    config: EngineConfig
    grid: List[List[HeadCache]]
    frames_seen: int = 0

    def slot(self, l: int, h: int) -> HeadCache:
        return self.grid[l][h]

    def slots(self) -> Iterator[HeadCache]:
        for row in self.grid:
            yield from row

    def resident_tokens(self) -> int:
        return sum(hc.size for hc in self.slots())


@dataclass
class EvictionReport:
    evicted: Dict[Slot, List[Tuple[int, int]]] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(len(v) for v in self.evicted.values())

    def __bool__(self) -> bool:
        return self.total > 0


@dataclass
class Counts:
    anchor: np.ndarray
    candidates: np.ndarray

    @property
    def resident(self) -> int:
        return int(self.anchor.sum() + self.candidates.sum())


def new_cache(config: EngineConfig) -> CacheState:
    config.validate()
    P = config.tokens_per_frame
    grid = [
        [HeadCache(l, h, Segment(config.d_k, config.d_v, P * config.anchor_frame_count),
                   Segment(config.d_k, config.d_v, 4 * P))
         for h in range(config.H)]
        for l in range(config.L)
    ]
    return CacheState(config=config, grid=grid)


def append_frame(cache: CacheState, frame: FrameKV) -> None:
    cfg = cache.config
    if frame.frame_id != cache.frames_seen:
        raise NonCausalAppendError(
            f"non-causal append: got frame {frame.frame_id}, expected {cache.frames_seen}"
        )
    keys = np.asarray(frame.keys, dtype=np.float32)
    values = np.asarray(frame.values, dtype=np.float32)
    if keys.ndim != 4 or keys.shape[:2] != (cfg.L, cfg.H) or keys.shape[3] != cfg.d_k:
        raise ValueError(f"frame keys shape {keys.shape} does not match config")
    if values.shape != keys.shape[:3] + (cfg.d_v,):
        raise ValueError(f"frame values shape {values.shape} does not match config")
    P = keys.shape[2]
    if P != cfg.tokens_per_frame:
        raise ValueError(f"frame has {P} tokens, config expects {cfg.tokens_per_frame}")
    to_anchor = cfg.anchor_enabled and frame.frame_id < cfg.anchor_frame_count
    fid = np.full(P, frame.frame_id, dtype=np.int64)
    tok = np.arange(P, dtype=np.int64)
    units = normalize_rows(keys.reshape(-1, cfg.d_k)).reshape(keys.shape)
    for hc in cache.slots():
        seq = np.arange(hc.next_seq, hc.next_seq + P, dtype=np.int64)
        hc.next_seq += P
        seg = hc.anchor if to_anchor else hc.candidates
        seg.extend(keys[hc.layer, hc.head], units[hc.layer, hc.head], values[hc.layer, hc.head],
                   fid, tok, seq)
    cache.frames_seen += 1


def apply_retention(cache: CacheState, keep: Mapping[Slot, object]) -> EvictionReport:
    """Filter each named slot's candidates down to the given insert_seq set.

    Slots absent from ``keep`` are left untouched. All keep sets are validated
    before any slot is modified.
    """
    plans = []
    for (l, h), kept in keep.items():
        hc = cache.grid[l][h]
        kept = np.unique(np.fromiter(kept, dtype=np.int64) if not isinstance(kept, np.ndarray)
                         else kept.astype(np.int64))
        # candidate insert_seq is strictly increasing (append order, order-preserving filters)
        seqs = hc.candidates.insert_seq
        pos = np.searchsorted(seqs, kept)
        found = pos < len(seqs)
        found[found] = seqs[pos[found]] == kept[found]
        if not found.all():
            bad = kept[~found]
            what = "anchor" if np.isin(bad, hc.anchor.insert_seq).any() else "unknown token"
            raise IllegalEvictionError(
                f"illegal eviction target in slot ({l},{h}): {what} insert_seq {bad[:5].tolist()}"
            )
        mask = np.zeros(len(seqs), dtype=bool)
        mask[pos] = True
        plans.append((hc, mask))

    report = EvictionReport()
    P = cache.config.tokens_per_frame
    for hc, mask in plans:
        if mask.all():
            continue
        dropped = ~mask
        report.evicted[(hc.layer, hc.head)] = list(
            zip(hc.candidates.frame_id[dropped].tolist(), hc.candidates.token_idx[dropped].tolist())
        )
        # single reference swap: readers see the old or the new segment, never a mix
        hc.candidates = hc.candidates.compress(mask, headroom=4 * P)
    return report


def snapshot_counts(cache: CacheState) -> Counts:
    cfg = cache.config
    anchor = np.zeros((cfg.L, cfg.H), dtype=np.int64)
    cand = np.zeros((cfg.L, cfg.H), dtype=np.int64)
    for hc in cache.slots():
        anchor[hc.layer, hc.head] = len(hc.anchor)
        cand[hc.layer, hc.head] = len(hc.candidates)
    return Counts(anchor, cand)

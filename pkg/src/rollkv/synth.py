"""Synthetic camera-drift KV streams with a controllable redundancy level.

Every (layer, head) slot owns a handful of unit cluster centers. Each frame
the centers turn by ``drift_angle`` inside a fixed random plane, a new center
may appear with probability ``novelty_rho``, and the frame's keys are noisy
copies of the centers. Queries come from the same cluster process seen
through a fixed per-slot rotation, so they live in a different subspace from
the keys while still discriminating among them.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import expm

from .attention import FrameQueries
from .kvcache import FrameKV
from .numerics import normalize_rows


@dataclass
class StreamSpec:
    L: int = 4
    H: int = 2
    d_k: int = 32
    d_v: int = 32
    P: int = 16
    n_frames: int = 100
    m_clusters: int = 4
    drift_angle: float = 0.01
    # RMS norm of the noise vector added to a unit center (not per coordinate)
    noise_sigma: float = 0.05
    novelty_rho: float = 0.0
    seed: int = 0
    # attention sharpness: queries have norm query_scale * sqrt(d_k)
    query_scale: float = 8.0
    # largest rotation angle (radians) between the query and key views of a cluster
    query_rotation: float = 0.5
    # fraction of each frame's queries drawn from the frame-0 cluster layout
    anchor_query_frac: float = 0.0
    # 0 -> values are independent gaussians; 1 -> values are a fixed linear map of the key latent
    value_coupling: float = 1.0
    m_clusters_per_layer: Optional[Tuple[int, ...]] = None

    def __post_init__(self) -> None:
        if self.m_clusters_per_layer is not None:
            self.m_clusters_per_layer = tuple(int(m) for m in self.m_clusters_per_layer)
        self.validate()

    def validate(self) -> None:
        for name in ("L", "H", "d_k", "d_v", "P", "m_clusters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_frames < 0:
            raise ValueError("n_frames must be >= 0")
        if self.d_k < 2:
            raise ValueError("d_k must be >= 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.novelty_rho <= 1.0:
            raise ValueError("novelty_rho must be in [0, 1]")
        if not 0.0 <= self.value_coupling <= 1.0:
            raise ValueError("value_coupling must be in [0, 1]")
        if not 0.0 <= self.anchor_query_frac <= 1.0:
            raise ValueError("anchor_query_frac must be in [0, 1]")
        if self.m_clusters_per_layer is not None:
            if len(self.m_clusters_per_layer) != self.L:
                raise ValueError("m_clusters_per_layer needs one entry per layer")
            if min(self.m_clusters_per_layer) < 1:
                raise ValueError("m_clusters_per_layer entries must be >= 1")

    def clusters_for_layer(self, l: int) -> int:
        if self.m_clusters_per_layer is not None:
            return self.m_clusters_per_layer[l]
        return self.m_clusters

    def to_dict(self) -> dict:
        return asdict(self)


CALIBRATION_PRESET = dict(m_clusters=4, drift_angle=0.01, noise_sigma=0.05)


def calibration_spec(**overrides) -> StreamSpec:
    kw = dict(CALIBRATION_PRESET)
    kw.update(overrides)
    return StreamSpec(**kw)


def _random_unit(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    return normalize_rows(rng.standard_normal((n, d))).astype(np.float64)


def _random_rotation(rng: np.random.Generator, d: int, angle: float) -> np.ndarray:
    a = rng.standard_normal((d, d))
    skew = a - a.T
    top = np.max(np.abs(np.linalg.eigvals(skew)))
    if angle == 0.0 or top == 0.0:
        return np.eye(d)
    return expm(skew * (angle / top))


@dataclass
class _SlotState:
    rng: np.random.Generator
    centers: np.ndarray
    plane: np.ndarray  # (2, d_k) orthonormal
    q_rot: np.ndarray
    v_map: np.ndarray
    anchor_centers: np.ndarray = field(default=None)

    def step(self, angle: float) -> None:
        if angle == 0.0:
            return
        u, w = self.plane
        a = self.centers @ u
        b = self.centers @ w
        c, s = np.cos(angle), np.sin(angle)
        self.centers = (self.centers
                        + np.outer(a * c - b * s - a, u)
                        + np.outer(a * s + b * c - b, w))


def _draw_latents(rng, centers, n, sigma, d) -> np.ndarray:
    idx = rng.integers(0, len(centers), size=n)
    noise = rng.standard_normal((n, d)) * (sigma / np.sqrt(d))
    return normalize_rows(centers[idx] + noise).astype(np.float64)


def generate(spec: StreamSpec) -> Iterator[Tuple[FrameKV, FrameQueries]]:
    """Yield ``(FrameKV, FrameQueries)`` per frame; a pure function of ``spec``."""
    spec.validate()
    L, H, P, d_k, d_v = spec.L, spec.H, spec.P, spec.d_k, spec.d_v
    slots: List[List[_SlotState]] = []
    for l in range(L):
        row = []
        for h in range(H):
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, l, h]))
            centers = _random_unit(rng, spec.clusters_for_layer(l), d_k)
            basis, _ = np.linalg.qr(rng.standard_normal((d_k, 2)))
            q_rot = _random_rotation(rng, d_k, spec.query_rotation)
            v_map = rng.standard_normal((d_v, d_k))
            row.append(_SlotState(rng, centers, basis.T.copy(), q_rot, v_map))
        slots.append(row)

    n_anchor_q = int(round(spec.anchor_query_frac * P))
    q_norm = spec.query_scale * np.sqrt(d_k)
    for t in range(spec.n_frames):
        keys = np.empty((L, H, P, d_k), dtype=np.float32)
        values = np.empty((L, H, P, d_v), dtype=np.float32)
        queries = np.empty((L, H, P, d_k), dtype=np.float32)
        for l in range(L):
            for h in range(H):
                st = slots[l][h]
                if t > 0:
                    st.step(spec.drift_angle)
                    if spec.novelty_rho > 0 and st.rng.random() < spec.novelty_rho:
                        st.centers = np.vstack([st.centers, _random_unit(st.rng, 1, d_k)])
                if st.anchor_centers is None:
                    st.anchor_centers = st.centers.copy()
                keys[l, h] = _draw_latents(st.rng, st.centers, P, spec.noise_sigma, d_k)
                g = st.rng.standard_normal((P, d_v))
                if spec.value_coupling > 0:
                    c = spec.value_coupling
                    g = c * (keys[l, h].astype(np.float64) @ st.v_map.T) + np.sqrt(1 - c * c) * g
                rms = np.sqrt((g ** 2).mean(axis=1, keepdims=True))
                values[l, h] = g / np.maximum(rms, 1e-12)
                lat = np.empty((P, d_k))
                if n_anchor_q:
                    lat[:n_anchor_q] = _draw_latents(st.rng, st.anchor_centers, n_anchor_q,
                                                     spec.noise_sigma, d_k)
                if n_anchor_q < P:
                    lat[n_anchor_q:] = _draw_latents(st.rng, st.centers, P - n_anchor_q,
                                                     spec.noise_sigma, d_k)
                queries[l, h] = q_norm * (lat @ st.q_rot.T)
        yield FrameKV(t, keys, values), FrameQueries(t, queries)


def generate_list(spec: StreamSpec) -> List[Tuple[FrameKV, FrameQueries]]:
    return list(generate(spec))


def _frame_keys(item) -> np.ndarray:
    frame = item[0] if isinstance(item, tuple) else item
    return np.asarray(frame.keys)


def adjacent_frame_similarity(stream: Sequence, t: int) -> float:
    """Mean over frame ``t``'s tokens of the best cosine match in frame ``t-1``,
    averaged over slots."""
    if t < 1:
        raise ValueError("adjacent_frame_similarity needs t >= 1")
    cur = _frame_keys(stream[t])
    prev = _frame_keys(stream[t - 1])
    L, H, P, d = cur.shape
    a = normalize_rows(cur.reshape(-1, d)).reshape(L * H, P, d).astype(np.float64)
    b = normalize_rows(prev.reshape(-1, d)).reshape(L * H, prev.shape[2], d).astype(np.float64)
    sims = np.clip(np.einsum("spd,sqd->spq", a, b), -1.0, 1.0)
    return float(sims.max(axis=2).mean())


def mean_adjacent_similarity(stream: Sequence) -> float:
    return float(np.mean([adjacent_frame_similarity(stream, t) for t in range(1, len(stream))]))

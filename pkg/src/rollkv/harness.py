"""End-to-end driver: stream -> cache -> prune events -> metrics, and multi-arm comparison."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .attention import FrameQueries, fidelity_error, forward_frame
from .baselines import POLICIES, attention_oracle_scores, random_keep, recency_keep
from .budget import BudgetPlan, allocate, layer_diversity
from .kvcache import CacheState, EngineConfig, FrameKV, append_frame, apply_retention, new_cache, snapshot_counts
from .retention import score_slot, select_topk, slot_mean_diversity
from .synth import StreamSpec, generate
from .trace import iter_trace, read_header

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CSV_COLUMNS = ("schema_version", "arm", "seed", "frame_id", "fidelity_error",
               "resident_tokens", "candidate_tokens")
WALLCLOCK_KEYS = ("wallclock",)


@dataclass
class RunConfig:
    engine: EngineConfig
    stream: Union[StreamSpec, str]
    policy: str = "diversity"
    fidelity_every: int = 0
    output: Optional[str] = None
    policy_seed: Optional[int] = None  # None -> stream seed (or 0 for traces)
    shadow_max_tokens: int = 2_000_000
    track_overlap: bool = False
    fidelity_mode: str = "streaming"
    label: Optional[str] = None

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.fidelity_every < 0:
            raise ValueError("fidelity_every must be >= 0")
        if self.shadow_max_tokens < 1:
            raise ValueError("shadow_max_tokens must be >= 1")
        self.engine.validate()
        if isinstance(self.stream, StreamSpec):
            self.stream.validate()
            check_dims(self.engine, self.stream.L, self.stream.H, self.stream.d_k,
                       self.stream.d_v, self.stream.P)

    @property
    def name(self) -> str:
        return self.label or self.policy

    @property
    def seed(self) -> int:
        if self.policy_seed is not None:
            return self.policy_seed
        return self.stream.seed if isinstance(self.stream, StreamSpec) else 0


def check_dims(engine: EngineConfig, L, H, d_k, d_v, P) -> None:
    want = (engine.L, engine.H, engine.d_k, engine.d_v, engine.tokens_per_frame)
    got = (L, H, d_k, d_v, P)
    if want != got:
        raise ValueError(f"stream dims (L,H,d_k,d_v,P)={got} do not match engine {want}")


@dataclass
class RunMetrics:
    policy: str
    seed: int
    frames: int = 0
    prune_events: int = 0
    evicted_tokens: int = 0
    fidelity_frames: List[int] = field(default_factory=list)
    fidelity_errors: List[float] = field(default_factory=list)
    mean_candidates: Optional[np.ndarray] = None
    max_candidates: Optional[np.ndarray] = None
    peak_resident_tokens: int = 0
    resident_series: List[int] = field(default_factory=list)
    candidate_series: List[int] = field(default_factory=list)
    budget_violations: int = 0
    overlap_jaccard: List[float] = field(default_factory=list)
    notices: List[str] = field(default_factory=list)
    prune_latency_ns: List[int] = field(default_factory=list)
    elapsed_s: float = 0.0
    tokens_processed: int = 0

    @property
    def mean_fidelity_error(self) -> float:
        return float(np.mean(self.fidelity_errors)) if self.fidelity_errors else float("nan")

    @property
    def resident_ceiling(self) -> int:
        return max(self.resident_series) if self.resident_series else 0

    def latency_summary(self) -> Dict[str, float]:
        if not self.prune_latency_ns:
            return {"p50_ns": 0.0, "p95_ns": 0.0, "max_ns": 0.0, "mean_ns": 0.0}
        a = np.asarray(self.prune_latency_ns, dtype=np.float64)
        return {"p50_ns": float(np.percentile(a, 50)), "p95_ns": float(np.percentile(a, 95)),
                "max_ns": float(a.max()), "mean_ns": float(a.mean())}

    def to_dict(self, wallclock: bool = True) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "policy": self.policy,
            "seed": self.seed,
            "frames": self.frames,
            "prune_events": self.prune_events,
            "evicted_tokens": self.evicted_tokens,
            "fidelity": {
                "frames": list(self.fidelity_frames),
                "errors": [float(x) for x in self.fidelity_errors],
                "mean": None if not self.fidelity_errors else self.mean_fidelity_error,
            },
            "candidates": {
                "mean": None if self.mean_candidates is None else self.mean_candidates.tolist(),
                "max": None if self.max_candidates is None else self.max_candidates.tolist(),
            },
            "peak_resident_tokens": self.peak_resident_tokens,
            "resident_ceiling": self.resident_ceiling,
            "budget_violations": self.budget_violations,
            "overlap_jaccard_mean": (float(np.mean(self.overlap_jaccard))
                                     if self.overlap_jaccard else None),
            "notices": list(self.notices),
        }
        if wallclock:
            d["wallclock"] = {
                "prune_latency": self.latency_summary(),
                "elapsed_s": self.elapsed_s,
                "tokens_per_sec": self.tokens_processed / self.elapsed_s if self.elapsed_s > 0 else 0.0,
            }
        return d

    def csv_rows(self, arm: Optional[str] = None) -> List[dict]:
        fid = dict(zip(self.fidelity_frames, self.fidelity_errors))
        rows = []
        for t, (res, cand) in enumerate(zip(self.resident_series, self.candidate_series)):
            err = fid.get(t)
            rows.append({
                "schema_version": SCHEMA_VERSION,
                "arm": arm or self.policy,
                "seed": self.seed,
                "frame_id": t,
                "fidelity_error": "" if err is None else repr(float(err)),
                "resident_tokens": res,
                "candidate_tokens": cand,
            })
        return rows


def _frame_source(config: RunConfig) -> Iterator[Tuple[FrameKV, FrameQueries]]:
    if isinstance(config.stream, StreamSpec):
        return generate(config.stream)
    with open(config.stream, "rb") as fh:
        header = read_header(fh)
    check_dims(config.engine, header.L, header.H, header.d_k, header.d_v, header.P)
    return iter_trace(config.stream)[1]


def _jaccard(a: np.ndarray, b: np.ndarray) -> float:
    if len(a) == 0 and len(b) == 0:
        return 1.0
    inter = len(np.intersect1d(a, b, assume_unique=True))
    return inter / (len(a) + len(b) - inter)


EventHook = Callable[[CacheState, BudgetPlan, int], None]


class PruneEngine:
    """Score -> allocate -> select -> retain, one call per prune event."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.cfg = config.engine
        self.event = 0
        self.frozen_plan: Optional[BudgetPlan] = None

    def plan(self, cache: CacheState, div_scores) -> BudgetPlan:
        if self.frozen_plan is not None:
            return self.frozen_plan
        cfg = self.cfg
        if cfg.layer_allocation == "uniform":
            s_layer = np.zeros(cfg.L)
        else:
            means = [[None if div_scores[l][h] is None else slot_mean_diversity(div_scores[l][h])
                      for h in range(cfg.H)] for l in range(cfg.L)]
            # barrier: every slot has been scored before the layer reduction
            s_layer = layer_diversity(means)
        plan = allocate(s_layer, cfg)
        if cfg.freeze_after_first:
            self.frozen_plan = plan
        return plan

    def select(self, hc, budget: int, queries: Optional[np.ndarray], div) -> np.ndarray:
        policy = self.config.policy
        if policy == "diversity":
            return select_topk(div, budget, self.cfg.tiebreak)
        if policy == "attn-oracle":
            return select_topk(attention_oracle_scores(hc, queries), budget, self.cfg.tiebreak)
        if policy == "random":
            return random_keep(hc.candidates, budget, (self.config.seed, hc.layer, hc.head, self.event))
        return recency_keep(hc.candidates, budget)

    def __call__(self, cache: CacheState, queries: FrameQueries, metrics: RunMetrics) -> BudgetPlan:
        cfg = self.cfg
        # the plan needs every slot's diversity only under a live adaptive allocation
        plan_needs_div = cfg.layer_allocation == "adaptive" and self.frozen_plan is None
        t0 = time.perf_counter_ns()
        div = [[score_slot(cache.grid[l][h]) if plan_needs_div else None for h in range(cfg.H)]
               for l in range(cfg.L)]
        plan = self.plan(cache, div)
        keep = {}
        for hc in cache.slots():
            budget = plan.head(hc.layer, hc.head)
            if len(hc.candidates) <= budget:
                continue
            d = div[hc.layer][hc.head]
            if d is None and self.config.policy == "diversity":
                d = score_slot(hc)
            keep[(hc.layer, hc.head)] = self.select(
                hc, budget, queries.queries[hc.layer, hc.head], d)
        selected_ns = time.perf_counter_ns() - t0
        if self.config.track_overlap and self.config.policy != "attn-oracle":
            # untimed: the oracle is only a yardstick here
            for (l, h), mine in keep.items():
                hc = cache.grid[l][h]
                oracle = select_topk(attention_oracle_scores(hc, queries.queries[l, h]),
                                     len(mine), cfg.tiebreak)
                metrics.overlap_jaccard.append(_jaccard(mine, oracle))
        t1 = time.perf_counter_ns()
        report = apply_retention(cache, keep)
        metrics.prune_latency_ns.append(selected_ns + time.perf_counter_ns() - t1)
        metrics.evicted_tokens += report.total
        self.event += 1
        return plan


def run(config: RunConfig, on_event: Optional[EventHook] = None,
        frames: Optional[Iterable[Tuple[FrameKV, FrameQueries]]] = None) -> RunMetrics:
    """Process every frame of the configured stream in order.

    ``on_event(cache, plan, event_index)`` is called after each prune event.
    ``frames`` overrides the configured source (used for in-memory replays).
    """
    config.validate()
    cfg = config.engine
    source = _frame_source(config) if frames is None else iter(frames)
    metrics = RunMetrics(policy=config.policy, seed=config.seed)
    cache = new_cache(cfg)
    shadow = new_cache(cfg) if config.fidelity_every > 0 else None
    engine = PruneEngine(config)
    cand_sum = np.zeros((cfg.L, cfg.H))
    cand_max = np.zeros((cfg.L, cfg.H), dtype=np.int64)
    start = time.perf_counter()

    for frame, queries in source:
        t = frame.frame_id
        if shadow is not None and t >= 1 and t % config.fidelity_every == 0:
            pruned = forward_frame(cache, queries, config.fidelity_mode)
            full = forward_frame(shadow, queries, config.fidelity_mode)
            metrics.fidelity_frames.append(t)
            metrics.fidelity_errors.append(fidelity_error(pruned, full))

        append_frame(cache, frame)
        if shadow is not None:
            append_frame(shadow, frame)
            if shadow.resident_tokens() > config.shadow_max_tokens:
                metrics.notices.append(
                    f"fidelity sampling stopped at frame {t}: shadow cache exceeded "
                    f"{config.shadow_max_tokens} tokens")
                log.warning(metrics.notices[-1])
                shadow = None
        metrics.tokens_processed += frame.keys.shape[0] * frame.keys.shape[1] * frame.keys.shape[2]
        metrics.peak_resident_tokens = max(metrics.peak_resident_tokens, cache.resident_tokens())

        if cache.frames_seen % cfg.prune_interval == 0:
            plan = engine(cache, queries, metrics)
            metrics.prune_events += 1
            counts = snapshot_counts(cache)
            metrics.budget_violations += int((counts.candidates > plan.b_head).sum())
            if on_event is not None:
                on_event(cache, plan, engine.event - 1)

        counts = snapshot_counts(cache)
        cand_sum += counts.candidates
        cand_max = np.maximum(cand_max, counts.candidates)
        metrics.resident_series.append(counts.resident)
        metrics.candidate_series.append(int(counts.candidates.sum()))
        metrics.frames += 1

    metrics.elapsed_s = time.perf_counter() - start
    if metrics.frames:
        metrics.mean_candidates = cand_sum / metrics.frames
        metrics.max_candidates = cand_max
    return metrics


def time_prune_event(config: RunConfig, cache: CacheState, queries: FrameQueries,
                     repeats: int = 3) -> int:
    """Best-of-``repeats`` wall time (ns) of one prune event, each on a fresh copy of ``cache``."""
    best = None
    for _ in range(repeats):
        trial = copy.deepcopy(cache)
        m = RunMetrics(policy=config.policy, seed=config.seed)
        PruneEngine(config)(trial, queries, m)
        best = m.prune_latency_ns[0] if best is None else min(best, m.prune_latency_ns[0])
    return best


def lockstep_latency(arms: Mapping[str, RunConfig], min_resident: int = 0,
                     frames: Optional[Iterable[Tuple[FrameKV, FrameQueries]]] = None
                     ) -> Dict[str, List[int]]:
    """Prune-event latencies (ns) of several policies driven by one shared stream.

    Every arm keeps its own cache; each frame is appended to all of them and the
    arms then prune one after another, in an order that rotates every frame, so
    machine noise lands on all arms alike. Only events whose pre-prune resident
    count is at least ``min_resident`` are recorded.
    """
    if not arms:
        raise ValueError("lockstep_latency needs at least one arm")
    labels = list(arms)
    sigs = [_arm_signature(arms[a]) for a in labels]
    if any(sig != sigs[0] for sig in sigs):
        raise ValueError("mismatched stream specs")
    first = arms[labels[0]]
    source = _frame_source(first) if frames is None else iter(frames)
    caches = {a: new_cache(arms[a].engine) for a in labels}
    engines = {a: PruneEngine(arms[a]) for a in labels}
    out: Dict[str, List[int]] = {a: [] for a in labels}
    for i, (frame, queries) in enumerate(source):
        order = labels[i % len(labels):] + labels[:i % len(labels)]
        for a in order:
            cache = caches[a]
            append_frame(cache, frame)
            if cache.frames_seen % arms[a].engine.prune_interval:
                continue
            resident = cache.resident_tokens()
            m = RunMetrics(policy=arms[a].policy, seed=arms[a].seed)
            engines[a](cache, queries, m)
            if resident >= min_resident:
                out[a].append(m.prune_latency_ns[0])
    return out


# ---------------------------------------------------------------- comparison


@dataclass
class Comparison:
    arms: List[str]
    seeds: List[int]
    runs: Dict[Tuple[str, int], RunMetrics]

    def per_seed(self, arm: str, metric: str = "mean_fidelity_error") -> List[float]:
        return [_metric(self.runs[(arm, s)], metric) for s in self.seeds]

    def wins(self, a: str, b: str, metric: str = "mean_fidelity_error") -> int:
        """Seeds where arm ``a`` is at least as good (<=) as arm ``b``."""
        return sum(x <= y for x, y in zip(self.per_seed(a, metric), self.per_seed(b, metric)))

    def to_dict(self, wallclock: bool = True) -> dict:
        metrics = ["mean_fidelity_error", "peak_resident_tokens", "evicted_tokens"]
        if wallclock:
            metrics.append("prune_latency_p50_ns")
        agg = {arm: {m: float(np.mean(self.per_seed(arm, m))) for m in metrics} for arm in self.arms}
        ordering = {m: sorted(self.arms, key=lambda a: (agg[a][m], self.arms.index(a)))
                    for m in metrics}
        pairwise = {m: {a: {b: self.wins(a, b, m) for b in self.arms if b != a} for a in self.arms}
                    for m in metrics}
        return {
            "schema_version": SCHEMA_VERSION,
            "arms": list(self.arms),
            "seeds": list(self.seeds),
            "aggregate": agg,
            "ordering": ordering,
            "wins_le": pairwise,
            "runs": {f"{arm}/{seed}": self.runs[(arm, seed)].to_dict(wallclock)
                     for arm in self.arms for seed in self.seeds},
        }

    def csv_rows(self) -> List[dict]:
        rows = []
        for seed in self.seeds:
            for arm in self.arms:
                rows.extend(self.runs[(arm, seed)].csv_rows(arm))
        return rows


def _metric(m: RunMetrics, name: str) -> float:
    if name == "prune_latency_p50_ns":
        return m.latency_summary()["p50_ns"]
    return float(getattr(m, name))


def _arm_signature(rc: RunConfig):
    e = rc.engine
    dims = (e.L, e.H, e.d_k, e.d_v, e.tokens_per_frame)
    stream = rc.stream.to_dict() if isinstance(rc.stream, StreamSpec) else rc.stream
    return dims, stream


def compare(arms: Mapping[str, RunConfig], seeds: Optional[Sequence[int]] = None) -> Comparison:
    """Run every arm on the same stream(s). With ``seeds``, each seed replaces the stream
    seed (and the policy seed) for all arms, giving paired runs."""
    if not arms:
        raise ValueError("compare needs at least one arm")
    sigs = {label: _arm_signature(rc) for label, rc in arms.items()}
    first = next(iter(sigs.values()))
    for label, sig in sigs.items():
        if sig != first:
            raise ValueError(f"mismatched stream specs: arm {label!r} differs from the first arm")
    if seeds is None:
        seeds = [next(iter(arms.values())).seed]
    runs = {}
    for seed in seeds:
        for label, rc in arms.items():
            if isinstance(rc.stream, StreamSpec):
                rc_s = replace(rc, stream=replace(rc.stream, seed=seed), policy_seed=seed)
            else:
                rc_s = replace(rc, policy_seed=seed)
            runs[(label, seed)] = run(rc_s)
    return Comparison(list(arms), list(seeds), runs)


# ---------------------------------------------------------------- reports


def write_csv(rows: Iterable[dict], fh) -> None:
    w = csv.DictWriter(fh, fieldnames=list(CSV_COLUMNS), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)


def csv_text(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    write_csv(rows, buf)
    return buf.getvalue()


def json_text(obj: dict) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def strip_wallclock(d: dict) -> dict:
    """Copy of a report dict without wall-clock fields (for determinism checks)."""
    if isinstance(d, dict):
        return {k: strip_wallclock(v) for k, v in d.items()
                if k not in WALLCLOCK_KEYS and k != "prune_latency_p50_ns"}
    if isinstance(d, list):
        return [strip_wallclock(x) for x in d]
    return d


def run_config_summary(rc: RunConfig) -> dict:
    stream = rc.stream.to_dict() if isinstance(rc.stream, StreamSpec) else {"trace": str(rc.stream)}
    return {"engine": asdict(rc.engine), "stream": stream, "policy": rc.policy,
            "fidelity_every": rc.fidelity_every}

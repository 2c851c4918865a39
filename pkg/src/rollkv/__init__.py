"""Bounded-memory streaming KV cache with key-diversity eviction."""

from .attention import FrameOutputs, FrameQueries, fidelity_error, forward_frame
from .budget import BudgetPlan, allocate, layer_diversity
from .kvcache import (CacheState, EngineConfig, FrameKV, HeadCache, TokenEntry, append_frame,
                      apply_retention, new_cache, snapshot_counts)
from .harness import RunConfig, RunMetrics, compare, run
from .retention import SlotScores, diversity_scores, mean_key, select_topk, slot_mean_diversity
from .synth import StreamSpec, adjacent_frame_similarity, calibration_spec, generate

__version__ = "0.1.0"

"""Plain-text ``key = value`` run configuration.

One key per line, ``#`` starts a comment, keys are case-sensitive. Every key
can also be set from the command line (``--set key=value`` or a dedicated
flag). Unknown keys are rejected.

Engine / stream dimensions
    L, H, d_k, d_v, P                 positive ints (P = tokens per frame)
Engine
    b_init                            tokens per head before layer reallocation
    tau                               softmax temperature for layer budgets
    anchor                            true/false
    anchor_frame_count                frames held as immutable anchors
    prune_interval                    frames between prune events
    min_head_budget                   per-head floor (default P)
    tiebreak                          recent-first | stable-index
    layer_allocation                  adaptive | uniform
    block_size                        streaming attention tile size
    freeze_after_first                true/false, keep the first budget plan
Synthetic stream
    n_frames, m_clusters, drift_angle, noise_sigma, novelty_rho, seed,
    query_scale, query_rotation, anchor_query_frac, value_coupling,
    m_clusters_per_layer              comma-separated ints, one per layer
Run
    policy                            diversity | attn-oracle | random | recency
    trace                             replay an .rkv file instead of generating
    fidelity_every                    sample fidelity every k frames (0 = off)
    shadow_max_tokens                 cap on the full-cache reference
    track_overlap                     true/false, Jaccard vs attention oracle
    out, format                       report path and csv | json
"""

from __future__ import annotations

import configparser
from dataclasses import fields
from typing import Dict, Mapping, Optional

from .harness import RunConfig
from .kvcache import EngineConfig
from .synth import StreamSpec


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _int_tuple(s: str):
    s = s.strip()
    if not s or s.lower() == "none":
        return None
    return tuple(int(x) for x in s.replace(";", ",").split(",") if x.strip())


def _opt_int(s: str):
    return None if s.strip().lower() in ("", "none") else int(s)


# key -> parser
SCHEMA = {
    "L": int, "H": int, "d_k": int, "d_v": int, "P": int,
    "b_init": int, "tau": float, "anchor": _bool, "anchor_frame_count": int,
    "prune_interval": int, "min_head_budget": _opt_int, "tiebreak": str,
    "layer_allocation": str, "block_size": int, "freeze_after_first": _bool,
    "n_frames": int, "m_clusters": int, "drift_angle": float, "noise_sigma": float,
    "novelty_rho": float, "seed": int, "query_scale": float, "query_rotation": float,
    "anchor_query_frac": float, "value_coupling": float, "m_clusters_per_layer": _int_tuple,
    "policy": str, "trace": str, "fidelity_every": int, "shadow_max_tokens": int,
    "track_overlap": _bool, "out": str, "format": str,
}

DEFAULTS = {"L": "4", "H": "2", "d_k": "32", "d_v": "32", "P": "16", "b_init": "256",
            "n_frames": "200", "policy": "diversity", "fidelity_every": "0", "format": "json"}

_ENGINE_RENAMES = {"b_init": "b_init_per_head", "P": "tokens_per_frame", "anchor": "anchor_enabled"}
_ENGINE_FIELDS = {f.name for f in fields(EngineConfig)}
_STREAM_FIELDS = {f.name for f in fields(StreamSpec)}


def parse_text(text: str) -> Dict[str, str]:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                   comment_prefixes=("#",), inline_comment_prefixes=("#",))
    cp.optionxform = str  # keep key case
    try:
        cp.read_string("[run]\n" + text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    raw = dict(cp["run"])
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return raw


def load(path: str) -> Dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_text(fh.read())


def parse_override(item: str) -> tuple:
    if "=" not in item:
        raise ConfigError(f"override must look like key=value, got {item!r}")
    k, v = item.split("=", 1)
    k = k.strip()
    if k not in SCHEMA:
        raise ConfigError(f"unknown config key: {k}")
    return k, v.strip()


def typed(raw: Mapping[str, str]) -> Dict[str, object]:
    merged = dict(DEFAULTS)
    merged.update(raw)
    out = {}
    for k, v in merged.items():
        if k not in SCHEMA:
            raise ConfigError(f"unknown config key: {k}")
        try:
            out[k] = SCHEMA[k](v)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad value for {k}: {v!r} ({e})") from None
    return out


def engine_config(values: Mapping[str, object]) -> EngineConfig:
    kw = {}
    for k, v in values.items():
        name = _ENGINE_RENAMES.get(k, k)
        if name in _ENGINE_FIELDS:
            kw[name] = v
    try:
        return EngineConfig(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def stream_spec(values: Mapping[str, object]) -> StreamSpec:
    kw = {k: v for k, v in values.items() if k in _STREAM_FIELDS}
    try:
        return StreamSpec(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def run_config(raw: Mapping[str, str], label: Optional[str] = None) -> RunConfig:
    values = typed(raw)
    engine = engine_config(values)
    stream = values.get("trace") or stream_spec(values)
    try:
        return RunConfig(
            engine=engine,
            stream=stream,
            policy=values["policy"],
            fidelity_every=values["fidelity_every"],
            output=values.get("out"),
            shadow_max_tokens=values.get("shadow_max_tokens", 2_000_000),
            track_overlap=values.get("track_overlap", False),
            label=label,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None

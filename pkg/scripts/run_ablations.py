"""Paired-seed ablations on the calibration stream.

Writes one CSV (per-frame rows) and one JSON (aggregates, win counts) per
ablation into --out:

    policy     diversity vs attn-oracle vs random vs recency
    anchor     anchor on vs off, queries drawn from the first frame's clusters
    layers     adaptive vs uniform layer budgets on per-layer cluster counts
    budget     b_init sweep for the diversity policy
"""

import argparse
import os
from dataclasses import replace

from rollkv.harness import RunConfig, compare, csv_text, json_text
from rollkv.kvcache import EngineConfig
from rollkv.synth import calibration_spec


def engine(b_init, **kw):
    return EngineConfig(L=4, H=2, d_k=32, d_v=32, b_init_per_head=b_init, tokens_per_frame=16, **kw)


def ablations(frames, b_init, every):
    spec = calibration_spec(n_frames=frames)
    base = RunConfig(engine(b_init), spec, "diversity", fidelity_every=every)
    yield "policy", {p: replace(base, policy=p)
                     for p in ("diversity", "attn-oracle", "random", "recency")}
    anchored = replace(base, stream=replace(spec, anchor_query_frac=1.0))
    yield "anchor", {"on": anchored,
                     "off": replace(anchored, engine=engine(b_init, anchor_enabled=False))}
    hetero = replace(base, stream=replace(spec, m_clusters_per_layer=(1, 2, 8, 16)))
    yield "layers", {"adaptive": hetero,
                     "uniform": replace(hetero, engine=engine(b_init, layer_allocation="uniform"))}
    yield "budget", {f"b{b}": replace(base, engine=engine(b)) for b in (64, 256, 1024)}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--frames", type=int, default=200)
    ap.add_argument("--b-init", type=int, default=64)
    ap.add_argument("--fidelity-every", type=int, default=5)
    ap.add_argument("--only", choices=["policy", "anchor", "layers", "budget"])
    ap.add_argument("--out", default="results")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    seeds = list(range(args.seeds))
    for name, arms in ablations(args.frames, args.b_init, args.fidelity_every):
        if args.only and name != args.only:
            continue
        res = compare(arms, seeds)
        with open(os.path.join(args.out, f"{name}.csv"), "w") as fh:
            fh.write(csv_text(res.csv_rows()))
        with open(os.path.join(args.out, f"{name}.json"), "w") as fh:
            fh.write(json_text(res.to_dict()))
        agg = res.to_dict()["aggregate"]
        first = res.arms[0]
        print(f"{name}:")
        for arm in res.arms:
            wins = "" if arm == first else f"  {first} <= {arm} in {res.wins(first, arm)}/{len(seeds)}"
            print(f"  {arm:12s} mean err {agg[arm]['mean_fidelity_error']:.4f}{wins}")


if __name__ == "__main__":
    main()

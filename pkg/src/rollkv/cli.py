"""Command line: ``rollkv {gen,run,compare,inspect}``.

Exit codes: 0 success, 1 configuration error, 2 I/O error (including
malformed traces).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Optional

from . import config as cfgmod
from .harness import compare, csv_text, json_text, run, run_config_summary
from .synth import generate
from .trace import HEADER_BYTES, TraceFormatError, TraceHeader, read_header, write_trace

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 1, 2

log = logging.getLogger("rollkv")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", metavar="PATH")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trace", metavar="PATH")
    p.add_argument("--policy", choices=["diversity", "attn-oracle", "random", "recency"])
    p.add_argument("--b-init", type=int, dest="b_init")
    p.add_argument("--tau", type=float)
    p.add_argument("--no-anchor", action="store_true")
    p.add_argument("--uniform-layers", action="store_true")
    p.add_argument("--prune-interval", type=int, dest="prune_interval")
    p.add_argument("--fidelity-every", type=int, dest="fidelity_every")
    p.add_argument("--format", choices=["csv", "json"])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rollkv", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate a synthetic stream into an .rkv trace")
    _add_common(g)

    r = sub.add_parser("run", help="run one policy and write a report")
    _add_common(r)
    _add_run_flags(r)

    c = sub.add_parser("compare", help="paired multi-arm comparison")
    _add_common(c)
    _add_run_flags(c)
    c.add_argument("--arm", action="append", default=[], metavar="LABEL:KEY=VAL,...",
                   help="one arm; overrides applied on top of the base config (repeatable)")
    c.add_argument("--seeds", help="e.g. 0-19 or 1,2,5")

    i = sub.add_parser("inspect", help="dump an .rkv trace header")
    i.add_argument("trace", metavar="PATH")
    return ap


def _raw_config(args) -> Dict[str, str]:
    raw = cfgmod.load(args.config) if args.config else {}
    flags = {
        "seed": getattr(args, "seed", None),
        "trace": getattr(args, "trace", None),
        "policy": getattr(args, "policy", None),
        "b_init": getattr(args, "b_init", None),
        "tau": getattr(args, "tau", None),
        "prune_interval": getattr(args, "prune_interval", None),
        "fidelity_every": getattr(args, "fidelity_every", None),
        "format": getattr(args, "format", None),
        "out": getattr(args, "out", None),
    }
    for k, v in flags.items():
        if v is not None:
            raw[k] = str(v)
    if getattr(args, "no_anchor", False):
        raw["anchor"] = "false"
    if getattr(args, "uniform_layers", False):
        raw["layer_allocation"] = "uniform"
    for item in args.overrides:
        k, v = cfgmod.parse_override(item)
        raw[k] = v
    return raw


def parse_seeds(text: str) -> List[int]:
    seeds: List[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            a, b = part.split("-", 1)
            seeds.extend(range(int(a), int(b) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise cfgmod.ConfigError("no seeds given")
    return seeds


def parse_arm(text: str, index: int):
    label, _, body = text.rpartition(":")
    overrides = dict(cfgmod.parse_override(x) for x in body.split(",") if x.strip())
    if not label:
        label = ",".join(f"{k}={v}" for k, v in overrides.items()) or f"arm{index}"
    return label, overrides


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_gen(args) -> int:
    raw = _raw_config(args)
    if not args.out:
        raise cfgmod.ConfigError("gen needs --out PATH")
    spec = cfgmod.stream_spec(cfgmod.typed(raw))
    n = write_trace(args.out, TraceHeader.for_spec(spec), generate(spec))
    log.info("wrote %d frames to %s", n, args.out)
    return EXIT_OK


def cmd_run(args) -> int:
    raw = _raw_config(args)
    rc = cfgmod.run_config(raw)
    fmt = raw.get("format", "json")
    metrics = run(rc)
    if fmt == "csv":
        text = csv_text(metrics.csv_rows(rc.name))
    else:
        report = metrics.to_dict()
        report["config"] = run_config_summary(rc)
        text = json_text(report)
    _emit(text, rc.output)
    return EXIT_OK


def cmd_compare(args) -> int:
    raw = _raw_config(args)
    specs = [parse_arm(a, i) for i, a in enumerate(args.arm)] or [("base", {})]
    arms = {}
    for label, overrides in specs:
        merged = dict(raw)
        merged.update(overrides)
        arms[label] = cfgmod.run_config(merged, label=label)
    seeds = parse_seeds(args.seeds) if args.seeds else None
    result = compare(arms, seeds)
    report = result.to_dict()
    report["config"] = {label: run_config_summary(rc) for label, rc in arms.items()}
    out = raw.get("out")
    if out:
        stem, ext = os.path.splitext(out)
        if ext not in (".csv", ".json"):
            stem = out
        _emit(csv_text(result.csv_rows()), stem + ".csv")
        _emit(json_text(report), stem + ".json")
    elif raw.get("format") == "csv":
        _emit(csv_text(result.csv_rows()), None)
    else:
        _emit(json_text(report), None)
    return EXIT_OK


def cmd_inspect(args) -> int:
    with open(args.trace, "rb") as fh:
        header = read_header(fh)
    size = os.path.getsize(args.trace)
    expected = HEADER_BYTES + header.n_frames * header.frame_bytes
    info = {"magic": "RKV1", "version": header.version, "L": header.L, "H": header.H,
            "d_k": header.d_k, "d_v": header.d_v, "P": header.P, "n_frames": header.n_frames,
            "frame_bytes": header.frame_bytes, "file_bytes": size,
            "complete": size == expected}
    sys.stdout.write(json.dumps(info, indent=2) + "\n")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "run": cmd_run, "compare": cmd_compare, "inspect": cmd_inspect}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except (TraceFormatError, OSError) as e:
        print(f"rollkv: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"rollkv: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

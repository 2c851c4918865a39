import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from rollkv.harness import (CSV_COLUMNS, RunConfig, compare, csv_text, json_text, lockstep_latency,
                            run, strip_wallclock)
from rollkv.kvcache import EngineConfig, snapshot_counts
from rollkv.synth import StreamSpec
from rollkv.trace import TraceHeader, write_trace
from rollkv.synth import generate

GOLDEN = Path(__file__).parent / "golden"


def small(policy="diversity", b=8, n_frames=12, seed=0, fidelity_every=3, **kw):
    spec = StreamSpec(L=2, H=2, d_k=8, d_v=8, P=4, n_frames=n_frames, seed=seed)
    eng = EngineConfig(L=2, H=2, d_k=8, d_v=8, b_init_per_head=b, tokens_per_frame=4, **kw)
    return RunConfig(eng, spec, policy, fidelity_every=fidelity_every)


def _close(a, b):
    if isinstance(a, dict):
        assert sorted(a) == sorted(b)
        for k in a:
            _close(a[k], b[k])
    elif isinstance(a, list):
        assert len(a) == len(b)
        for x, y in zip(a, b):
            _close(x, y)
    elif isinstance(a, float):
        assert a == pytest.approx(b, rel=1e-9, abs=1e-12)
    else:
        assert a == b


def test_golden_json_report():
    got = json.loads(json_text(strip_wallclock(run(small()).to_dict())))
    _close(got, json.loads((GOLDEN / "report_seed0.json").read_text()))


def test_golden_csv_report():
    got = csv_text(run(small()).csv_rows()).splitlines()
    want = (GOLDEN / "report_seed0.csv").read_text().splitlines()
    assert got[0] == want[0] == ",".join(CSV_COLUMNS)
    assert len(got) == len(want) == 13
    for g, w in zip(got[1:], want[1:]):
        gs, ws = g.split(","), w.split(",")
        assert gs[:4] == ws[:4] and gs[5:] == ws[5:]
        if ws[4]:
            assert float(gs[4]) == pytest.approx(float(ws[4]), rel=1e-9)


def test_wallclock_fields_present_and_nonnegative():
    d = run(small()).to_dict()
    lat = d["wallclock"]["prune_latency"]
    assert set(lat) == {"p50_ns", "p95_ns", "max_ns", "mean_ns"}
    assert all(v >= 0 for v in lat.values())
    assert d["wallclock"]["tokens_per_sec"] > 0


@pytest.mark.parametrize("policy", ["diversity", "attn-oracle", "random", "recency"])
def test_identical_runs_identical_reports(policy):
    a = json_text(strip_wallclock(run(small(policy)).to_dict()))
    b = json_text(strip_wallclock(run(small(policy)).to_dict()))
    assert a == b


def test_budget_above_stream_size_is_lossless():
    m = run(small(b=64, n_frames=10, fidelity_every=1))
    assert m.evicted_tokens == 0
    assert m.fidelity_errors and max(m.fidelity_errors) == 0.0


@pytest.mark.parametrize("policy", ["diversity", "attn-oracle", "random", "recency"])
def test_every_event_respects_slot_budgets(policy):
    seen = []

    def hook(cache, plan, idx):
        counts = snapshot_counts(cache)
        assert (counts.candidates <= plan.b_head).all()
        assert counts.anchor.tolist() == [[4, 4], [4, 4]]
        seen.append(idx)

    m = run(small(policy, n_frames=20), on_event=hook)
    assert seen == list(range(20))
    assert m.budget_violations == 0
    assert m.resident_ceiling <= 32 + 16


def test_prune_interval():
    m = run(small(n_frames=12, prune_interval=5))
    assert m.prune_events == 2
    # 16 anchors + 32 budget after an event, then five frames of 16 before the next
    assert m.resident_series == [16, 32, 48, 64, 48, 64, 80, 96, 112, 48, 64, 80]
    assert m.peak_resident_tokens == 128


def test_trace_replay_matches_generator(tmp_path):
    rc = small()
    path = tmp_path / "s.rkv"
    write_trace(path, TraceHeader.for_spec(rc.stream), generate(rc.stream))
    a = strip_wallclock(run(rc).to_dict())
    b = strip_wallclock(run(replace(rc, stream=str(path), policy_seed=0)).to_dict())
    assert a == b


def test_trace_dimension_mismatch_fails_early(tmp_path):
    spec = StreamSpec(L=2, H=2, d_k=6, d_v=8, P=4, n_frames=2)
    path = tmp_path / "s.rkv"
    write_trace(path, TraceHeader.for_spec(spec), generate(spec))
    with pytest.raises(ValueError, match="do not match"):
        run(replace(small(), stream=str(path)))


def test_spec_dimension_mismatch_rejected():
    with pytest.raises(ValueError, match="do not match"):
        replace(small(), stream=StreamSpec(L=3, H=2, d_k=8, d_v=8, P=4))


def test_shadow_cap_stops_fidelity_with_notice():
    rc = replace(small(n_frames=12, fidelity_every=1), shadow_max_tokens=100)
    m = run(rc)
    assert len(m.notices) == 1 and "fidelity sampling stopped at frame 6" in m.notices[0]
    assert m.fidelity_frames == [1, 2, 3, 4, 5, 6]


def test_overlap_tracking():
    rc = replace(small(n_frames=10), track_overlap=True)
    m = run(rc)
    assert m.overlap_jaccard and all(0.0 <= j <= 1.0 for j in m.overlap_jaccard)
    assert run(replace(rc, policy="attn-oracle")).overlap_jaccard == []


def test_frozen_plan_reused():
    plans = []
    run(small(n_frames=8, freeze_after_first=True), on_event=lambda c, p, i: plans.append(p))
    assert all(p is plans[0] for p in plans)


def test_compare_paired_report():
    arms = {"div": small("diversity"), "rnd": small("random")}
    cmp = compare(arms, seeds=[0, 1, 2])
    assert cmp.arms == ["div", "rnd"] and cmp.seeds == [0, 1, 2]
    d = cmp.to_dict(wallclock=False)
    assert set(d) == {"schema_version", "arms", "seeds", "aggregate", "ordering", "wins_le", "runs"}
    assert sorted(d["runs"]) == ["div/0", "div/1", "div/2", "rnd/0", "rnd/1", "rnd/2"]
    assert d["wins_le"]["mean_fidelity_error"]["div"]["rnd"] == cmp.wins("div", "rnd")
    assert sorted(d["ordering"]["mean_fidelity_error"]) == ["div", "rnd"]
    rows = cmp.csv_rows()
    assert len(rows) == 2 * 3 * 12 and {r["arm"] for r in rows} == {"div", "rnd"}
    # seed replacement really changes the stream
    assert cmp.runs[("div", 0)].fidelity_errors != cmp.runs[("div", 1)].fidelity_errors


def test_compare_rejects_mismatched_streams():
    other = replace(small(), stream=replace(small().stream, noise_sigma=0.3))
    with pytest.raises(ValueError, match="mismatched stream specs"):
        compare({"a": small(), "b": other})
    with pytest.raises(ValueError):
        compare({})


def test_lockstep_latency_records_every_event():
    arms = {"div": small("diversity", n_frames=10), "orc": small("attn-oracle", n_frames=10)}
    lat = lockstep_latency(arms)
    assert len(lat["div"]) == len(lat["orc"]) == 10
    assert all(x >= 0 for v in lat.values() for x in v)
    # pre-prune residency tops out at 16 anchors + 32 budget + one 16-token frame
    assert lockstep_latency(arms, min_resident=64)["div"] != []
    assert lockstep_latency(arms, min_resident=65) == {"div": [], "orc": []}


def test_run_config_rejects():
    with pytest.raises(ValueError, match="policy"):
        replace(small(), policy="h2o")
    with pytest.raises(ValueError):
        replace(small(), fidelity_every=-1)

import json

import pytest

from rollkv import config as cfgmod
from rollkv.cli import main, parse_arm, parse_seeds

SMALL = ["--set", "L=2", "--set", "H=1", "--set", "d_k=8", "--set", "d_v=8", "--set", "P=4",
         "--set", "n_frames=8"]


def test_parse_text_and_types():
    raw = cfgmod.parse_text("# comment\nb_init = 64\ntau=0.5  # inline\nanchor = off\n"
                            "m_clusters_per_layer = 1, 2, 8, 16\n")
    assert raw == {"b_init": "64", "tau": "0.5", "anchor": "off",
                   "m_clusters_per_layer": "1, 2, 8, 16"}
    rc = cfgmod.run_config(raw)
    assert rc.engine.b_init_per_head == 64 and rc.engine.tau == 0.5
    assert rc.engine.anchor_enabled is False
    assert rc.stream.m_clusters_per_layer == (1, 2, 8, 16)


def test_defaults():
    rc = cfgmod.run_config({})
    assert (rc.engine.L, rc.engine.H, rc.engine.tokens_per_frame) == (4, 2, 16)
    assert rc.policy == "diversity" and rc.fidelity_every == 0


@pytest.mark.parametrize("text", ["bogus = 1\n", "b_init = many\n", "anchor = maybe\n",
                                  "policy = h2o\n", "tau = -1\n", "b_init = 4\n"])
def test_config_errors(text):
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.run_config(cfgmod.parse_text(text))


def test_override_parsing():
    assert cfgmod.parse_override("tau = 2") == ("tau", "2")
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.parse_override("tau")
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.parse_override("speed=3")


def test_schema_covers_every_flag():
    for key in ("b_init", "tau", "anchor", "layer_allocation", "prune_interval", "fidelity_every",
                "seed", "out", "format", "policy", "trace"):
        assert key in cfgmod.SCHEMA


def test_seeds_and_arms():
    assert parse_seeds("0-3,7") == [0, 1, 2, 3, 7]
    assert parse_arm("div:policy=diversity,b_init=32", 0) == (
        "div", {"policy": "diversity", "b_init": "32"})
    assert parse_arm("policy=random", 1)[0] == "policy=random"
    with pytest.raises(cfgmod.ConfigError):
        parse_seeds(",")


def test_cli_gen_inspect_run(tmp_path, capsys):
    trace = tmp_path / "s.rkv"
    assert main(["gen", *SMALL, "--seed", "3", "--out", str(trace)]) == 0
    assert main(["inspect", str(trace)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["n_frames"] == 8 and info["complete"] is True and info["d_k"] == 8

    out = tmp_path / "r.json"
    assert main(["run", *SMALL, "--trace", str(trace), "--b-init", "8", "--fidelity-every", "2",
                 "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["frames"] == 8 and len(rep["fidelity"]["errors"]) == 3
    assert rep["config"]["stream"] == {"trace": str(trace)}

    assert main(["run", *SMALL, "--b-init", "8", "--format", "csv", "--no-anchor",
                 "--uniform-layers", "--policy", "recency", "--prune-interval", "2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("schema_version,arm") and len(lines) == 9
    assert lines[1].split(",")[1] == "recency"


def test_cli_config_file(tmp_path, capsys):
    conf = tmp_path / "run.conf"
    conf.write_text("L = 2\nH = 1\nd_k = 8\nd_v = 8\nP = 4\nn_frames = 6\nb_init = 8\n"
                    "policy = random\n")
    assert main(["run", "--config", str(conf), "--tau", "2.0"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["policy"] == "random" and rep["config"]["engine"]["tau"] == 2.0


def test_cli_compare_writes_csv_and_json(tmp_path):
    stem = tmp_path / "cmp"
    assert main(["compare", *SMALL, "--b-init", "8", "--fidelity-every", "2",
                 "--arm", "div:policy=diversity", "--arm", "rnd:policy=random",
                 "--seeds", "0-1", "--out", str(stem)]) == 0
    rep = json.loads((tmp_path / "cmp.json").read_text())
    assert rep["arms"] == ["div", "rnd"] and rep["seeds"] == [0, 1]
    assert len((tmp_path / "cmp.csv").read_text().splitlines()) == 1 + 2 * 2 * 8


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["run", "--set", "b_init=2"]) == 1
    assert main(["run", "--set", "nonsense=2"]) == 1
    assert main(["run", "--config", str(tmp_path / "missing.conf")]) == 2
    assert main(["inspect", str(tmp_path / "missing.rkv")]) == 2
    bad = tmp_path / "bad.rkv"
    bad.write_bytes(b"JUNKJUNKJUNK" * 4)
    assert main(["inspect", str(bad)]) == 2
    assert main(["run", "--trace", str(bad)]) == 2
    assert main(["gen", "--set", "n_frames=2"]) == 1  # no --out
    # trace dims differ from config dims: a configuration error
    trace = tmp_path / "s.rkv"
    main(["gen", *SMALL, "--out", str(trace)])
    assert main(["run", "--trace", str(trace)]) == 1
    assert "config error" in capsys.readouterr().err

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rollkv.synth import (StreamSpec, adjacent_frame_similarity, calibration_spec, generate,
                          generate_list, mean_adjacent_similarity)
from rollkv.trace import (HEADER_BYTES, TraceFormatError, TraceHeader, iter_trace, read_trace,
                          write_trace)


def test_shapes_and_dtypes():
    spec = StreamSpec(L=2, H=3, d_k=8, d_v=5, P=4, n_frames=3)
    frames = generate_list(spec)
    assert len(frames) == 3
    kv, q = frames[2]
    assert kv.frame_id == q.frame_id == 2
    assert kv.keys.shape == (2, 3, 4, 8) and kv.values.shape == (2, 3, 4, 5)
    assert q.queries.shape == (2, 3, 4, 8)
    assert kv.keys.dtype == kv.values.dtype == q.queries.dtype == np.float32


def test_pure_function_of_spec():
    spec = StreamSpec(n_frames=4, seed=9)
    a, b = generate_list(spec), generate_list(spec)
    for (ka, qa), (kb, qb) in zip(a, b):
        assert ka.keys.tobytes() == kb.keys.tobytes()
        assert ka.values.tobytes() == kb.values.tobytes()
        assert qa.queries.tobytes() == qb.queries.tobytes()
    c = generate_list(StreamSpec(n_frames=4, seed=10))
    assert a[0][0].keys.tobytes() != c[0][0].keys.tobytes()


def test_noiseless_static_stream_repeats_exactly():
    frames = generate_list(StreamSpec(n_frames=3, drift_angle=0.0, noise_sigma=0.0, m_clusters=1))
    assert adjacent_frame_similarity(frames, 2) == pytest.approx(1.0, abs=1e-6)


def test_query_norm_and_value_rms():
    spec = StreamSpec(n_frames=1, query_scale=2.0, d_k=16)
    kv, q = generate_list(spec)[0]
    np.testing.assert_allclose(np.linalg.norm(q.queries, axis=-1), 2.0 * 4.0, rtol=1e-5)
    np.testing.assert_allclose(np.sqrt((kv.values.astype(np.float64) ** 2).mean(-1)), 1.0, rtol=1e-5)


def test_calibration_preset_is_redundant():
    assert mean_adjacent_similarity(generate_list(calibration_spec(n_frames=20))) >= 0.95


def test_more_noise_means_less_redundancy():
    low = mean_adjacent_similarity(generate_list(StreamSpec(n_frames=10, noise_sigma=0.05)))
    high = mean_adjacent_similarity(generate_list(StreamSpec(n_frames=10, noise_sigma=1.0)))
    assert high < low


def test_adjacent_similarity_needs_previous_frame():
    with pytest.raises(ValueError):
        adjacent_frame_similarity(generate_list(StreamSpec(n_frames=2)), 0)


@pytest.mark.parametrize("kw", [dict(P=0), dict(novelty_rho=1.5), dict(noise_sigma=-1.0),
                                dict(m_clusters_per_layer=(1, 2)), dict(value_coupling=2.0)])
def test_spec_rejects(kw):
    with pytest.raises(ValueError):
        StreamSpec(**kw)


def test_per_layer_clusters():
    spec = StreamSpec(L=3, m_clusters_per_layer=[1, 2, 8])
    assert [spec.clusters_for_layer(l) for l in range(3)] == [1, 2, 8]


def _roundtrip(tmp_path, spec):
    path = tmp_path / "t.rkv"
    frames = generate_list(spec)
    write_trace(path, TraceHeader.for_spec(spec), frames)
    header, back = read_trace(path)
    assert header == TraceHeader.for_spec(spec)
    assert path.stat().st_size == HEADER_BYTES + spec.n_frames * header.frame_bytes
    for (ka, qa), (kb, qb) in zip(frames, back):
        assert ka.frame_id == kb.frame_id
        assert ka.keys.tobytes() == kb.keys.tobytes()
        assert ka.values.tobytes() == kb.values.tobytes()
        assert qa.queries.tobytes() == qb.queries.tobytes()
    return path


def test_header_layout(tmp_path):
    spec = StreamSpec(L=1, H=1, d_k=2, d_v=3, P=1, n_frames=1)
    path = _roundtrip(tmp_path, spec)
    raw = path.read_bytes()
    assert raw[:32] == b"RKV1" + bytes.fromhex("01000000" "01000000" "01000000" "02000000"
                                                "03000000" "01000000" "01000000")
    # frame id then k (2) v (3) q (2) float32
    assert len(raw) == 32 + 4 + 7 * 4
    assert raw[32:36] == b"\x00\x00\x00\x00"


@settings(max_examples=10)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(2, 6), st.integers(1, 5),
       st.integers(1, 4), st.integers(0, 4), st.integers(0, 99))
def test_roundtrip_bitwise(tmp_path_factory, L, H, d_k, d_v, P, n, seed):
    spec = StreamSpec(L=L, H=H, d_k=d_k, d_v=d_v, P=P, n_frames=n, seed=seed)
    _roundtrip(tmp_path_factory.mktemp("rt"), spec)


def test_lazy_iteration(tmp_path):
    spec = StreamSpec(n_frames=3)
    path = _roundtrip(tmp_path, spec)
    header, frames = iter_trace(path)
    assert header.n_frames == 3
    assert [kv.frame_id for kv, _ in frames] == [0, 1, 2]


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.rkv"
    p.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(TraceFormatError, match="unrecognized trace"):
        read_trace(p)
    p.write_bytes(b"RK")
    with pytest.raises(TraceFormatError, match="unrecognized trace"):
        read_trace(p)


def test_truncated_trace(tmp_path):
    path = _roundtrip(tmp_path, StreamSpec(n_frames=3))
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(TraceFormatError, match="short read at frame 2"):
        read_trace(path)


def test_write_checks_frame_count(tmp_path):
    spec = StreamSpec(n_frames=2)
    with pytest.raises(ValueError, match="declares 3 frames"):
        write_trace(tmp_path / "x.rkv", TraceHeader.for_spec(StreamSpec(n_frames=3)),
                    generate(spec))

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asyncoffload.gradcore import column_norms_sq
from asyncoffload.selection import ChannelSelection, select_channels
from asyncoffload.sharding import (
    CommLedger,
    ShardLayout,
    SegmentMap,
    Segment,
    build_segment_map,
    comm_reduction_factor,
    full_matrix_bytes,
    gather_column_norms,
    reduction_table,
    shard_matrix,
)


def test_shard_shapes():
    shards, layout = shard_matrix(np.zeros((4096, 8), np.float32), 4)
    assert [s.shape for s in shards] == [(1024, 8)] * 4
    shards, layout = shard_matrix(np.arange(10.0).reshape(5, 2), 2)
    assert [s.shape[0] for s in shards] == [3, 2]
    assert layout.row_ranges == ((0, 3), (3, 5))


def test_shard_reconcatenation_is_identity(rng):
    g = rng.standard_normal((13, 7)).astype(np.float32)
    for n in range(1, 14):
        shards, _ = shard_matrix(g, n)
        np.testing.assert_array_equal(np.vstack(shards), g)


def test_shard_errors():
    with pytest.raises(ValueError):
        shard_matrix(np.ones((3, 3)), 0)
    with pytest.raises(ValueError):
        shard_matrix(np.ones((3, 3)), 4)
    with pytest.raises(ValueError):
        ShardLayout(2, ((0, 2), (3, 4)))


def test_gather_small_and_zero():
    norms, led = gather_column_norms([np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]])])
    assert norms.tolist() == [10.0, 20.0] == column_norms_sq([[1, 2], [3, 4]]).tolist()
    assert led.bytes_proxy_gather == 2 * 2 * 4
    norms, led = gather_column_norms([np.zeros((2, 3)), np.zeros((1, 3))])
    assert not norms.any() and led.bytes_proxy_gather == 2 * 3 * 4


def test_gather_large_matches_unsharded(rng):
    g = rng.standard_normal((4096, 4096)).astype(np.float32)
    shards, layout = shard_matrix(g, 4)
    norms, led = gather_column_norms(shards, layout)
    np.testing.assert_allclose(norms, column_norms_sq(g), rtol=1e-6)
    assert led.bytes_proxy_gather == 4 * 4096 * 4 == 65_536
    assert led.bytes_full_gather == full_matrix_bytes(4096, 4096, 2) == 33_554_432


def test_gather_column_mismatch():
    with pytest.raises(ValueError):
        gather_column_norms([np.ones((1, 2)), np.ones((1, 3))])


def test_reduction_factor_closed_forms():
    assert comm_reduction_factor(ShardLayout.even(4096, 4, 2, 4), 4096, 4096) == 512.0
    assert comm_reduction_factor(ShardLayout.even(64, 1, 4, 4), 64, 64) == 64.0
    table = {(r["dtype_bytes"], r["norm_bytes"]): r for r in reduction_table(4096, 4096, 4)}
    assert table[(2, 4)]["matrix_vs_vector"] == 2048.0
    assert table[(2, 2)]["matrix_vs_vector"] == 4096.0


def test_ledger_is_monotone_and_serializes():
    led = CommLedger()
    led.charge(full_gather=5, grad_offload=3)
    with pytest.raises(ValueError):
        led.charge(proxy_gather=-1)
    other = CommLedger(1, 2, 3, 4)
    led.merge(other)
    d = led.to_dict()
    assert d == {"full_gather_bytes": 6, "proxy_gather_bytes": 2, "grad_offload_bytes": 6, "param_upload_bytes": 4}
    assert CommLedger.from_dict(d) == led


def test_segment_map_single_and_multi_shard():
    sel = ChannelSelection([1, 3], 0.5, num_columns=4)
    smap = build_segment_map(sel, ShardLayout.even(6, 1))
    assert [(e.segment_id, e.offset, e.length) for e in smap.entries] == [(0, 6, 6), (1, 18, 6)]
    smap = build_segment_map(ChannelSelection([3], 0.25, num_columns=4), ShardLayout.even(6, 2))
    assert [(e.shard_id, e.channel) for e in smap.lookup(0)] == [(0, 3), (1, 3)]
    with pytest.raises(ValueError):
        SegmentMap([Segment(0, 0, 0, 1, 0), Segment(0, 0, 1, 1, 0)])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 8), st.floats(0.02, 1.0), st.integers(0, 2**31))
def test_proxy_exactness_and_segment_reassembly(rows, cols, n_shards, ratio, seed):
    n_shards = min(n_shards, rows)
    g = np.random.default_rng(seed).standard_normal((rows, cols)).astype(np.float32)
    shards, layout = shard_matrix(g, n_shards)
    norms, led = gather_column_norms(shards, layout)
    whole = column_norms_sq(g)
    np.testing.assert_allclose(norms, whole, rtol=1e-6)
    assert select_channels(norms, ratio).as_set() == select_channels(whole, ratio).as_set()
    # full-gather volume does not depend on how the rows are split
    assert led.bytes_full_gather == rows * cols * layout.dtype_bytes
    sel = select_channels(whole, ratio)
    smap = build_segment_map(sel, layout)
    for seg_id, ch in enumerate(sel.channel_ids):
        np.testing.assert_array_equal(smap.reassemble(shards, seg_id), g[:, ch])

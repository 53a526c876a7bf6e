import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from congestnet.errors import ConfigError, FormatError
from congestnet.grid import (FeatureLayer, QueryLocation, TrafficRecord, gfl_bytes, load_feature_layer,
                             load_traffic_records, normalize_layer, split_dataset, split_sizes,
                             store_feature_layer, store_traffic_records)


def make_records(cells, t=5, seed=0):
    rng = np.random.default_rng(seed)
    return [TrafficRecord(QueryLocation(h, w), rng.integers(0, 2, t).astype(np.uint8)) for h, w in cells]


# -------------------------------------------------------------------- GFL

def test_gfl_roundtrip_bitwise(tmp_path, rng):
    data = rng.standard_normal((5, 4, 23)).astype(np.float32)
    data[2, 3] = 0
    layer = FeatureLayer("poi", data)
    path = tmp_path / "poi.gfl"
    store_feature_layer(layer, path)
    back = load_feature_layer(path)
    assert back == layer
    assert back.empty_mask[2, 3] and back.empty_mask.sum() == 1
    store_feature_layer(back, tmp_path / "again.gfl")
    assert (tmp_path / "again.gfl").read_bytes() == path.read_bytes()


def test_gfl_layout_is_little_endian(tmp_path):
    layer = FeatureLayer("real_estate", np.array([[[1.5]], [[2.0]]], dtype=np.float32))
    raw = gfl_bytes(layer)
    assert raw[:4] == b"GFL1"
    (hlen,) = struct.unpack("<I", raw[4:8])
    payload = raw[8 + hlen:]
    assert payload == struct.pack("<2f", 1.5, 2.0)


def test_poi_with_22_channels_rejected(tmp_path):
    from congestnet.grid import write_raster
    path = tmp_path / "poi.gfl"
    write_raster(path, np.ones((3, 3, 22)), "poi")
    with pytest.raises(FormatError, match="expected 23"):
        load_feature_layer(path)


def test_gfl_bad_magic_and_truncation(tmp_path):
    layer = FeatureLayer("media_text", np.ones((3, 3, 2), np.float32))
    raw = gfl_bytes(layer)
    bad = tmp_path / "bad.gfl"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="offset 0"):
        load_feature_layer(bad)
    short = tmp_path / "short.gfl"
    short.write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="truncated"):
        load_feature_layer(short)


def test_all_zero_layer_is_all_empty():
    layer = FeatureLayer("media_text", np.zeros((4, 4, 3)))
    assert layer.empty_mask.all()


# ---------------------------------------------------------- normalisation

def test_normalize_min_max_example():
    data = np.zeros((1, 4, 1), np.float32)
    data[0, :3, 0] = [100, 200, 300]
    out = normalize_layer(FeatureLayer("real_estate", data))
    np.testing.assert_allclose(out.data[0, :, 0], [0, 0.5, 1, 0])
    assert out.empty_mask[0, 3]


def test_normalize_unit_range_unchanged():
    data = np.array([[[0.0], [0.25], [1.0]]], np.float32)
    out = normalize_layer(FeatureLayer("real_estate", data))
    # the zero grid counts as empty, so only the non-empty pair is rescaled
    np.testing.assert_allclose(out.data[0, 1:, 0], [0.0, 1.0])
    data = np.array([[[0.5, 0.0], [1.0, 1.0], [0.0, 0.3]]], np.float32)
    out = normalize_layer(FeatureLayer("media_text", data))
    np.testing.assert_allclose(out.data[0, :, 0], [0.5, 1.0, 0.0])


def test_normalize_constant_channel():
    data = np.full((3, 3, 1), 7.0, np.float32)
    data[1, 1] = 0
    out = normalize_layer(FeatureLayer("real_estate", data))
    keep = ~out.empty_mask
    assert np.all(out.data[keep] == 0.5) and out.data[1, 1, 0] == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_normalize_properties(h, w, c, seed):
    rng = np.random.default_rng(seed)
    data = (rng.standard_normal((h, w, c)) * rng.uniform(0.1, 100)).astype(np.float32)
    data[rng.random((h, w)) < 0.3] = 0
    layer = FeatureLayer("media_text", data)
    once = normalize_layer(layer)
    twice = normalize_layer(once)
    assert twice == once
    assert np.all(once.data[once.empty_mask] == 0)
    assert np.array_equal(once.empty_mask, layer.empty_mask)
    assert once.data.min() >= 0 and once.data.max() <= 1


# -------------------------------------------------------------------- GTR

def test_gtr_roundtrip(tmp_path):
    recs = make_records([(1, 1), (3, 7), (48, 48)], t=216)
    path = tmp_path / "t.gtr"
    store_traffic_records(recs, path)
    back = load_traffic_records(path)
    assert back == recs
    store_traffic_records(back, tmp_path / "u.gtr")
    assert (tmp_path / "u.gtr").read_bytes() == path.read_bytes()


def test_gtr_short_record_rejected(tmp_path):
    recs = make_records([(1, 1), (2, 2)], t=216)
    path = tmp_path / "t.gtr"
    store_traffic_records(recs, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-1])  # last record now carries 215 labels
    with pytest.raises(FormatError, match="offset"):
        load_traffic_records(path)


def test_gtr_duplicate_location_rejected(tmp_path):
    recs = make_records([(3, 7), (3, 7)])
    path = tmp_path / "t.gtr"
    store_traffic_records(recs, path)
    with pytest.raises(FormatError, match="duplicate"):
        load_traffic_records(path)


def test_gtr_non_binary_label_rejected(tmp_path):
    recs = make_records([(1, 2)], t=4)
    path = tmp_path / "t.gtr"
    store_traffic_records(recs, path)
    raw = bytearray(path.read_bytes())
    raw[-2] = 2
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="outside"):
        load_traffic_records(path)


def test_record_rejects_non_binary_labels():
    with pytest.raises((ConfigError, FormatError, ValueError)):
        TrafficRecord(QueryLocation(1, 1), np.array([0, 3], np.uint8))


# ------------------------------------------------------------------ split

def test_split_sizes_examples():
    assert split_sizes(24000) == (15360, 3840, 4800)
    assert split_sizes(10) == (6, 2, 2)


def test_split_ten_records_seed0():
    recs = make_records([(1, i) for i in range(1, 11)])
    sp = split_dataset(recs, seed=0)
    assert (len(sp.train), len(sp.validation), len(sp.test)) == (6, 2, 2)
    everything = sp.train + sp.validation + sp.test
    assert sorted(everything) == sorted(r.location for r in recs)


def test_split_deterministic_and_seed_sensitive():
    recs = make_records([(h, w) for h in range(1, 8) for w in range(1, 8)])
    a, b = split_dataset(recs, 3), split_dataset(recs, 3)
    assert a.to_dict() == b.to_dict()
    assert split_dataset(recs, 4).to_dict() != a.to_dict()


def test_split_needs_ten_records():
    with pytest.raises(ConfigError):
        split_dataset(make_records([(1, i) for i in range(1, 10)]))


@settings(max_examples=100, deadline=None)
@given(st.integers(10, 300), st.integers(0, 2**31 - 1), st.sampled_from(["iid", "blocks"]))
def test_split_partition_law(n, seed, mode):
    rng = np.random.default_rng(seed)
    cells = rng.choice(40 * 40, size=n, replace=False)
    recs = make_records([(int(c) // 40 + 1, int(c) % 40 + 1) for c in cells], t=2)
    sp = split_dataset(recs, seed % 1000, mode)
    parts = [set(sp.train), set(sp.validation), set(sp.test)]
    assert sum(len(p) for p in parts) == n
    assert parts[0].isdisjoint(parts[1]) and parts[0].isdisjoint(parts[2]) and parts[1].isdisjoint(parts[2])
    assert set().union(*parts) == {r.location for r in recs}
    if mode == "iid":
        assert (len(sp.train), len(sp.validation), len(sp.test)) == split_sizes(n)


def test_query_location_parse():
    assert QueryLocation.parse("3,7") == QueryLocation(3, 7)
    assert QueryLocation(3, 7).index == (2, 6)

import json
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from voxkit.volume_io import (
    MAGIC,
    ManifestError,
    ManifestRecord,
    Volume,
    VolumeFormatError,
    label_volume,
    load_record,
    nearest_rank_percentile,
    normalize_intensity,
    read_manifest,
    read_volume,
    write_manifest,
    write_volume,
)


def test_f32_round_trip_is_bit_exact(tmp_path, rng):
    v = Volume(rng.standard_normal((8, 8, 8)).astype(np.float32), (0.7, 0.8, 2.5))
    write_volume(tmp_path / "a.mvol", v)
    w = read_volume(tmp_path / "a.mvol")
    assert w.values.tobytes() == v.values.tobytes()
    assert w.spacing == v.spacing and w.kind == "image" and w.dtype_name == "f32"


@given(
    dtype=st.sampled_from([np.float32, np.int16, np.uint8]),
    shape=st.tuples(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)),
    seed=st.integers(0, 2**16),
)
def test_round_trip_every_dtype(tmp_path_factory, dtype, shape, seed):
    rng = np.random.default_rng(seed)
    if np.dtype(dtype).kind == "f":
        values = rng.standard_normal(shape).astype(dtype)
    else:
        info = np.iinfo(dtype)
        values = rng.integers(info.min, info.max, size=shape, endpoint=True).astype(dtype)
    v = Volume(values, (1.0, 2.0, 3.0))
    path = tmp_path_factory.mktemp("rt") / "v.mvol"
    write_volume(path, v)
    w = read_volume(path)
    assert w.values.dtype == values.dtype
    assert np.array_equal(w.values, values)


def test_label_volume_round_trip(tmp_path, rng):
    lab = label_volume(rng.integers(0, 14, size=(6, 5, 4)))
    assert lab.dtype_name == "u8"
    write_volume(tmp_path / "l.mvol", lab)
    back = read_volume(tmp_path / "l.mvol")
    assert back.kind == "label" and np.array_equal(back.values, lab.values)


def test_deterministic_bytes(tmp_path, rng):
    v = Volume(rng.standard_normal((3, 4, 5)).astype(np.float32))
    write_volume(tmp_path / "a.mvol", v)
    write_volume(tmp_path / "b.mvol", v)
    assert (tmp_path / "a.mvol").read_bytes() == (tmp_path / "b.mvol").read_bytes()


def test_single_voxel_payload_is_four_bytes(tmp_path):
    write_volume(tmp_path / "one.mvol", Volume(np.ones((1, 1, 1), np.float32)))
    raw = (tmp_path / "one.mvol").read_bytes()
    (n,) = struct.unpack("<I", raw[8:12])
    assert len(raw) - 12 - n == 4


def test_header_layout(tmp_path):
    write_volume(tmp_path / "v.mvol", Volume(np.zeros((2, 3, 4, 5), np.int16), (1, 1, 2)))
    raw = (tmp_path / "v.mvol").read_bytes()
    assert raw[:8] == MAGIC
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n])
    assert header == {"channels": 2, "dims": [3, 4, 5], "dtype": "i16", "kind": "image",
                      "spacing": [1.0, 1.0, 2.0]}


def _write_raw(path, header, payload, magic=MAGIC):
    head = json.dumps(header).encode()
    path.write_bytes(magic + struct.pack("<I", len(head)) + head + payload)


def test_bad_magic(tmp_path):
    _write_raw(tmp_path / "x.mvol", {}, b"", magic=b"XXXX0001")
    with pytest.raises(VolumeFormatError, match="magic"):
        read_volume(tmp_path / "x.mvol")


def test_truncated_payload(tmp_path):
    header = {"dims": [8, 8, 8], "channels": 1, "dtype": "f32", "spacing": [1, 1, 1], "kind": "image"}
    _write_raw(tmp_path / "t.mvol", header, np.zeros(100, "<f4").tobytes())
    with pytest.raises(VolumeFormatError, match="truncated"):
        read_volume(tmp_path / "t.mvol")


def test_unknown_dtype_and_malformed_header(tmp_path):
    header = {"dims": [1, 1, 1], "channels": 1, "dtype": "f16", "spacing": [1, 1, 1], "kind": "image"}
    _write_raw(tmp_path / "d.mvol", header, b"\0\0")
    with pytest.raises(VolumeFormatError, match="dtype"):
        read_volume(tmp_path / "d.mvol")
    _write_raw(tmp_path / "m.mvol", {"dims": [1, 1, 1]}, b"")
    with pytest.raises(VolumeFormatError, match="malformed"):
        read_volume(tmp_path / "m.mvol")
    (tmp_path / "h.mvol").write_bytes(MAGIC + struct.pack("<I", 999) + b"{}")
    with pytest.raises(VolumeFormatError):
        read_volume(tmp_path / "h.mvol")


def test_volume_invariants():
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2), np.float32), (1.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2), np.float64))
    with pytest.raises(ValueError):
        label_volume(np.array([[[0, 5]]]), num_classes=4)


# ---------------------------------------------------------------- manifests

def test_manifest_order_and_relative_paths(tmp_path):
    (tmp_path / "m.csv").write_text("id,image,label\ns2,img/b.mvol,lab/b.mvol\ns1,img/a.mvol,\ns3,c.mvol,c_l.mvol\n")
    recs = read_manifest(tmp_path / "m.csv")
    assert [r.id for r in recs] == ["s2", "s1", "s3"]
    assert recs[0].image == tmp_path / "img" / "b.mvol"
    assert recs[1].label is None


def test_manifest_without_label_column(tmp_path):
    (tmp_path / "m.csv").write_text("id,image\na,a.mvol\n")
    (rec,) = read_manifest(tmp_path / "m.csv")
    assert rec.label is None


def test_manifest_duplicate_id_names_it(tmp_path):
    (tmp_path / "m.csv").write_text("id,image,label\ncase7,a.mvol,\ncase7,b.mvol,\n")
    with pytest.raises(ManifestError, match="case7"):
        read_manifest(tmp_path / "m.csv")


def test_manifest_missing_column(tmp_path):
    (tmp_path / "m.csv").write_text("id,label\na,b\n")
    with pytest.raises(ManifestError, match="image"):
        read_manifest(tmp_path / "m.csv")


def test_unresolvable_path_reported_at_load(tmp_path):
    (tmp_path / "m.csv").write_text("id,image,label\na,missing.mvol,\n")
    (rec,) = read_manifest(tmp_path / "m.csv")  # lazily fine
    with pytest.raises(FileNotFoundError, match="missing.mvol"):
        load_record(rec)


def test_manifest_write_read_round_trip(tmp_path):
    recs = [ManifestRecord("a", tmp_path / "a.mvol", tmp_path / "a_l.mvol"), ManifestRecord("b", tmp_path / "b.mvol")]
    write_manifest(tmp_path / "m.csv", recs)
    assert (tmp_path / "m.csv").read_bytes() == b"id,image,label\na,a.mvol,a_l.mvol\nb,b.mvol,\n"
    assert read_manifest(tmp_path / "m.csv") == recs


# ---------------------------------------------------------------- normalization

def test_constant_volume_normalizes_to_zero():
    out = normalize_intensity(Volume(np.full((4, 4, 4), 3.0, np.float32)))
    assert np.all(out.values == 0)


@given(seed=st.integers(0, 2**16), scale=st.floats(0.01, 1000), shift=st.floats(-1000, 1000))
def test_zscore_moments(seed, scale, shift):
    x = np.random.default_rng(seed).standard_normal((2, 6, 7, 8)) * scale + shift
    out = normalize_intensity(Volume(x.astype(np.float32))).values.astype(np.float64)
    for c in range(2):
        assert abs(out[c].mean()) < 1e-5
        assert abs(out[c].std() - 1) < 1e-3


def test_zscore_idempotent(rng):
    v = Volume(rng.gamma(2.0, 3.0, (8, 8, 8)).astype(np.float32))
    once = normalize_intensity(v)
    twice = normalize_intensity(once)
    np.testing.assert_allclose(twice.values, once.values, atol=1e-5)


def test_nearest_rank_percentile_oracle():
    s = np.arange(1, 11, dtype=float)  # ranks 1..10
    assert nearest_rank_percentile(s, 1) == 1
    assert nearest_rank_percentile(s, 25) == 3  # ceil(2.5)
    assert nearest_rank_percentile(s, 99) == 10
    assert nearest_rank_percentile(s, 100) == 10


def test_clip_bounds_outlier(rng):
    x = rng.standard_normal((10, 10, 10))
    x[0, 0, 0] = 1e6
    v = Volume(x.astype(np.float32))
    clipped = normalize_intensity(v, clip=(1, 99)).values
    s = np.sort(x.astype(np.float32).astype(np.float64), axis=None)
    lo, hi = nearest_rank_percentile(s, 1), nearest_rank_percentile(s, 99)
    xc = np.clip(x.astype(np.float32).astype(np.float64), lo, hi)
    bound = max(abs(lo - xc.mean()), abs(hi - xc.mean())) / xc.std()
    assert np.abs(clipped).max() <= bound + 1e-5
    # without clipping the outlier dominates the scale
    unclipped = normalize_intensity(v).values
    assert unclipped.max() > 30

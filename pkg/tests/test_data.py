import gzip
import struct

import numpy as np
import pytest

from dismax.data import (Dataset, encode_idx, load_idx, parse_idx, split_dataset, synth_blobs, synth_ood,
                         to_uint8_images, write_idx)
from dismax.errors import ConfigError, DataError, FormatError
from dismax.model import decode_array


def idx_bytes(dims, payload, dtype=0x08):
    return bytes([0, 0, dtype, len(dims)]) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


def test_parse_hand_built_fixture():
    raw = idx_bytes((2, 2, 3), range(12))
    arr = parse_idx(raw, rank=3)
    assert arr.shape == (2, 2, 3)
    assert arr[1, 1, 2] == 11


@pytest.mark.parametrize("raw,msg", [
    (b"\x00\x00", "truncated magic"),
    (b"\x01\x00\x08\x01" + struct.pack(">I", 1) + b"\x00", "two zero bytes"),
    (idx_bytes((1,), [0], dtype=0x0D), "type byte"),
    (b"\x00\x00\x08\x03\x00\x00", "dimension sizes"),
    (idx_bytes((2, 2, 2), range(7)), "truncated data"),
    (idx_bytes((2, 2, 2), range(9)), "oversized data"),
])
def test_parse_errors(raw, msg):
    with pytest.raises(FormatError, match=msg):
        parse_idx(raw)


def test_parse_rank_check():
    with pytest.raises(FormatError, match="rank"):
        parse_idx(idx_bytes((4,), range(4)), rank=3)


def test_load_idx_plain_and_gzip(tmp_path):
    imgs = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    write_idx(tmp_path / "img", imgs)
    (tmp_path / "lbl.gz").write_bytes(gzip.compress(encode_idx(np.array([3, 1], dtype=np.uint8))))
    ds = load_idx(tmp_path / "img", tmp_path / "lbl.gz", name="tiny")
    assert ds.images.shape == (2, 3, 4)
    assert ds.labels.tolist() == [3, 1]
    np.testing.assert_array_equal(to_uint8_images(ds), imgs)
    assert ds.x.max() <= 1.0


def test_label_count_mismatch(tmp_path):
    write_idx(tmp_path / "img", np.zeros((2, 2, 2), np.uint8))
    write_idx(tmp_path / "lbl", np.zeros(3, np.uint8))
    with pytest.raises(FormatError, match="label count"):
        load_idx(tmp_path / "img", tmp_path / "lbl")


def test_truncated_file(tmp_path):
    raw = encode_idx(np.zeros((3, 4, 4), np.uint8))
    (tmp_path / "img").write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="truncated"):
        load_idx(tmp_path / "img")


def test_encode_rejects_other_dtypes():
    with pytest.raises(DataError):
        encode_idx(np.zeros(3, np.int32))


def test_blobs_determinism_and_spread():
    a = synth_blobs(3, 4, 10, 1.0, seed=5)
    b = synth_blobs(3, 4, 10, 1.0, seed=5)
    assert a.x.tobytes() == b.x.tobytes() and a.labels.tolist() == b.labels.tolist()
    tight = synth_blobs(3, 4, 10, 0.0, seed=5)
    centers = decode_array(tight.meta["centers"])
    np.testing.assert_array_equal(tight.x, centers[tight.labels])
    assert np.bincount(a.labels).tolist() == [10, 10, 10]
    with pytest.raises(ConfigError):
        synth_blobs(1, 4, 10, 1.0, 0)


def test_blobs_linearly_separable():
    # nearest-class-mean probe on far-apart centers
    ds = synth_blobs(2, 2, 100, 0.5, seed=0, center_scale=20.0)
    centers = decode_array(ds.meta["centers"])
    assert np.linalg.norm(centers[0] - centers[1]) > 10
    w = centers[1] - centers[0]
    b = -w @ (centers[0] + centers[1]) / 2
    pred = (ds.x @ w + b > 0).astype(int)
    assert np.mean(pred == ds.labels) == 1.0


def test_ood_offset_and_orthogonality():
    ref = synth_blobs(3, 6, 50, 1.0, seed=1)
    same = synth_ood(6, 200, 0.0, seed=2, reference=ref)
    far = synth_ood(6, 200, 50.0, seed=2, reference=ref)
    shift = (far.x - same.x)[0]
    assert np.allclose(far.x - same.x, shift)
    assert np.linalg.norm(shift) == pytest.approx(50.0)
    centers = decode_array(ref.meta["centers"])
    assert np.allclose((centers - centers.mean(0)) @ shift, 0, atol=1e-9)
    assert far.labels is None
    with pytest.raises(ConfigError):
        synth_ood(6, 10, -1.0, 0)


def test_split_is_seeded_and_disjoint():
    ds = synth_blobs(2, 3, 50, 1.0, 0)
    tr, va = split_dataset(ds, 0.1, seed=4)
    tr2, va2 = split_dataset(ds, 0.1, seed=4)
    assert len(va) == 10 and len(tr) == 90
    assert va.x.tobytes() == va2.x.tobytes()
    rows = {r.tobytes() for r in tr.x}
    assert not any(r.tobytes() in rows for r in va.x)
    with pytest.raises(ConfigError):
        split_dataset(ds, 1.0, 0)


def test_dataset_cache_round_trip(tmp_path):
    ds = synth_blobs(2, 3, 5, 1.0, 0)
    ds.save(tmp_path / "d.json")
    back = Dataset.load(tmp_path / "d.json")
    assert back.x.tobytes() == ds.x.tobytes()
    assert back.labels.tolist() == ds.labels.tolist()
    (tmp_path / "bad.json").write_text('{"format_version": 2}')
    with pytest.raises(FormatError):
        Dataset.load(tmp_path / "bad.json")


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.zeros(3))
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 4)), image_shape=(3, 3))
    with pytest.raises(DataError):
        Dataset(np.array([[0.0, np.inf]]))

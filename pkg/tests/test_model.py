import numpy as np
import pytest

from dismax import numerics as nx
from dismax.errors import ConfigError, FormatError, ShapeError
from dismax.head import init_dismax_head, init_softmax_head
from dismax.model import (Checkpoint, FeatureExtractor, decode_array, encode_array, forward_features,
                          init_extractor)
from dismax.numerics import Tensor


def test_zero_weights_give_zero_features():
    ext = init_extractor([5, 4, 3], 0)
    for w in ext.weights:
        w.data = np.zeros_like(w.data)
    out = forward_features(np.random.default_rng(0).standard_normal(5), ext)
    np.testing.assert_array_equal(out.data, np.zeros(3))


def test_identity_single_layer():
    ext = FeatureExtractor([3, 3], [Tensor(np.eye(3))], [Tensor(np.zeros(3))])
    x = np.array([-1.0, 2.0, 0.5])
    np.testing.assert_array_equal(forward_features(x, ext).data, x)


def test_two_layer_matches_hand_rolled():
    ext = init_extractor([4, 6, 3], 0)
    x = np.random.default_rng(11).standard_normal(4)
    w1, w2 = (w.data for w in ext.weights)
    b1, b2 = (b.data for b in ext.biases)
    hidden = [max(0.0, sum(x[i] * w1[i, j] for i in range(4)) + b1[j]) for j in range(6)]
    expected = [sum(hidden[i] * w2[i, j] for i in range(6)) + b2[j] for j in range(3)]
    np.testing.assert_allclose(forward_features(x, ext).data, expected, rtol=1e-13)


def test_init_determinism_and_shapes():
    a, b, c = init_extractor([4, 8, 3], 7), init_extractor([4, 8, 3], 7), init_extractor([4, 8, 3], 8)
    assert [w.shape for w in a.weights] == [(4, 8), (8, 3)]
    for wa, wb, wc in zip(a.weights, b.weights, c.weights):
        assert wa.data.tobytes() == wb.data.tobytes()
        assert not np.array_equal(wa.data, wc.data)


def test_init_validation():
    with pytest.raises(ConfigError):
        init_extractor([4, 1], 0)
    with pytest.raises(ConfigError):
        init_extractor([4], 0)
    with pytest.raises(ShapeError):
        forward_features(np.ones(5), init_extractor([4, 3], 0))


def test_batch_forward_matches_rows():
    ext = init_extractor([4, 6, 3], 1)
    x = np.random.default_rng(2).standard_normal((5, 4))
    batch = forward_features(x, ext).data
    for i in range(5):
        np.testing.assert_allclose(batch[i], forward_features(x[i], ext).data, rtol=1e-13)


def test_array_codec_round_trip():
    for arr in (np.array(1.5), np.arange(6.0).reshape(2, 3), np.zeros((0, 4))):
        back = decode_array(encode_array(arr))
        assert back.shape == arr.shape
        assert back.tobytes() == arr.tobytes()
    with pytest.raises(FormatError):
        decode_array({"shape": [3], "data": encode_array(np.ones(2))["data"]})
    with pytest.raises(FormatError):
        decode_array({"shape": [1]})


@pytest.mark.parametrize("head_init", [init_dismax_head, init_softmax_head])
def test_checkpoint_round_trip(tmp_path, head_init):
    ckpt = Checkpoint(init_extractor([4, 5, 3], 0), head_init(3, 3, 0), None, {"seed": 0})
    path = tmp_path / "ck.json"
    ckpt.save(path)
    back = Checkpoint.load(path)
    assert back.dumps() == ckpt.dumps()
    x = np.random.default_rng(0).standard_normal((2, 4))
    a = ckpt.head.logits(forward_features(x, ckpt.extractor)).data
    b = back.head.logits(forward_features(x, back.extractor)).data
    assert a.tobytes() == b.tobytes()


def test_checkpoint_rejects_bad_files(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{nope")
    with pytest.raises(FormatError):
        Checkpoint.load(p)
    p.write_text('{"format_version": 99}')
    with pytest.raises(FormatError):
        Checkpoint.load(p)
    p.write_text('{"format_version": 1}')
    with pytest.raises(FormatError):
        Checkpoint.load(p)


def test_forward_is_differentiable():
    ext = init_extractor([3, 4, 2], 0)
    x = np.random.default_rng(1).standard_normal((2, 3))
    with nx.Tape() as tape:
        loss = nx.sum(forward_features(x, ext))
    tape.backward(loss)
    assert all(p.grad is not None and p.grad.shape == p.shape for p in ext.parameters())

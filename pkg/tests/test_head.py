import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dismax import numerics as nx
from dismax.errors import ConfigError, DataError, ShapeError
from dismax.head import (DisMaxHead, LogitsPlus, batch_cross_entropy, batch_isometric_distances,
                         batch_logits_plus, cross_entropy_term, dismax_probabilities, head_from_dict,
                         head_to_dict, init_dismax_head, init_softmax_head, isometric_distances,
                         logits_plus)
from dismax.numerics import Tape, Tensor


def make_head(protos, scale=1.0, es=10.0):
    return DisMaxHead(Tensor(np.asarray(protos, float), requires_grad=True),
                      Tensor(scale, requires_grad=True), es)


def L(values):
    return LogitsPlus(Tensor(values), Tensor(np.zeros(len(values))))


def test_distance_examples():
    head = make_head([[2.0, 0.0], [0.0, 5.0], [-1.0, 0.0]], scale=1.0)
    d = isometric_distances([3.0, 0.0], head).data
    assert d[0] == pytest.approx(0.0, abs=1e-12)
    assert d[1] == pytest.approx(math.sqrt(2), rel=1e-12)
    head.distance_scale = Tensor(-2.0)
    assert isometric_distances([3.0, 0.0], head).data[2] == pytest.approx(4.0, rel=1e-12)


@given(arrays(np.float64, 4, elements=st.floats(-10, 10)),
       arrays(np.float64, (3, 4), elements=st.floats(-10, 10)),
       st.floats(-5, 5))
def test_distances_bounded(f, protos, scale):
    head = make_head(protos, scale)
    d = isometric_distances(f, head).data
    assert np.all(d >= 0)
    assert np.all(d <= 2 * abs(scale) + 1e-9)


def test_distance_rank_check():
    with pytest.raises(ShapeError):
        isometric_distances(np.ones(3), make_head(np.ones((2, 4))))


def test_logits_plus_examples():
    np.testing.assert_array_equal(logits_plus([0.0, 0.0, 0.0]).values.data, [0.0, 0.0, 0.0])
    np.testing.assert_allclose(logits_plus([1.0, 3.0]).values.data, [-3.0, -5.0])
    np.testing.assert_allclose(logits_plus([2.0, 2.0, 2.0]).values.data, [-4.0, -4.0, -4.0])
    with pytest.raises(ShapeError):
        logits_plus(np.ones((2, 2)))


def test_probability_examples():
    np.testing.assert_allclose(dismax_probabilities(L([1.0, 1.0, 1.0]), 7.0, 0.3).data, [1 / 3] * 3)
    p = dismax_probabilities(L([-3.0, -5.0]), 1.0, 1.0).data
    np.testing.assert_allclose(p, [1 / (1 + math.exp(-2)), 1 - 1 / (1 + math.exp(-2))], rtol=1e-12)
    assert round(p[0], 4) == 0.8808 and round(p[1], 4) == 0.1192
    with pytest.raises(ConfigError):
        dismax_probabilities(L([0.0, 1.0]), 1.0, 0.0)


def test_cross_entropy_examples():
    assert cross_entropy_term(L([2.0, 2.0]), 1, 10.0).item() == pytest.approx(math.log(2), rel=1e-12)
    ce = cross_entropy_term(L([-3.0, -5.0]), 0, 1.0).item()
    assert ce == pytest.approx(-math.log(1 / (1 + math.exp(-2))), rel=1e-12)
    assert round(ce, 4) == 0.1269
    assert cross_entropy_term(L([0.0, -100.0]), 0, 10.0).item() < 1e-12
    with pytest.raises(DataError):
        cross_entropy_term(L([0.0, 1.0]), 2, 1.0)


def test_cross_entropy_is_log_of_materialized_probability():
    x = Tensor([0.0, 1.0], requires_grad=True)
    with Tape() as tape:
        cross_entropy_term(LogitsPlus(x, x), 0, 1.0)
    kinds = [n.backward.__qualname__.split(".")[0] for n in tape.nodes]
    assert kinds.index("softmax") < kinds.index("log")


@settings(max_examples=50)
@given(arrays(np.float64, 5, elements=st.floats(0, 4)), st.floats(0.5, 20), st.floats(0.01, 10))
def test_logits_plus_shift_cancels_in_probabilities(D, es, T):
    p = dismax_probabilities(logits_plus(D), es, T).data
    q = nx.stable_softmax(-D, es / T).data
    np.testing.assert_allclose(p, q, atol=1e-12)


def test_batch_forms_match_single_example():
    rng = np.random.default_rng(0)
    head = make_head(rng.standard_normal((4, 3)), 1.7)
    feats = rng.standard_normal((5, 3))
    D = batch_isometric_distances(Tensor(feats), head).data
    Lb = batch_logits_plus(Tensor(D)).data
    for i in range(5):
        np.testing.assert_allclose(D[i], isometric_distances(feats[i], head).data, rtol=1e-12)
        np.testing.assert_allclose(Lb[i], logits_plus(D[i]).values.data, rtol=1e-12)
    labels = np.array([0, 3, 1, 1, 2])
    ce = batch_cross_entropy(Tensor(Lb), labels, 10.0).item()
    single = np.mean([cross_entropy_term(logits_plus(D[i]), labels[i], 10.0).item() for i in range(5)])
    assert ce == pytest.approx(single, rel=1e-12)
    with pytest.raises(DataError):
        batch_cross_entropy(Tensor(Lb), np.array([0, 4, 0, 0, 0]), 1.0)


@pytest.mark.parametrize("seed", range(3))
def test_head_gradients(seed):
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((3, 4))
    feats = rng.standard_normal((2, 4))
    labels = np.array([0, 2])

    def loss(p, s):
        head = DisMaxHead(p, s, 10.0)
        return batch_cross_entropy(head.logits(Tensor(feats)), labels, 10.0)

    P, S = Tensor(protos, requires_grad=True), Tensor(0.8, requires_grad=True)
    with Tape() as tape:
        out = loss(P, S)
    tape.backward(out)
    num_p = nx.finite_diff_gradient(lambda p: loss(p, Tensor(0.8)).item(), protos).data
    num_s = nx.finite_diff_gradient(lambda s: loss(Tensor(protos), s).item(), np.array(0.8)).data
    np.testing.assert_allclose(P.grad, num_p, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(S.grad, num_s, rtol=1e-6, atol=1e-8)


def test_head_serialization_round_trip():
    for head in (init_dismax_head(3, 4, 0), init_softmax_head(3, 4, 0)):
        back = head_from_dict(head_to_dict(head))
        assert head_to_dict(back) == head_to_dict(head)


def test_softmax_head_distances_are_negated_logits():
    head = init_softmax_head(3, 4, 0)
    f = Tensor(np.random.default_rng(0).standard_normal((2, 4)))
    np.testing.assert_array_equal(head.distances(f).data, -head.logits(f).data)


def test_head_validation():
    with pytest.raises(ConfigError):
        make_head(np.ones((1, 3)))
    with pytest.raises(ShapeError):
        DisMaxHead(Tensor(np.ones((2, 3))), Tensor([1.0]))
    with pytest.raises(ConfigError):
        make_head(np.ones((2, 3)), es=0.0)
    with pytest.raises(ConfigError):
        init_dismax_head(1, 3, 0)

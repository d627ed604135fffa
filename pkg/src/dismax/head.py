"""DisMax head: isometric distances, logits+, probabilities and the CE term.

A plain linear :class:`SoftmaxHead` lives here too so the baseline can share
the training and evaluation code paths.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DataError, ShapeError
from .model import decode_array, encode_array
from .numerics import Tensor

T_MIN, T_MAX = 0.001, 100.0
DEFAULT_ENTROPIC_SCALE = 10.0


def _check_temperature(T: float) -> None:
    if not T > 0:
        raise ConfigError(f"temperature must be positive, got {T}")


@dataclass
class DisMaxHead:
    prototypes: Tensor
    distance_scale: Tensor
    entropic_scale: float = DEFAULT_ENTROPIC_SCALE
    temperature: float = 1.0

    def __post_init__(self):
        if self.prototypes.ndim != 2 or self.prototypes.shape[0] < 2:
            raise ConfigError(f"prototypes must be N x F with N >= 2, got {self.prototypes.shape}")
        if self.distance_scale.shape != ():
            raise ShapeError("distance_scale must be a scalar tensor")
        if not self.entropic_scale > 0:
            raise ConfigError(f"entropic scale must be positive, got {self.entropic_scale}")
        if not T_MIN <= self.temperature <= T_MAX:
            raise ConfigError(f"temperature {self.temperature} outside [{T_MIN}, {T_MAX}]")

    kind = "dismax"

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.prototypes.shape[1]

    @property
    def train_scale(self) -> float:
        return self.entropic_scale

    def parameters(self) -> list[Tensor]:
        return [self.prototypes, self.distance_scale]

    def distances(self, features: Tensor) -> Tensor:
        return batch_isometric_distances(features, self)

    def logits(self, features: Tensor) -> Tensor:
        return batch_logits_plus(self.distances(features))


@dataclass
class SoftmaxHead:
    """Affine output layer of the usual SoftMax loss."""

    weight: Tensor
    bias: Tensor
    temperature: float = 1.0

    kind = "softmax"

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def train_scale(self) -> float:
        return 1.0

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def logits(self, features: Tensor) -> Tensor:
        return nx.add(nx.matmul(features, self.weight), self.bias)

    def distances(self, features: Tensor) -> Tensor:
        # no prototypes: negated logits stand in so minimum-distance scoring
        # reduces to the max-logit score
        return nx.mul(self.logits(features), -1.0)


def init_dismax_head(num_classes: int, feature_dim: int, seed: int,
                     entropic_scale: float = DEFAULT_ENTROPIC_SCALE) -> DisMaxHead:
    if num_classes < 2:
        raise ConfigError("need at least two classes")
    rng = np.random.default_rng([seed, 1])
    protos = 0.1 * rng.standard_normal((num_classes, feature_dim))
    return DisMaxHead(Tensor(protos, requires_grad=True), Tensor(1.0, requires_grad=True),
                      float(entropic_scale))


def init_softmax_head(num_classes: int, feature_dim: int, seed: int) -> SoftmaxHead:
    if num_classes < 2:
        raise ConfigError("need at least two classes")
    rng = np.random.default_rng([seed, 1])
    w = rng.standard_normal((feature_dim, num_classes)) / np.sqrt(feature_dim)
    return SoftmaxHead(Tensor(w, requires_grad=True), Tensor(np.zeros(num_classes), requires_grad=True))


def head_to_dict(head) -> dict:
    if head.kind == "dismax":
        return {
            "kind": "dismax",
            "prototypes": encode_array(head.prototypes.data),
            "distance_scale": encode_array(head.distance_scale.data),
            "entropic_scale": head.entropic_scale,
            "temperature": head.temperature,
        }
    return {
        "kind": "softmax",
        "weight": encode_array(head.weight.data),
        "bias": encode_array(head.bias.data),
        "temperature": head.temperature,
    }


def head_from_dict(obj: dict):
    if obj["kind"] == "dismax":
        return DisMaxHead(
            Tensor(decode_array(obj["prototypes"]), requires_grad=True),
            Tensor(decode_array(obj["distance_scale"]), requires_grad=True),
            float(obj["entropic_scale"]),
            float(obj["temperature"]),
        )
    if obj["kind"] == "softmax":
        return SoftmaxHead(
            Tensor(decode_array(obj["weight"]), requires_grad=True),
            Tensor(decode_array(obj["bias"]), requires_grad=True),
            float(obj["temperature"]),
        )
    from .errors import FormatError
    raise FormatError(f"unknown head kind {obj['kind']!r}")


# -- single-example operations ------------------------------------------------

@dataclass(frozen=True)
class LogitsPlus:
    values: Tensor
    source_distances: Tensor


def isometric_distances(f, head: DisMaxHead) -> Tensor:
    """``|d_s| * || normalize(f) - normalize(p_j) ||`` for every class j."""
    f = nx.as_tensor(f)
    if f.ndim != 1 or f.shape[0] != head.feature_dim:
        raise ShapeError(f"feature of shape {f.shape} does not match feature_dim={head.feature_dim}")
    fhat = nx.normalize_rows(nx.mul(f, np.ones((1, 1))))
    dist = nx.pairwise_distance(fhat, nx.normalize_rows(head.prototypes))
    return nx.sum(nx.mul(dist, nx.absolute(head.distance_scale)), axis=0)


def _mean_matrix(n: int) -> np.ndarray:
    return np.full((n, n), 1.0 / n)


def logits_plus(D) -> LogitsPlus:
    D = nx.as_tensor(D)
    if D.ndim != 1 or D.shape[0] == 0:
        raise ShapeError(f"logits_plus expects a non-empty rank-1 tensor, got {D.shape}")
    values = nx.mul(nx.add(D, nx.matmul(D, _mean_matrix(D.shape[0]))), -1.0)
    return LogitsPlus(values, D)


def dismax_probabilities(L: LogitsPlus, entropic_scale: float, T: float) -> Tensor:
    _check_temperature(T)
    if not entropic_scale > 0:
        raise ConfigError(f"entropic scale must be positive, got {entropic_scale}")
    return nx.stable_softmax(L.values, entropic_scale / T)


def cross_entropy_term(L: LogitsPlus, k: int, entropic_scale: float) -> Tensor:
    """``-log p_k``; the probability is materialized before the logarithm."""
    n = L.values.shape[0]
    if not 0 <= k < n:
        raise DataError(f"class index {k} outside [0, {n})")
    p = dismax_probabilities(L, entropic_scale, 1.0)
    onehot = np.zeros(n)
    onehot[k] = 1.0
    return nx.mul(nx.sum(nx.mul(nx.log(p), onehot)), -1.0)


# -- batched forms used by training and inference -----------------------------

def batch_isometric_distances(features: Tensor, head: DisMaxHead) -> Tensor:
    if features.ndim != 2 or features.shape[1] != head.feature_dim:
        raise ShapeError(f"features {features.shape} do not match feature_dim={head.feature_dim}")
    dist = nx.pairwise_distance(nx.normalize_rows(features), nx.normalize_rows(head.prototypes))
    return nx.mul(dist, nx.absolute(head.distance_scale))


def batch_logits_plus(D: Tensor) -> Tensor:
    return nx.mul(nx.add(D, nx.matmul(D, _mean_matrix(D.shape[-1]))), -1.0)


def batch_cross_entropy(logits: Tensor, labels: np.ndarray, scale: float) -> Tensor:
    """Mean over rows of ``-log softmax(scale * logits)[label]``, log applied separately."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise DataError(f"labels outside [0, {n})")
    p = nx.softmax(logits, scale)
    onehot = np.eye(n)[labels]
    return nx.mul(nx.sum(nx.mul(nx.log(p), onehot)), -1.0 / labels.size)

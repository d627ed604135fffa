"""MLP feature extractor and checkpoint persistence."""
from __future__ import annotations

import base64
import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import numerics as nx
from .errors import ConfigError, FormatError, ShapeError
from .numerics import Tensor

FORMAT_VERSION = 1


@dataclass
class FeatureExtractor:
    """ReLU MLP; the last layer is linear and yields the feature vector."""

    layer_dims: list[int]
    weights: list[Tensor]
    biases: list[Tensor]

    def __post_init__(self):
        if len(self.layer_dims) < 2:
            raise ConfigError("layer_dims needs at least input and feature dims")
        if self.layer_dims[-1] < 2:
            raise ConfigError("feature_dim must be >= 2")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != expected or b.shape != (expected[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}, expected {expected}")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def feature_dim(self) -> int:
        return self.layer_dims[-1]

    def parameters(self) -> list[Tensor]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params += [w, b]
        return params


def init_extractor(layer_dims, seed: int) -> FeatureExtractor:
    """Zero-mean Gaussian weights with std 1/sqrt(fan_in), zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ConfigError(f"invalid layer dims {layer_dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        weights.append(Tensor(w, requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return FeatureExtractor(dims, weights, biases)


def forward_features(x, extractor: FeatureExtractor) -> Tensor:
    x = nx.as_tensor(x)
    if x.ndim not in (1, 2) or x.shape[-1] != extractor.input_dim:
        raise ShapeError(f"input shape {x.shape} does not end in input_dim={extractor.input_dim}")
    h = x
    last = len(extractor.weights) - 1
    for i, (w, b) in enumerate(zip(extractor.weights, extractor.biases)):
        h = nx.add(nx.matmul(h, w), b)
        if i < last:
            h = nx.relu(h)
    return h


# -- serialization ------------------------------------------------------------

def encode_array(arr: np.ndarray) -> dict:
    arr = np.asarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def decode_array(obj: dict) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in obj["shape"])
        raw = base64.b64decode(obj["data"], validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed array record: {exc}") from exc
    arr = np.frombuffer(raw, dtype="<f8")
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise FormatError(f"array data holds {arr.size} values, shape {shape} needs {int(np.prod(shape))}")
    return arr.reshape(shape).astype(np.float64)


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class Checkpoint:
    """Everything needed to score inputs: extractor, head, temperature, provenance.

    ``head`` is either a :class:`dismax.head.DisMaxHead` or a
    :class:`dismax.head.SoftmaxHead`.
    """

    extractor: FeatureExtractor
    head: Any
    calibration: Any = None
    metadata: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    def to_dict(self) -> dict:
        from .head import head_to_dict

        return {
            "format_version": FORMAT_VERSION,
            "extractor": {
                "layer_dims": list(self.extractor.layer_dims),
                "weights": [encode_array(w.data) for w in self.extractor.weights],
                "biases": [encode_array(b.data) for b in self.extractor.biases],
            },
            "head": head_to_dict(self.head),
            "calibration": None if self.calibration is None else self.calibration.to_dict(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Checkpoint":
        from .calibration import CalibrationResult
        from .head import head_from_dict

        if obj.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint format_version {obj.get('format_version')!r}")
        try:
            ext = obj["extractor"]
            extractor = FeatureExtractor(
                [int(d) for d in ext["layer_dims"]],
                [Tensor(decode_array(w), requires_grad=True) for w in ext["weights"]],
                [Tensor(decode_array(b), requires_grad=True) for b in ext["biases"]],
            )
            head = head_from_dict(obj["head"])
            cal = obj.get("calibration")
            calibration = None if cal is None else CalibrationResult.from_dict(cal)
        except KeyError as exc:
            raise FormatError(f"checkpoint is missing field {exc}") from exc
        return cls(extractor, head, calibration, dict(obj.get("metadata", {})))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def save(self, path) -> None:
        atomic_write_text(path, self.dumps())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            with open(path, encoding="utf-8") as fh:
                obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(obj)

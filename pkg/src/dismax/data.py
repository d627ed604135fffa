"""Datasets: synthetic blobs, IDX image files, and a JSON cache format."""
from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .model import atomic_write_text, decode_array, encode_array

IDX_UBYTE = 0x08
CACHE_VERSION = 1


@dataclass
class Dataset:
    """Examples stored flattened as an (n, d) float64 matrix.

    ``image_shape`` is set for image corpora, e.g. ``(28, 28)``; ``labels``
    is None for unlabeled OOD sets.
    """

    x: np.ndarray
    labels: np.ndarray | None = None
    name: str = ""
    split: str = "train"
    image_shape: tuple[int, ...] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise DataError(f"dataset {self.name!r}: examples must be an (n, d) matrix, got {self.x.shape}")
        if not np.all(np.isfinite(self.x)):
            raise DataError(f"dataset {self.name!r}: non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.x.shape[0],):
                raise DataError(f"dataset {self.name!r}: {self.x.shape[0]} examples but {self.labels.shape} labels")
            if self.labels.size and self.labels.min() < 0:
                raise DataError(f"dataset {self.name!r}: negative label")
        if self.image_shape is not None:
            self.image_shape = tuple(int(s) for s in self.image_shape)
            if int(np.prod(self.image_shape)) != self.x.shape[1]:
                raise DataError(f"dataset {self.name!r}: image shape {self.image_shape} does not match d={self.x.shape[1]}")

    def __len__(self):
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def num_classes(self) -> int:
        return 0 if self.labels is None or not self.labels.size else int(self.labels.max()) + 1

    @property
    def images(self) -> np.ndarray:
        if self.image_shape is None:
            raise DataError(f"dataset {self.name!r} has no image shape")
        return self.x.reshape((len(self), *self.image_shape))

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, x=self.x[idx], labels=None if self.labels is None else self.labels[idx],
                       split=self.split if split is None else split, meta=dict(self.meta))

    def unlabeled(self, name: str | None = None) -> "Dataset":
        return replace(self, labels=None, name=self.name if name is None else name, meta=dict(self.meta))

    # -- cache format ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format_version": CACHE_VERSION,
            "name": self.name,
            "split": self.split,
            "image_shape": None if self.image_shape is None else list(self.image_shape),
            "x": encode_array(self.x),
            "labels": None if self.labels is None else [int(v) for v in self.labels],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Dataset":
        if obj.get("format_version") != CACHE_VERSION:
            raise FormatError(f"unsupported dataset format_version {obj.get('format_version')!r}")
        try:
            return cls(decode_array(obj["x"]), None if obj["labels"] is None else np.array(obj["labels"]),
                       obj.get("name", ""), obj.get("split", "train"), obj.get("image_shape"),
                       dict(obj.get("meta", {})))
        except KeyError as exc:
            raise FormatError(f"dataset file is missing field {exc}") from exc

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Dataset":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc})") from exc


def split_dataset(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded (train, held-out) split; the held-out part has ``round(fraction * n)`` rows."""
    if not 0 < fraction < 1:
        raise ConfigError(f"held-out fraction must lie in (0, 1), got {fraction}")
    n_val = int(round(fraction * len(ds)))
    if n_val < 1 or n_val >= len(ds):
        raise DataError(f"cannot hold out {fraction:.0%} of {len(ds)} examples")
    order = np.random.default_rng([seed, 3]).permutation(len(ds))
    return ds.subset(np.sort(order[n_val:]), "train"), ds.subset(np.sort(order[:n_val]), "val")


# -- synthetic data ---------------------------------------------------------

def synth_blobs(n_classes: int, dim: int, n_per_class: int, spread: float, seed: int,
                center_scale: float = 5.0, name: str = "blobs") -> Dataset:
    """Isotropic Gaussian clusters around seeded uniform centers."""
    if n_classes < 2 or dim < 2:
        raise ConfigError("synth_blobs needs n_classes >= 2 and dim >= 2")
    if n_per_class < 1 or spread < 0:
        raise ConfigError("synth_blobs needs n_per_class >= 1 and spread >= 0")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-center_scale, center_scale, size=(n_classes, dim))
    labels = np.repeat(np.arange(n_classes), n_per_class)
    x = centers[labels] + spread * rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    meta = {"kind": "blobs", "seed": seed, "spread": spread,
            "centers": encode_array(centers)}
    return Dataset(x[order], labels[order], name, "train", None, meta)


def synth_ood(dim: int, n: int, offset: float, seed: int, reference: Dataset | None = None,
              name: str = "ood") -> Dataset:
    """Unlabeled points shifted by ``offset`` along a seeded unit direction.

    With a blob ``reference`` the points are drawn from that dataset's own
    mixture, so ``offset=0`` yields an ID-identical distribution, and the
    direction is made orthogonal to the span of its class centers.
    """
    if n < 1 or dim < 2:
        raise ConfigError("synth_ood needs n >= 1 and dim >= 2")
    if offset < 0:
        raise ConfigError(f"offset must be >= 0, got {offset}")
    rng = np.random.default_rng(seed)
    if reference is not None and "centers" in reference.meta:
        centers = decode_array(reference.meta["centers"])
        if centers.shape[1] != dim:
            raise ConfigError(f"reference dim {centers.shape[1]} != {dim}")
        comp = rng.integers(0, centers.shape[0], size=n)
        x = centers[comp] + reference.meta["spread"] * rng.standard_normal((n, dim))
    else:
        x = rng.standard_normal((n, dim))
    direction = rng.standard_normal(dim)
    if reference is not None and "centers" in reference.meta and centers.shape[0] < dim:
        # leave the ID region: drop components inside the span of the class centers
        basis = np.linalg.qr((centers - centers.mean(axis=0)).T)[0]
        direction -= basis @ (basis.T @ direction)
    direction /= np.linalg.norm(direction)
    return Dataset(x + offset * direction, None, name, "test", None,
                   {"kind": "ood", "seed": seed, "offset": offset})


# -- IDX --------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, source: str = "<idx>", rank: int | None = None) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{source}: truncated magic (need 4 bytes, got {len(raw)})")
    zero1, zero2, dtype, ndim = raw[:4]
    if zero1 or zero2:
        raise FormatError(f"{source}: magic must start with two zero bytes")
    if dtype != IDX_UBYTE:
        raise FormatError(f"{source}: magic type byte 0x{dtype:02x} unsupported (need 0x08 unsigned byte)")
    if rank is not None and ndim != rank:
        raise FormatError(f"{source}: magic rank byte is {ndim}, expected {rank}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{source}: truncated dimension sizes")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    body = len(raw) - header
    if body != expected:
        kind = "truncated" if body < expected else "oversized"
        raise FormatError(f"{source}: {kind} data section ({body} bytes, dimensions {dims} need {expected})")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None, name: str = "") -> Dataset:
    """Read an IDX image file (rank 3) and optional label file (rank 1)."""
    images = parse_idx(_read_bytes(images_path), str(images_path), rank=3)
    labels = None
    if labels_path is not None:
        labels = parse_idx(_read_bytes(labels_path), str(labels_path), rank=1)
        if labels.shape[0] != images.shape[0]:
            raise FormatError(f"{labels_path}: label count {labels.shape[0]} != image count {images.shape[0]}")
    n, h, w = images.shape
    return Dataset(images.reshape(n, h * w) / 255.0, labels, name or str(images_path), "train", (h, w),
                   {"kind": "idx"})


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise DataError("IDX writer only supports unsigned bytes")
    head = bytes([0, 0, IDX_UBYTE, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr).tobytes()


def write_idx(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_idx(arr))


def to_uint8_images(ds: Dataset) -> np.ndarray:
    return np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8)

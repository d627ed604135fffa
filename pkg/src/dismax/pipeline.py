"""Train, calibrate, evaluate and report: the operations behind the CLI."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .calibration import DEFAULT_BINS, calibrate_temperature, ece
from .data import Dataset, load_idx, split_dataset
from .errors import ConfigError, DataError
from .evaluation import DetectionReport, report_from_dump
from .fpr import draw_groups, fpr_batch_loss, make_compound
from .head import batch_cross_entropy, init_dismax_head, init_softmax_head
from .model import Checkpoint, forward_features, init_extractor
from .numerics import Tape, Tensor
from .scoring import ID_SPLIT, SCORE_KINDS, ScoreDump, softmax_rows

logger = logging.getLogger(__name__)

LOSSES = ("softmax-baseline", "dismax", "dismax-fpr")

PRESETS = {
    "desk": {"epochs": 50, "lr_decay_epochs": [25, 40]},
    "paper": {"epochs": 300, "lr_decay_epochs": [150, 200, 250]},
}


@dataclass
class TrainConfig:
    loss: str = "dismax"
    layer_dims: list[int] = field(default_factory=lambda: [784, 256, 128])
    num_classes: int = 10
    epochs: int = 50
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    lr_decay_epochs: list[int] = field(default_factory=lambda: [25, 40])
    lr_decay_factor: float = 10.0
    entropic_scale: float = 10.0
    alpha: float = 1.0
    seed: int = 0
    val_fraction: float = 0.1
    train_data: object = None

    def validate(self) -> None:
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.loss == "dismax-fpr" and self.batch_size % 2:
            raise ConfigError("dismax-fpr splits every batch in halves; batch_size must be even")
        for name in ("lr", "lr_decay_factor", "entropic_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("momentum", "weight_decay", "alpha"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if len(self.layer_dims) < 2 or any(int(d) < 1 for d in self.layer_dims):
            raise ConfigError(f"invalid layer_dims {self.layer_dims}")
        if self.layer_dims[-1] < 2:
            raise ConfigError("feature dimension must be >= 2")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        preset = obj.pop("preset", None)
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
            obj = {**PRESETS[preset], **obj}
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def resolve_dataset(ref, base_dir: str | None = None) -> Dataset:
    """A dataset reference is a cache JSON path or ``{"images": ..., "labels": ...}`` IDX paths."""
    def path(p):
        p = os.path.expanduser(str(p))
        return p if base_dir is None or os.path.isabs(p) else os.path.join(base_dir, p)

    if isinstance(ref, Dataset):
        return ref
    if isinstance(ref, str):
        return Dataset.load(path(ref))
    if isinstance(ref, dict) and "images" in ref:
        labels = ref.get("labels")
        return load_idx(path(ref["images"]), None if labels is None else path(labels), ref.get("name", ""))
    raise ConfigError(f"cannot resolve dataset reference {ref!r}")


def training_split(config: TrainConfig, data: Dataset) -> tuple[Dataset, Dataset | None]:
    if config.val_fraction == 0:
        return data, None
    return split_dataset(data, config.val_fraction, config.seed)


# -- optimizer ---------------------------------------------------------------

class SGD:
    """SGD with (Nesterov) momentum and L2 weight decay on every parameter."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0, nesterov: bool = True):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.buffers: list[np.ndarray | None] = [None] * len(params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                buf = g if self.buffers[i] is None else self.momentum * self.buffers[i] + g
                self.buffers[i] = buf
                g = g + self.momentum * buf if self.nesterov else buf
            p.data = np.asarray(p.data - self.lr * g)


def learning_rate(config: TrainConfig, epoch: int) -> float:
    drops = sum(1 for m in config.lr_decay_epochs if epoch >= m)
    return config.lr / config.lr_decay_factor ** drops


# -- training ----------------------------------------------------------------

def init_model(config: TrainConfig) -> Checkpoint:
    extractor = init_extractor(config.layer_dims, config.seed)
    feat = extractor.feature_dim
    if config.loss == "softmax-baseline":
        head = init_softmax_head(config.num_classes, feat, config.seed)
    else:
        head = init_dismax_head(config.num_classes, feat, config.seed, config.entropic_scale)
    meta = {"seed": config.seed, "epochs": config.epochs, "config_hash": config.config_hash(),
            "config": config.to_dict(), "history": []}
    return Checkpoint(extractor, head, None, meta)


def _check_data(config: TrainConfig, data: Dataset) -> None:
    if data.labels is None:
        raise ConfigError("training data must be labeled")
    if data.dim != config.layer_dims[0]:
        raise ConfigError(f"training data has dim {data.dim}, layer_dims[0] is {config.layer_dims[0]}")
    if data.num_classes > config.num_classes:
        raise ConfigError(f"training labels reach class {data.num_classes - 1}, config has {config.num_classes} classes")
    if config.loss == "dismax-fpr" and (data.image_shape is None or min(data.image_shape[:2]) < 2):
        raise ConfigError("dismax-fpr needs an image dataset with both spatial dims >= 2")


def train(config: TrainConfig, data: Dataset | None = None) -> Checkpoint:
    """Run the seeded training loop and return the final checkpoint.

    ``data`` overrides ``config.train_data``; the held-out calibration split
    is removed before training either way.
    """
    config.validate()
    full = data if data is not None else resolve_dataset(config.train_data)
    _check_data(config, full)
    train_set, _ = training_split(config, full)

    ckpt = init_model(config)
    extractor, head = ckpt.extractor, ckpt.head
    opt = SGD(extractor.parameters() + head.parameters(), config.lr, config.momentum,
              config.weight_decay, config.nesterov)
    rng = np.random.default_rng([config.seed, 2])
    n = len(train_set)
    scale = head.train_scale

    for epoch in range(config.epochs):
        opt.lr = learning_rate(config, epoch)
        order = rng.permutation(n)
        total_loss = 0.0
        hits = seen = batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if config.loss == "dismax-fpr":
                half = len(idx) // 2
                second = idx[half:]
                groups, leftover = draw_groups(len(second), rng)
                ce_idx = np.concatenate([idx[:half], second[leftover]])
                compounds = [make_compound(train_set.images[second[g]], train_set.labels[second[g]],
                                           config.num_classes) for g in groups]
            else:
                ce_idx, compounds = idx, []

            opt.zero_grad()
            with Tape() as tape:
                logits = head.logits(forward_features(train_set.x[ce_idx], extractor))
                loss = batch_cross_entropy(logits, train_set.labels[ce_idx], scale)
                if compounds:
                    loss = nx.add(loss, fpr_batch_loss(compounds, extractor, head, config.alpha))
            tape.backward(loss)
            opt.step()

            total_loss += loss.item()
            batches += 1
            hits += int(np.sum(np.argmax(logits.data, axis=1) == train_set.labels[ce_idx]))
            seen += len(ce_idx)
        record = {"epoch": epoch + 1, "loss": total_loss / max(batches, 1),
                  "acc": hits / max(seen, 1), "lr": opt.lr}
        ckpt.metadata["history"].append(record)
        logger.info("epoch %d/%d loss %.4f acc %.4f lr %g", epoch + 1, config.epochs,
                    record["loss"], record["acc"], record["lr"])
    return ckpt


# -- inference ---------------------------------------------------------------

def infer(ckpt: Checkpoint, x: np.ndarray, batch: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """Logits (logits+ for DisMax, entropic scale removed) and distances."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != ckpt.extractor.input_dim:
        raise DataError(f"inputs of shape {x.shape} do not match input_dim={ckpt.extractor.input_dim}")
    logits, dists = [], []
    for start in range(0, x.shape[0], batch):
        feats = forward_features(x[start:start + batch], ckpt.extractor)
        d = ckpt.head.distances(feats)
        logits.append(ckpt.head.logits(feats).data)
        dists.append(d.data)
    n = ckpt.num_classes
    if not logits:
        return np.zeros((0, n)), np.zeros((0, n))
    return np.concatenate(logits), np.concatenate(dists)


def calibrate(ckpt: Checkpoint, val: Dataset, bins: int = DEFAULT_BINS) -> Checkpoint:
    """Return a copy of ``ckpt`` with a freshly fitted temperature.

    The fit always starts from the uncalibrated logits, so repeating it
    replaces the temperature rather than compounding it.
    """
    if val is None or len(val) == 0:
        raise DataError("calibration needs a non-empty validation split")
    if val.labels is None:
        raise DataError("validation split must be labeled")
    logits, _ = infer(ckpt, val.x)
    result = calibrate_temperature(logits, val.labels, bins)
    out = Checkpoint.from_dict(ckpt.to_dict())
    out.calibration = result
    out.head.temperature = result.T_star
    return out


def validation_split(ckpt: Checkpoint, data: Dataset) -> Dataset:
    """Recreate the held-out split the checkpoint was trained without."""
    config = TrainConfig.from_dict(ckpt.metadata["config"])
    _, val = training_split(config, data)
    if val is None:
        raise DataError("checkpoint was trained without a held-out split; pass --val explicitly")
    return val


def score_dump(ckpt: Checkpoint, id_test: Dataset, ood_sets: dict[str, Dataset]) -> ScoreDump:
    logits, dists = infer(ckpt, id_test.x)
    parts = [ScoreDump.build(ID_SPLIT, logits, dists, id_test.labels)]
    for name, ds in ood_sets.items():
        if name == ID_SPLIT:
            raise ConfigError(f"OOD set may not be named {ID_SPLIT!r}")
        logits, dists = infer(ckpt, ds.x)
        parts.append(ScoreDump.build(name, logits, dists))
    return ScoreDump.concat(parts)


def evaluate(ckpt: Checkpoint, id_test: Dataset, ood_sets: dict[str, Dataset],
             score_kinds=SCORE_KINDS, with_ece: bool = True,
             label: str = "") -> tuple[dict[str, DetectionReport], ScoreDump]:
    if id_test.labels is None:
        raise DataError("ID test set must be labeled")
    if id_test.num_classes > ckpt.num_classes:
        raise ConfigError(f"ID labels reach class {id_test.num_classes - 1}, checkpoint has {ckpt.num_classes} classes")
    for kind in score_kinds:
        if kind not in SCORE_KINDS:
            raise ConfigError(f"unknown score kind {kind!r}")
    if with_ece and ckpt.calibration is None:
        raise ConfigError("checkpoint has no calibrated temperature; run `dismax calibrate` first "
                          "or evaluate with --no-ece")
    dump = score_dump(ckpt, id_test, ood_sets)
    ece_value = None
    if with_ece:
        id_mask = dump.mask(ID_SPLIT)
        logits = dump.logits[id_mask]
        conf = softmax_rows(logits, 1.0 / ckpt.calibration.T_star).max(axis=1)
        ece_value = ece(conf, dump.pred_class[id_mask] == dump.true_class[id_mask], ckpt.calibration.bins)
    reports = {k: report_from_dump(dump, k, label, ece_value) for k in score_kinds}
    return reports, dump


def report(dumps: list[tuple[str, ScoreDump, list[str]]]) -> list[DetectionReport]:
    """One report row per (dump label, score kind)."""
    rows = []
    for label, dump, kinds in dumps:
        for kind in kinds:
            if kind not in SCORE_KINDS:
                raise ConfigError(f"unknown score kind {kind!r}")
            rows.append(report_from_dump(dump, kind, label))
    return rows

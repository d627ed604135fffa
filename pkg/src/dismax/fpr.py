"""Fractional probability regularization.

Four training images are tiled into one 2x2 mosaic whose target assigns a
quarter of the probability mass to each source label. The regularizer is
the KL divergence of the prediction from that target.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import DataError, ShapeError
from .numerics import Tensor


@dataclass(frozen=True)
class CompoundExample:
    image: np.ndarray
    source_labels: tuple[int, int, int, int]
    target: np.ndarray


def compose_mosaic(imgs) -> np.ndarray:
    """Tile quadrants of four H x W x C images (TL, TR, BL, BR).

    Each source keeps its own pixels at their original position. For odd
    sizes the top/left quadrants get ``floor(H/2)`` rows / ``floor(W/2)``
    columns.
    """
    if len(imgs) != 4:
        raise ShapeError(f"compose_mosaic needs exactly four images, got {len(imgs)}")
    arrs = [np.asarray(im) for im in imgs]
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs):
        raise ShapeError(f"mosaic sources differ in shape: {[a.shape for a in arrs]}")
    if len(shape) < 2:
        raise ShapeError(f"mosaic sources need at least two spatial dims, got {shape}")
    h, w = shape[0] // 2, shape[1] // 2
    out = arrs[0].copy()
    out[:h, w:] = arrs[1][:h, w:]
    out[h:, :w] = arrs[2][h:, :w]
    out[h:, w:] = arrs[3][h:, w:]
    return out


def fpr_target(source_labels, num_classes: int) -> np.ndarray:
    labels = [int(y) for y in source_labels]
    if len(labels) != 4:
        raise DataError(f"expected four source labels, got {len(labels)}")
    q = np.zeros(num_classes)
    for y in labels:
        if not 0 <= y < num_classes:
            raise DataError(f"label {y} outside [0, {num_classes})")
        q[y] += 0.25
    return q


def make_compound(imgs, labels, num_classes: int) -> CompoundExample:
    return CompoundExample(compose_mosaic(imgs), tuple(int(y) for y in labels),
                           fpr_target(labels, num_classes))


def _check_distribution(x: np.ndarray, name: str) -> None:
    if np.any(x < 0) or not np.allclose(x.sum(axis=-1), 1.0, rtol=0, atol=1e-9):
        raise DataError(f"{name} is not a probability distribution")


def kl_regularizer(P, Q) -> Tensor:
    """``sum_i Q_i (log Q_i - log P_i)`` over the support of Q.

    ``P`` may be a tensor on the tape; ``Q`` is a constant target. Rows are
    treated as separate distributions and their divergences summed.
    """
    P = nx.as_tensor(P)
    q = np.asarray(Q, dtype=np.float64)
    if P.shape != q.shape:
        raise ShapeError(f"P {P.shape} and Q {q.shape} differ in shape")
    _check_distribution(P.data, "P")
    _check_distribution(q, "Q")
    support = q > 0
    entropy_part = float(np.sum(q[support] * np.log(q[support])))
    cross = nx.sum(nx.mul(nx.log(P), np.where(support, q, 0.0)))
    return nx.add(nx.mul(cross, -1.0), entropy_part)


def fpr_batch_loss(compounds, extractor, head, alpha: float = 1.0) -> Tensor:
    """``alpha`` times the mean KL over a batch of compound examples."""
    from .model import forward_features

    if alpha < 0:
        raise DataError(f"alpha must be >= 0, got {alpha}")
    if not compounds:
        return Tensor(0.0)
    x = np.stack([c.image.reshape(-1) for c in compounds])
    targets = np.stack([c.target for c in compounds])
    probs = nx.softmax(head.logits(forward_features(x, extractor)), head.train_scale)
    return nx.mul(kl_regularizer(probs, targets), alpha / len(compounds))


def draw_groups(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Shuffle ``range(n)`` into groups of four; return (groups, leftovers)."""
    order = rng.permutation(n)
    k = n // 4
    return order[: 4 * k].reshape(k, 4), order[4 * k:]

"""Out-of-distribution scores. Higher always means more in-distribution."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError, ShapeError
from .numerics import Tensor

SCORE_KINDS = ("mps", "mds", "mmles")
BASE_COLUMNS = ("split", "true_class", "pred_class", "score_mps", "score_mds", "score_mmles", "entropy")
ID_SPLIT = "ID"


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _distribution(P) -> np.ndarray:
    p = _as_array(P)
    if p.ndim != 1 or p.size == 0:
        raise ShapeError(f"expected a non-empty rank-1 distribution, got shape {p.shape}")
    if np.any(p < 0):
        raise DataError("distribution has negative entries")
    if abs(p.sum() - 1.0) > 1e-9:
        raise DataError(f"distribution sums to {p.sum()!r}, not 1")
    return p


def entropy(P) -> float:
    p = _distribution(P)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def score_mps(P) -> float:
    return float(np.max(_distribution(P)))


def score_mds(D) -> float:
    d = _as_array(D)
    if d.size == 0:
        raise ShapeError("score_mds of an empty distance vector")
    return float(-np.min(d))


def score_mmles(L, P) -> float:
    values = _as_array(getattr(L, "values", L))
    p = _distribution(_as_array(P))
    if values.shape != p.shape:
        raise ShapeError(f"logits {values.shape} and probabilities {p.shape} differ in length")
    return float(values.max() + values.mean() - entropy(p))


# -- vectorized forms ---------------------------------------------------------

def softmax_rows(logits: np.ndarray, scale: float = 1.0) -> np.ndarray:
    z = scale * np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def entropy_rows(P: np.ndarray) -> np.ndarray:
    logp = np.log(np.where(P > 0, P, 1.0))
    return -np.sum(P * logp, axis=1)


def score_table(logits: np.ndarray, distances: np.ndarray) -> dict[str, np.ndarray]:
    """All scores for a batch; probabilities use T=1 with no entropic scale."""
    P = softmax_rows(logits)
    H = entropy_rows(P)
    return {
        "mps": P.max(axis=1),
        "mds": -distances.min(axis=1),
        "mmles": logits.max(axis=1) + logits.mean(axis=1) - H,
        "entropy": H,
        "probabilities": P,
    }


# -- score dump ---------------------------------------------------------------

@dataclass
class ScoreDump:
    """Per-example scoring record.

    ``true_class`` is -1 for OOD rows; on disk it is left blank.
    """

    split: list[str]
    true_class: np.ndarray
    pred_class: np.ndarray
    scores: dict[str, np.ndarray]
    entropy: np.ndarray
    logits: np.ndarray
    distances: np.ndarray | None = None
    probabilities: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.split)

    @classmethod
    def build(cls, split_name: str, logits, distances, true_class=None) -> "ScoreDump":
        logits = np.asarray(logits, dtype=np.float64)
        distances = np.asarray(distances, dtype=np.float64)
        table = score_table(logits, distances)
        n = logits.shape[0]
        truth = np.full(n, -1, dtype=np.int64) if true_class is None else np.asarray(true_class, dtype=np.int64)
        return cls(
            split=[split_name] * n,
            true_class=truth,
            pred_class=np.argmax(logits, axis=1),
            scores={k: table[k] for k in SCORE_KINDS},
            entropy=table["entropy"],
            logits=logits,
            distances=distances,
            probabilities=table["probabilities"],
        )

    @classmethod
    def concat(cls, parts: list["ScoreDump"]) -> "ScoreDump":
        return cls(
            split=[s for p in parts for s in p.split],
            true_class=np.concatenate([p.true_class for p in parts]),
            pred_class=np.concatenate([p.pred_class for p in parts]),
            scores={k: np.concatenate([p.scores[k] for p in parts]) for k in SCORE_KINDS},
            entropy=np.concatenate([p.entropy for p in parts]),
            logits=np.concatenate([p.logits for p in parts]),
            distances=None if any(p.distances is None for p in parts)
            else np.concatenate([p.distances for p in parts]),
            probabilities=None if any(p.probabilities is None for p in parts)
            else np.concatenate([p.probabilities for p in parts]),
        )

    def mask(self, split_name: str) -> np.ndarray:
        return np.array([s == split_name for s in self.split], dtype=bool)

    def ood_names(self) -> list[str]:
        seen = []
        for s in self.split:
            if s != ID_SPLIT and s not in seen:
                seen.append(s)
        return seen

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        n_classes = self.logits.shape[1]
        writer.writerow(list(BASE_COLUMNS) + [f"logit_{j}" for j in range(n_classes)])
        for i in range(len(self)):
            truth = "" if self.true_class[i] < 0 else str(int(self.true_class[i]))
            row = [self.split[i], truth, str(int(self.pred_class[i]))]
            row += [_fmt(self.scores[k][i]) for k in SCORE_KINDS]
            row.append(_fmt(self.entropy[i]))
            row += [_fmt(v) for v in self.logits[i]]
            writer.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, source: str = "<dump>") -> "ScoreDump":
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{source}: line 1: empty score dump") from None
        if tuple(header[: len(BASE_COLUMNS)]) != BASE_COLUMNS:
            raise FormatError(f"{source}: line 1: unexpected header {header[:len(BASE_COLUMNS)]}")
        logit_cols = header[len(BASE_COLUMNS):]
        if not logit_cols or any(c != f"logit_{j}" for j, c in enumerate(logit_cols)):
            raise FormatError(f"{source}: line 1: logit columns must be logit_0..logit_N-1")
        width = len(header)
        split, truth, pred, vals = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise FormatError(f"{source}: line {lineno}: expected {width} fields, got {len(row)}")
            try:
                split.append(row[0])
                truth.append(int(row[1]) if row[1] != "" else -1)
                pred.append(int(row[2]))
                vals.append([float(v) for v in row[3:]])
            except ValueError as exc:
                raise FormatError(f"{source}: line {lineno}: {exc}") from exc
            if not np.all(np.isfinite(vals[-1])):
                raise FormatError(f"{source}: line {lineno}: non-finite value")
        if not split:
            raise FormatError(f"{source}: line 2: dump has no rows")
        arr = np.array(vals)
        return cls(
            split=split,
            true_class=np.array(truth, dtype=np.int64),
            pred_class=np.array(pred, dtype=np.int64),
            scores={k: arr[:, i] for i, k in enumerate(SCORE_KINDS)},
            entropy=arr[:, 3],
            logits=arr[:, 4:],
        )

    @classmethod
    def read(cls, path) -> "ScoreDump":
        with open(path, encoding="utf-8", newline="") as fh:
            return cls.from_csv(fh.read(), source=str(path))


def _fmt(x: float) -> str:
    return format(float(x), ".17g")

"""Post-training temperature scaling by direct ECE minimization."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DataError

DEFAULT_BINS = 15
DEFAULT_BOUNDS = (0.001, 100.0)
GRID_POINTS = 2000
REFINE_BRACKETS = 10
T_TOL = 1e-4
INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class CalibrationResult:
    T_star: float
    ece_before: float
    ece_after: float
    evaluations: int
    bins: int = DEFAULT_BINS

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "CalibrationResult":
        return cls(float(obj["T_star"]), float(obj["ece_before"]), float(obj["ece_after"]),
                   int(obj["evaluations"]), int(obj.get("bins", DEFAULT_BINS)))

    def summary(self) -> str:
        return (f"T*={self.T_star:.6g} ECE {self.ece_before:.6f} -> {self.ece_after:.6f} "
                f"({self.evaluations} evaluations, {self.bins} bins)")


def ece_rows(confidences, correct, bins: int = DEFAULT_BINS) -> np.ndarray:
    """ECE of every row of a (G, n) confidence matrix against one ``correct`` vector."""
    conf = np.atleast_2d(np.asarray(confidences, dtype=np.float64))
    hit = np.asarray(correct, dtype=np.float64).ravel()
    if conf.size == 0 or conf.ndim != 2 or conf.shape[1] != hit.size:
        raise DataError("ece needs equal-length, non-empty inputs")
    if bins < 1:
        raise ConfigError(f"bins must be >= 1, got {bins}")
    g, n = conf.shape
    idx = np.clip(np.ceil(conf * bins).astype(np.int64) - 1, 0, bins - 1)
    idx += bins * np.arange(g)[:, None]
    conf_sum = np.bincount(idx.ravel(), weights=conf.ravel(), minlength=g * bins).reshape(g, bins)
    hit_sum = np.bincount(idx.ravel(), weights=np.tile(hit, g), minlength=g * bins).reshape(g, bins)
    # n_b/n * |acc_b - conf_b| == |hit_sum_b - conf_sum_b| / n
    return np.abs(hit_sum - conf_sum).sum(axis=1) / n


def ece(confidences, correct, bins: int = DEFAULT_BINS) -> float:
    """Expected calibration error over equal-width bins ``(lo, hi]``.

    The first bin is closed at 0 and a confidence of exactly 1.0 falls in
    the last bin.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    hit = np.asarray(correct)
    if conf.ndim != 1 or conf.shape != hit.shape:
        raise DataError("ece needs equal-length, non-empty inputs")
    return float(ece_rows(conf[None, :], hit, bins)[0])


def confidences_at(logits: np.ndarray, T) -> np.ndarray:
    """Max softmax probability of ``logits / T``; a vector of T gives one row per T."""
    logits = np.asarray(logits, dtype=np.float64)
    gap = logits - logits.max(axis=1, keepdims=True)
    temps = np.atleast_1d(np.asarray(T, dtype=np.float64))
    # the top class contributes exp(0) = 1, so its probability is 1 / sum
    conf = 1.0 / np.exp(gap[None, :, :] / temps[:, None, None]).sum(axis=2)
    return conf[0] if np.ndim(T) == 0 else conf


class _Objective:
    """ECE as a function of T; remembers the first strict minimum it sees."""

    def __init__(self, logits, labels, bins):
        self.logits = logits
        self.correct = np.argmax(logits, axis=1) == labels
        self.bins = bins
        self.calls = 0
        self.best_T = None
        self.best = math.inf

    def batch(self, temps: np.ndarray, block: int = 256) -> np.ndarray:
        values = np.concatenate([ece_rows(confidences_at(self.logits, temps[i:i + block]), self.correct,
                                          self.bins) for i in range(0, len(temps), block)])
        self.calls += len(temps)
        i = int(np.argmin(values))
        if values[i] < self.best:
            self.best, self.best_T = float(values[i]), float(temps[i])
        return values

    def __call__(self, T: float) -> float:
        return float(self.batch(np.array([T]))[0])


def _golden(f, lo: float, hi: float) -> None:
    """Golden-section search on log T over ``[lo, hi]``; results land in ``f``."""
    a, b = math.log(lo), math.log(hi)
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = f(math.exp(c)), f(math.exp(d))
    while math.exp(b) - math.exp(a) > T_TOL:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = f(math.exp(c))
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = f(math.exp(d))


def calibrate_temperature(val_logits, val_labels, bins: int = DEFAULT_BINS,
                          bounds: tuple[float, float] = DEFAULT_BOUNDS) -> CalibrationResult:
    """Find the temperature minimizing ECE of ``max softmax(logits / T)``.

    A log-spaced grid locates promising brackets, golden-section search
    refines the best few. T=1 is always a candidate, so calibration never
    increases ECE.
    """
    lo, hi = float(bounds[0]), float(bounds[1])
    if not 0 < lo < hi:
        raise ConfigError(f"invalid temperature bounds ({lo}, {hi})")
    logits = np.asarray(val_logits, dtype=np.float64)
    labels = np.asarray(val_labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] == 0 or labels.shape != (logits.shape[0],):
        raise DataError("validation logits must be a non-empty (n, N) matrix with n labels")

    f = _Objective(logits, labels, bins)
    before = f(1.0) if lo <= 1.0 <= hi else None

    grid = np.geomspace(lo, hi, GRID_POINTS)
    values = f.batch(grid)
    for i in np.argsort(values, kind="stable")[:REFINE_BRACKETS]:
        left = grid[max(i - 1, 0)]
        right = grid[min(i + 1, GRID_POINTS - 1)]
        _golden(f, float(left), float(right))

    if before is None:
        before = ece(confidences_at(logits, min(max(1.0, lo), hi)), f.correct, bins)
    return CalibrationResult(float(f.best_T), float(before), float(f.best), f.calls, bins)

"""Detection and classification metrics.

In-distribution is the positive class throughout, and higher scores mean
"more in-distribution".
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DataError

METRICS = ("auroc", "aupr", "tnr_at_tpr95")
METRIC_LABELS = {"auroc": "AUROC", "aupr": "AUPR", "tnr_at_tpr95": "TNR@TPR95"}


def _pair(id_scores, ood_scores) -> tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(id_scores, dtype=np.float64).ravel()
    neg = np.asarray(ood_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise DataError("detection metrics need non-empty ID and OOD score lists")
    return pos, neg


def auroc(id_scores, ood_scores) -> float:
    """P(ID score > OOD score) with ties counted one half (Mann-Whitney U)."""
    pos, neg = _pair(id_scores, ood_scores)
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def aupr(id_scores, ood_scores) -> float:
    """Step-interpolated area under precision-recall, ID as positives."""
    pos, neg = _pair(id_scores, ood_scores)
    scores = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    order = np.argsort(-scores, kind="mergesort")
    scores, is_pos = scores[order], is_pos[order]
    # last index of every run of equal scores
    ends = np.r_[np.nonzero(np.diff(scores))[0], scores.size - 1]
    tp = np.cumsum(is_pos)[ends]
    fp = (ends + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / pos.size
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def tnr_at_tpr95(id_scores, ood_scores) -> float:
    """OOD rejection rate at the largest threshold keeping >= 95% of ID."""
    pos, neg = _pair(id_scores, ood_scores)
    k = (95 * pos.size + 99) // 100
    threshold = np.sort(pos)[::-1][k - 1]
    return float(np.mean(neg < threshold))


def roc_points(id_scores, ood_scores) -> np.ndarray:
    """(FPR, TPR) at every distinct threshold, starting from (0, 0)."""
    pos, neg = _pair(id_scores, ood_scores)
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    pts = [(0.0, 0.0)]
    for t in thresholds:
        pts.append((float(np.mean(neg >= t)), float(np.mean(pos >= t))))
    return np.array(pts)


def accuracy(pred, truth) -> float:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DataError(f"prediction/label length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise DataError("accuracy of an empty set")
    return float(np.mean(pred == truth))


def detection_metrics(id_scores, ood_scores) -> dict[str, float]:
    return {
        "auroc": auroc(id_scores, ood_scores),
        "aupr": aupr(id_scores, ood_scores),
        "tnr_at_tpr95": tnr_at_tpr95(id_scores, ood_scores),
    }


@dataclass
class DetectionReport:
    score_kind: str
    ood: dict[str, dict[str, float]]
    acc: float
    ece: float | None = None
    id_count: int = 0
    ood_counts: dict[str, int] = field(default_factory=dict)
    label: str = ""

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "score_kind": self.score_kind,
            "acc": self.acc,
            "ece": self.ece,
            "id_count": self.id_count,
            "ood_counts": dict(self.ood_counts),
            "ood": {name: dict(m) for name, m in self.ood.items()},
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "DetectionReport":
        return cls(obj["score_kind"], {k: dict(v) for k, v in obj["ood"].items()}, obj["acc"],
                   obj.get("ece"), obj.get("id_count", 0), dict(obj.get("ood_counts", {})),
                   obj.get("label", ""))


def report_from_dump(dump, score_kind: str, label: str = "", ece_value: float | None = None) -> DetectionReport:
    from .scoring import ID_SPLIT

    id_mask = dump.mask(ID_SPLIT)
    if not id_mask.any():
        raise DataError("score dump has no in-distribution rows")
    scores = dump.scores[score_kind]
    ood, counts = {}, {}
    for name in dump.ood_names():
        m = dump.mask(name)
        ood[name] = detection_metrics(scores[id_mask], scores[m])
        counts[name] = int(m.sum())
    acc = accuracy(dump.pred_class[id_mask], dump.true_class[id_mask])
    return DetectionReport(score_kind, ood, acc, ece_value, int(id_mask.sum()), counts, label)


def render_table(reports: list[DetectionReport]) -> str:
    """Aligned text table: one row per (label, score), one column per OOD set and metric."""
    if not reports:
        return ""
    ood_names: list[str] = []
    for r in reports:
        for name in r.ood:
            if name not in ood_names:
                ood_names.append(name)
    header = ["method", "score", "ACC", "ECE"]
    header += [f"{name} {METRIC_LABELS[m]}" for name in ood_names for m in METRICS]
    rows = []
    for r in reports:
        row = [r.label or "-", r.score_kind.upper(), f"{100 * r.acc:.2f}",
               "-" if r.ece is None else f"{r.ece:.4f}"]
        for name in ood_names:
            metrics = r.ood.get(name)
            row += ["-" if metrics is None else f"{100 * metrics[m]:.2f}" for m in METRICS]
        rows.append(row)
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(x).rjust(w) for x, w in zip(line, widths)) for line in [header] + rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"

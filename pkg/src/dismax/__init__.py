"""Distance-based classifier with isometric prototypes, mosaic regularization,
and out-of-distribution scoring, on a small numpy autodiff core."""

from .calibration import CalibrationResult, calibrate_temperature, ece
from .data import Dataset, load_idx, split_dataset, synth_blobs, synth_ood
from .errors import ConfigError, DataError, DisMaxError, FormatError, NumericError, ShapeError
from .evaluation import DetectionReport, aupr, auroc, detection_metrics, render_table, tnr_at_tpr95
from .fpr import compose_mosaic, fpr_target, kl_regularizer
from .head import DisMaxHead, SoftmaxHead, isometric_distances, logits_plus
from .model import Checkpoint, FeatureExtractor
from .pipeline import TrainConfig, calibrate, evaluate, report, train
from .scoring import ScoreDump, score_mds, score_mmles, score_mps

__all__ = [
    "CalibrationResult", "Checkpoint", "ConfigError", "DataError", "Dataset", "DetectionReport",
    "DisMaxError", "DisMaxHead", "FeatureExtractor", "FormatError", "NumericError", "ScoreDump",
    "ShapeError", "SoftmaxHead", "TrainConfig", "aupr", "auroc", "calibrate", "calibrate_temperature",
    "compose_mosaic", "detection_metrics", "ece", "evaluate", "fpr_target", "isometric_distances",
    "kl_regularizer", "load_idx", "logits_plus", "render_table", "report", "score_mds",
    "score_mmles", "score_mps", "split_dataset", "synth_blobs", "synth_ood", "tnr_at_tpr95", "train",
]

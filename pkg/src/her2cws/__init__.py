"""Constrained weakly supervised HER2 scoring on abstract patch features."""

from .calibrate import CalibrationOptions, LogitsMatrix, apply_calibration, calibration_objective, optimize_alpha
from .cohort import Patch, Slide, pack, read_cohort, write_cohort
from .estimators import ConstrainedHER2Classifier, LogitCalibrator
from .guidelines import ConstraintMatrices, GuidelineVerdict, broken_constraints, default_constraints, score_fractions
from .model import ClassifierParams, ce_loss, forward, partial_loss, pseudo_label, sgd_step
from .selection import build_epoch_set, compute_fractions, select_lower, select_upper
from .synth import CohortSpec, generate_cohort, split_cohort
from .trainer import TrainConfig, filter_patches, pretrain, train_weak, weak_epoch

__version__ = "0.1.0"

__all__ = [
    "CalibrationOptions",
    "ClassifierParams",
    "CohortSpec",
    "ConstrainedHER2Classifier",
    "ConstraintMatrices",
    "GuidelineVerdict",
    "LogitCalibrator",
    "LogitsMatrix",
    "Patch",
    "Slide",
    "TrainConfig",
    "apply_calibration",
    "broken_constraints",
    "build_epoch_set",
    "calibration_objective",
    "ce_loss",
    "compute_fractions",
    "default_constraints",
    "filter_patches",
    "forward",
    "generate_cohort",
    "optimize_alpha",
    "pack",
    "partial_loss",
    "pretrain",
    "pseudo_label",
    "read_cohort",
    "score_fractions",
    "select_lower",
    "select_upper",
    "sgd_step",
    "split_cohort",
    "train_weak",
    "weak_epoch",
    "write_cohort",
]

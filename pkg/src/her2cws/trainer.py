"""Pretraining on slide labels and the constrained weakly supervised stage."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .cohort import PackedCohort, Slide, pack
from .evaluation import confusion, macro_f1
from .guidelines import N_CLASSES, ConstraintMatrices, default_constraints, principal_score
from .model import ClassifierParams, ce_loss, forward, param_grads, partial_loss, sgd_step
from .selection import SelectionSet, build_epoch_set

logger = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


class EmptySlideError(ValueError):
    pass


STAGE_DEFAULTS = {
    "pretrain": {"epochs": 100, "patience": 20, "learning_rate": 0.01},
    "weak": {"epochs": 50, "patience": 5, "learning_rate": 2.0},
}


@dataclass
class TrainConfig:
    """Hyperparameters for one training stage.

    Weak-stage only: ``steps_per_epoch`` updates are taken on each epoch's
    selected set; ``reduction="sum"`` divides each selected patch's gradient
    by ``batch_size`` (so the step grows with the number of violating
    patches) while ``"mean"`` averages within each selection set.
    Use :meth:`for_stage` to get the stage's defaults.
    """

    stage: str = "pretrain"
    epochs: int = 100
    patience: int = 20
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 512
    steps_per_epoch: int = 1
    reduction: str = "sum"
    lr_schedule: str = "constant"
    reset_momentum_each_epoch: bool = True
    seed: int = 0
    min_tumor_fraction: float = 0.1
    init_scale: float = 0.01

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "TrainConfig":
        return cls(**{**STAGE_DEFAULTS[stage], "stage": stage, **overrides})

    def __post_init__(self):
        if self.stage not in ("pretrain", "weak"):
            raise ValueError(f"stage must be 'pretrain' or 'weak', got {self.stage!r}")
        if self.epochs < 0 or self.patience < 0:
            raise ValueError("epochs and patience must be non-negative")
        if not 0.0 <= self.min_tumor_fraction < 1.0:
            raise ValueError("min_tumor_fraction must be in [0, 1)")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if self.reduction not in ("sum", "mean"):
            raise ValueError("reduction must be 'sum' or 'mean'")
        if self.batch_size < 1 or self.steps_per_epoch < 1:
            raise ValueError("batch_size and steps_per_epoch must be >= 1")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "cosine" and self.epochs > 0:
            return self.learning_rate * 0.5 * (1.0 + np.cos(np.pi * epoch / self.epochs))
        return self.learning_rate

    def to_dict(self) -> dict:
        return asdict(self)


def filter_patches(slides: Sequence[Slide], min_tumor_fraction: float) -> List[Slide]:
    """Keep patches whose tumor fraction exceeds the threshold; weights renormalize."""
    out = []
    for s in slides:
        kept = [p for p in s.patches if p.tumor_fraction > min_tumor_fraction]
        if not kept:
            raise EmptySlideError(f"slide {s.id}: no patch above tumor fraction {min_tumor_fraction}")
        out.append(Slide(id=s.id, label=s.label, patches=kept))
    return out


def _as_packed(slides) -> PackedCohort:
    return slides if isinstance(slides, PackedCohort) else pack(slides)


def slide_fractions(packed: PackedCohort, predictions: np.ndarray) -> np.ndarray:
    """``(n_slides, 4)`` matrix of class fractions from per-patch predictions."""
    out = np.zeros((packed.n_slides, N_CLASSES))
    np.add.at(out, (packed.slide_index, predictions), packed.weights)
    return out


def slide_scores(packed: PackedCohort, predictions: np.ndarray, C: Optional[ConstraintMatrices] = None) -> np.ndarray:
    V = slide_fractions(packed, predictions)
    return np.array([principal_score(v, C) for v in V], dtype=int)


def slide_macro_f1(packed: PackedCohort, predictions, C=None) -> float:
    return macro_f1(confusion(packed.labels, slide_scores(packed, predictions, C)))


def _check_loss(loss: float, where: str) -> None:
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss during {where}; lower the learning rate")


def _step(params, grads, where: str) -> None:
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            sgd_step(params, grads)
    except FloatingPointError as exc:
        raise TrainingDiverged(f"{exc} during {where}; lower the learning rate") from exc


def pretrain(
    slides,
    config: TrainConfig,
    validation=None,
    params: Optional[ClassifierParams] = None,
) -> ClassifierParams:
    """Supervised training with every patch labeled by its slide's label.

    Early stopping watches patch accuracy (against slide labels) on the
    validation slides, or on the training slides when none are given; the
    best-scoring parameters are returned.
    """
    train = _as_packed(slides)
    val = _as_packed(validation) if validation is not None else train
    if params is None:
        params = ClassifierParams.random(train.features.shape[1], config.seed, config.init_scale)
    if config.epochs == 0:
        return params
    params = params.copy()
    params.learning_rate, params.momentum = config.learning_rate, config.momentum
    X, y = train.features, train.patch_labels()
    y_val = val.patch_labels()
    rng = np.random.default_rng(config.seed)
    best, best_acc, stale = params.copy(), -1.0, 0
    for epoch in range(config.epochs):
        perm = rng.permutation(len(y))
        for start in range(0, len(y), config.batch_size):
            idx = perm[start : start + config.batch_size]
            logits, _, _ = forward(params, X[idx])
            loss, g = ce_loss(logits, y[idx])
            _check_loss(loss.mean(), f"pretrain epoch {epoch}")
            _step(params, param_grads(X[idx], g / len(idx)), f"pretrain epoch {epoch}")
        acc = float(np.mean(forward(params, val.features)[2] == y_val))
        logger.debug("pretrain epoch %d val_acc %.4f", epoch, acc)
        if acc > best_acc:
            best, best_acc, stale = params.copy(), acc, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return best


@dataclass
class EpochReport:
    epoch: int
    fractions: List[List[float]]
    violations: List[list]
    n_upper: int
    n_lower: int
    upper_loss: float
    lower_loss: float
    satisfaction_rate: float
    val_macro_f1: Optional[float] = None

    @property
    def n_selected(self) -> int:
        return self.n_upper + self.n_lower

    def to_dict(self) -> dict:
        return asdict(self)


def _weak_gradient(params, X, upper_rows, upper_masks, lower_rows, lower_targets, norm=None):
    """Per-set mean losses and the parameter gradient.

    Each patch's gradient is divided by ``norm``; ``None`` divides by the
    size of its own selection set instead.
    """
    gw = np.zeros_like(params.weights)
    gb = np.zeros_like(params.bias)
    lu = ll = 0.0
    if len(upper_rows):
        logits = forward(params, X[upper_rows])[0]
        loss, g = partial_loss(logits, upper_masks)
        lu = float(loss.mean())
        w, b = param_grads(X[upper_rows], g / (norm or len(upper_rows)))
        gw += w
        gb += b
    if len(lower_rows):
        logits = forward(params, X[lower_rows])[0]
        loss, g = ce_loss(logits, lower_targets)
        ll = float(loss.mean())
        w, b = param_grads(X[lower_rows], g / (norm or len(lower_rows)))
        gw += w
        gb += b
    return lu, ll, (gw, gb)


def _flatten(selections: Sequence[SelectionSet]):
    upper_rows, masks, lower_rows, targets = [], [], [], []
    for sel in selections:
        for c, rows in sorted(sel.upper.items()):
            m = np.ones(N_CLASSES, dtype=bool)
            m[c] = False
            upper_rows.extend(rows)
            masks.extend([m] * len(rows))
        lower_rows.extend(sel.lower)
        targets.extend([sel.label] * len(sel.lower))
    return (
        np.asarray(upper_rows, dtype=int),
        np.asarray(masks, dtype=bool).reshape(-1, N_CLASSES),
        np.asarray(lower_rows, dtype=int),
        np.asarray(targets, dtype=int),
    )


def weak_epoch(
    slides,
    params: ClassifierParams,
    C: Optional[ConstraintMatrices] = None,
    config: Optional[TrainConfig] = None,
    epoch: int = 0,
) -> Tuple[ClassifierParams, EpochReport]:
    """One constrained epoch: inference, constraint check, selection, update.

    Partial-label loss (admissible = all classes but the violated one) is
    applied to upper selections, cross-entropy toward the slide label to
    lower selections. Learning rate and momentum come from ``config``.
    With nothing selected the weights are untouched.
    """
    C = C or default_constraints()
    config = config or TrainConfig.for_stage("weak")
    packed = _as_packed(slides)
    _, probs, pred = forward(params, packed.features)
    selections = build_epoch_set(packed, pred, probs, C)
    upper_rows, masks, lower_rows, targets = _flatten(selections)
    params.learning_rate, params.momentum = config.lr_at(epoch), config.momentum
    if config.reset_momentum_each_epoch:
        # each epoch trains on a freshly selected set
        params.weights_buf[:] = 0.0
        params.bias_buf[:] = 0.0
    norm = config.batch_size if config.reduction == "sum" else None
    lu = ll = 0.0
    for step in range(config.steps_per_epoch if len(upper_rows) + len(lower_rows) else 0):
        lu_s, ll_s, grads = _weak_gradient(
            params, packed.features, upper_rows, masks, lower_rows, targets, norm
        )
        _check_loss(lu_s + ll_s, f"weak epoch {epoch}")
        if step == 0:
            lu, ll = lu_s, ll_s
        _step(params, grads, f"weak epoch {epoch}")
    report = EpochReport(
        epoch=epoch,
        fractions=[s.fractions.tolist() for s in selections],
        violations=[[asdict(v) for v in s.violations] for s in selections],
        n_upper=int(len(upper_rows)),
        n_lower=int(len(lower_rows)),
        upper_loss=lu,
        lower_loss=ll,
        satisfaction_rate=float(np.mean([not s.violations for s in selections])),
    )
    return params, report


def train_weak(
    slides,
    params: ClassifierParams,
    config: TrainConfig,
    C: Optional[ConstraintMatrices] = None,
    validation=None,
    on_epoch: Optional[Callable[[EpochReport], None]] = None,
) -> Tuple[ClassifierParams, List[EpochReport]]:
    """Repeat :func:`weak_epoch` until the epoch budget is spent or the
    training slides stay violation-free for ``patience`` epochs.

    Returns the parameters with the best validation slide macro F1 (the
    starting point included); ties go to the higher share of training
    slides meeting their constraints, then to the earlier epoch.
    """
    C = C or default_constraints()
    train = _as_packed(slides)
    val = _as_packed(validation) if validation is not None else train
    params = params.copy()
    params.weights_buf[:] = 0.0
    params.bias_buf[:] = 0.0

    def key(p):
        val_f1 = slide_macro_f1(val, forward(p, val.features)[2], C)
        sat = float(np.mean(slide_scores(train, forward(p, train.features)[2], C) == train.labels))
        return val_f1, sat

    best, best_key = params.copy(), key(params)
    reports: List[EpochReport] = []
    clean = 0
    for epoch in range(config.epochs):
        params, rep = weak_epoch(train, params, C, config, epoch)
        clean = clean + 1 if rep.satisfaction_rate == 1.0 else 0
        k = key(params)
        rep.val_macro_f1 = k[0]
        reports.append(rep)
        if on_epoch is not None:
            on_epoch(rep)
        if k > best_key:
            best, best_key = params.copy(), k
        if clean >= max(config.patience, 1):
            break
    return best, reports

"""scikit-learn style wrappers around the three-stage pipeline.

Patches are rows of ``X``; ``groups`` names the slide of each row, ``y``
repeats the slide label on every row and ``sample_weight`` carries the raw
tumor fraction of each patch.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .calibrate import IDENTITY, CalibrationOptions, LogitsMatrix, optimize_alpha
from .cohort import Patch, Slide, pack
from .guidelines import N_CLASSES, score_fractions
from .model import forward, softmax
from .synth import split_cohort
from .trainer import TrainConfig, filter_patches, pretrain, train_weak

STAGES = ("pretrain", "weak", "calibrated")


def _check_groups(groups, n):
    if groups is None:
        raise ValueError("groups (slide id per row) is required")
    g = np.asarray(groups).astype(str)
    if g.shape != (n,):
        raise ValueError(f"groups has shape {g.shape}, expected ({n},)")
    return g


def _check_weight(sample_weight, n):
    if sample_weight is None:
        return np.ones(n)
    w = np.asarray(sample_weight, dtype=float)
    if w.shape != (n,) or np.any(~np.isfinite(w)) or np.any(w < 0) or np.any(w > 1):
        raise ValueError("sample_weight must be one tumor fraction in [0, 1] per row")
    return w


def slide_labels(y, groups):
    """One label per slide; rows of a slide must agree."""
    y = np.asarray(y, dtype=int)
    out = {}
    for g, lab in zip(groups, y):
        if out.setdefault(g, int(lab)) != lab:
            raise ValueError(f"slide {g}: rows carry different labels")
    if any(not 0 <= v < N_CLASSES for v in out.values()):
        raise ValueError("labels must be in 0..3")
    return out


def slides_from_arrays(X, y, groups, sample_weight=None):
    """Group patch rows into slides ordered by slide id."""
    X = check_array(X)
    groups = _check_groups(groups, X.shape[0])
    w = _check_weight(sample_weight, X.shape[0])
    labels = slide_labels(y if y is not None else np.zeros(X.shape[0], dtype=int), groups)
    slides = []
    for sid in sorted(labels):
        rows = np.flatnonzero(groups == sid)
        patches = [Patch(id=f"{sid}_{k:05d}", features=X[r], tumor_fraction=float(w[r])) for k, r in enumerate(rows)]
        slides.append(Slide(id=sid, label=labels[sid], patches=patches))
    return slides


class ConstrainedHER2Classifier(ClassifierMixin, BaseEstimator):
    """Linear patch classifier trained from slide labels only.

    ``fit`` runs the tumor-fraction filter, a stratified train/validation
    split, pretraining on slide labels, the constrained weak stage and
    (optionally) per-class logit calibration. ``predict`` returns patch
    classes for the chosen stage.
    """

    def __init__(
        self,
        pretrain_epochs=100,
        pretrain_lr=0.01,
        weak_epochs=50,
        weak_lr=2.0,
        momentum=0.9,
        patience=20,
        weak_patience=5,
        min_tumor_fraction=0.1,
        validation_fraction=0.1,
        calibrate=True,
        random_state=0,
    ):
        self.pretrain_epochs = pretrain_epochs
        self.pretrain_lr = pretrain_lr
        self.weak_epochs = weak_epochs
        self.weak_lr = weak_lr
        self.momentum = momentum
        self.patience = patience
        self.weak_patience = weak_patience
        self.min_tumor_fraction = min_tumor_fraction
        self.validation_fraction = validation_fraction
        self.calibrate = calibrate
        self.random_state = random_state

    def fit(self, X, y, *, groups=None, sample_weight=None):
        slides = filter_patches(slides_from_arrays(X, y, groups, sample_weight), self.min_tumor_fraction)
        self.n_features_in_ = slides[0].n_features
        self.classes_ = np.arange(N_CLASSES)
        seed = int(self.random_state)
        if self.validation_fraction > 0:
            train, val, _ = split_cohort(slides, (1 - self.validation_fraction, self.validation_fraction, 0.0), seed)
        else:
            train, val = slides, slides
        pre_cfg = TrainConfig.for_stage(
            "pretrain", epochs=self.pretrain_epochs, patience=self.patience,
            learning_rate=self.pretrain_lr, momentum=self.momentum, seed=seed,
        )
        weak_cfg = TrainConfig.for_stage(
            "weak", epochs=self.weak_epochs, patience=self.weak_patience,
            learning_rate=self.weak_lr, momentum=self.momentum, seed=seed,
        )
        packed_train, packed_val = pack(train), pack(val)
        self.pretrained_params_ = pretrain(packed_train, pre_cfg, packed_val)
        self.params_, self.history_ = train_weak(packed_train, self.pretrained_params_, weak_cfg, validation=packed_val)
        self.alpha_ = IDENTITY.copy()
        if self.calibrate:
            M = LogitsMatrix.from_packed(packed_train, forward(self.params_, packed_train.features)[0])
            self.calibration_ = optimize_alpha(M, packed_train.labels)
            self.alpha_ = self.calibration_.alpha
        return self

    def decision_function(self, X, stage="calibrated"):
        check_is_fitted(self, "params_")
        if stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        params = self.pretrained_params_ if stage == "pretrain" else self.params_
        logits = forward(params, X)[0]
        return logits * self.alpha_ if stage == "calibrated" else logits

    def predict_proba(self, X, stage="calibrated"):
        return softmax(self.decision_function(X, stage))

    def predict(self, X, stage="calibrated"):
        return np.argmax(self.decision_function(X, stage), axis=1)

    def predict_slides(self, X, groups, sample_weight=None, stage="calibrated"):
        """Guideline verdict per slide id, computed from predicted patch classes."""
        X = check_array(X)
        groups = _check_groups(groups, X.shape[0])
        w = _check_weight(sample_weight, X.shape[0])
        pred = self.predict(X, stage)
        out = {}
        for sid in sorted(set(groups.tolist())):
            m = groups == sid
            if w[m].sum() <= 0:
                raise ValueError(f"slide {sid}: total tumor fraction is zero")
            V = np.bincount(pred[m], weights=w[m] / w[m].sum(), minlength=N_CLASSES)
            out[sid] = score_fractions(V)
        return out


class LogitCalibrator(TransformerMixin, BaseEstimator):
    """Per-class logit scales fitted to the guideline thresholds.

    ``fit`` takes frozen patch logits, the slide label on every row, the
    slide id per row and the raw tumor fraction per row.
    """

    def __init__(self, method="nelder-mead", max_evals=500, restarts=4, positive=False, temperature=1.0):
        self.method = method
        self.max_evals = max_evals
        self.restarts = restarts
        self.positive = positive
        self.temperature = temperature

    def fit(self, logits, y, *, groups=None, sample_weight=None):
        L = check_array(logits)
        if L.shape[1] != N_CLASSES:
            raise ValueError(f"logits must have 4 columns, got {L.shape[1]}")
        groups = _check_groups(groups, L.shape[0])
        w = _check_weight(sample_weight, L.shape[0])
        labels = slide_labels(y, groups)
        ids = sorted(labels)
        index = {sid: i for i, sid in enumerate(ids)}
        slide_index = np.array([index[g] for g in groups])
        totals = np.bincount(slide_index, weights=w, minlength=len(ids))
        if np.any(totals <= 0):
            raise ValueError("every slide needs positive total weight")
        M = LogitsMatrix(L, slide_index, w / totals[slide_index], len(ids))
        opts = CalibrationOptions(
            method=self.method, max_evals=self.max_evals, restarts=self.restarts,
            positive=self.positive, temperature=self.temperature,
        )
        self.result_ = optimize_alpha(M, np.array([labels[s] for s in ids]), options=opts)
        self.alpha_ = self.result_.alpha
        self.n_features_in_ = N_CLASSES
        return self

    def transform(self, logits):
        check_is_fitted(self, "alpha_")
        L = check_array(logits)
        if L.shape[1] != N_CLASSES:
            raise ValueError(f"logits must have 4 columns, got {L.shape[1]}")
        return L * self.alpha_

    def predict(self, logits):
        return np.argmax(self.transform(logits), axis=1)

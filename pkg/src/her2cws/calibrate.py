"""Per-class logit scaling fitted against the guideline thresholds.

The classifier is frozen; only a 4-vector ``alpha`` multiplying the logit
columns is optimized so that slide class fractions land inside the bounds
implied by each slide's label.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.optimize import minimize

from .guidelines import N_CLASSES, ConstraintMatrices, default_constraints
from .model import softmax

logger = logging.getLogger(__name__)

IDENTITY = np.ones(N_CLASSES)


@dataclass
class LogitsMatrix:
    """Frozen patch logits stacked over slides; ``slide_index`` maps rows to slides."""

    rows: np.ndarray
    slide_index: np.ndarray
    weights: np.ndarray
    n_slides: int

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=float)
        self.slide_index = np.asarray(self.slide_index, dtype=int)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.rows.ndim != 2 or self.rows.shape[1] != N_CLASSES:
            raise ValueError(f"logits must be N x 4, got {self.rows.shape}")
        n = self.rows.shape[0]
        if self.slide_index.shape != (n,) or self.weights.shape != (n,):
            raise ValueError("slide_index and weights must have one entry per row")
        totals = np.bincount(self.slide_index, weights=self.weights, minlength=self.n_slides)
        if not np.allclose(totals, 1.0, atol=1e-9):
            raise ValueError("per-slide weights must sum to 1")

    @classmethod
    def from_packed(cls, packed, logits) -> "LogitsMatrix":
        return cls(np.asarray(logits), packed.slide_index, packed.weights, packed.n_slides)


def apply_calibration(M: LogitsMatrix, alpha):
    """Per-patch classes and per-slide fractions under scaled logits."""
    a = np.asarray(alpha, dtype=float)
    if a.shape != (N_CLASSES,):
        raise ValueError(f"alpha must have 4 entries, got {a.shape}")
    pred = np.argmax(M.rows * a, axis=1)
    V = np.zeros((M.n_slides, N_CLASSES))
    np.add.at(V, (M.slide_index, pred), M.weights)
    return pred, V


def hinge_distance(V, labels, C: Optional[ConstraintMatrices] = None) -> np.ndarray:
    """Per-slide sum of the positive parts of the lower and upper gaps."""
    C = C or default_constraints()
    V = np.atleast_2d(np.asarray(V, dtype=float))
    y = np.asarray(labels, dtype=int).reshape(-1)
    idx = np.arange(len(y))
    lower = np.maximum(C.lower[y, y] - V[idx, y], 0.0)
    above = np.arange(N_CLASSES)[None, :] > y[:, None]
    upper = np.where(above, np.maximum(V - C.upper[y], 0.0), 0.0).sum(axis=1)
    return lower + upper


def calibration_objective(M: LogitsMatrix, alpha, labels, C: Optional[ConstraintMatrices] = None) -> float:
    _, V = apply_calibration(M, alpha)
    return float(hinge_distance(V, labels, C).sum())


def soft_fractions(M: LogitsMatrix, alpha, temperature: float = 1.0) -> np.ndarray:
    P = softmax(M.rows * np.asarray(alpha, dtype=float) / temperature)
    V = np.zeros((M.n_slides, N_CLASSES))
    np.add.at(V, M.slide_index, P * M.weights[:, None])
    return V


@dataclass
class CalibrationOptions:
    method: str = "nelder-mead"
    max_evals: int = 500
    xatol: float = 1e-4
    restarts: int = 4
    restart_step: float = 0.5
    initial_step: float = 0.25
    positive: bool = False
    temperature: float = 1.0

    def __post_init__(self):
        if self.method not in ("nelder-mead", "smoothed"):
            raise ValueError(f"unknown calibration method {self.method!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class CalibrationResult:
    alpha: np.ndarray
    objective_before: float
    objective_after: float
    trace: List[tuple] = field(default_factory=list, repr=False)
    fell_back: bool = False

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha.tolist(),
            "objectiveBefore": self.objective_before,
            "objectiveAfter": self.objective_after,
        }


class _BestTracker:
    """Objective wrapper that remembers the best point ever evaluated."""

    def __init__(self, fn, to_alpha):
        self.fn = fn
        self.to_alpha = to_alpha
        self.best_x = None
        self.best_f = np.inf
        self.trace = []

    def __call__(self, x):
        a = self.to_alpha(x)
        f = self.fn(a)
        self.trace.append((a.tolist(), f))
        # strict improvement only: the identity keeps ties
        if f < self.best_f:
            self.best_f, self.best_x = f, a.copy()
        return f


def _starts(opts: CalibrationOptions) -> List[np.ndarray]:
    starts = [IDENTITY.copy()]
    for k in range(opts.restarts):
        s = IDENTITY.copy()
        s[k % N_CLASSES] += opts.restart_step * (1 if k < N_CLASSES else -1)
        starts.append(s)
    return starts


def optimize_alpha(
    M: LogitsMatrix,
    labels,
    C: Optional[ConstraintMatrices] = None,
    options: Optional[CalibrationOptions] = None,
) -> CalibrationResult:
    """Minimize the hinge objective over ``alpha`` starting from the identity.

    The objective is piecewise constant, so the default search is a
    Nelder-Mead simplex with a wide initial simplex and restarts from
    coordinate-perturbed starts. ``method="smoothed"`` first runs BFGS on
    softmax-weighted fractions, then keeps its result only if the hard
    objective improved. The best point seen is returned, so the result is
    never worse than the identity.
    """
    C = C or default_constraints()
    opts = options or CalibrationOptions()
    labels = np.asarray(labels, dtype=int)
    if labels.shape != (M.n_slides,):
        raise ValueError("need one label per slide")

    def hard(a):
        return calibration_objective(M, a, labels, C)

    if opts.positive:
        to_alpha, to_x = np.exp, np.log
    else:
        to_alpha, to_x = (lambda x: np.asarray(x, dtype=float)), (lambda a: np.asarray(a, dtype=float))

    tracker = _BestTracker(hard, to_alpha)
    before = tracker(to_x(IDENTITY))
    if before == 0.0:
        return CalibrationResult(IDENTITY.copy(), 0.0, 0.0, tracker.trace)

    try:
        if opts.method == "smoothed":
            def smooth(x):
                V = soft_fractions(M, to_alpha(x), opts.temperature)
                return float(hinge_distance(V, labels, C).sum())

            res = minimize(smooth, to_x(IDENTITY), method="BFGS", options={"maxiter": opts.max_evals})
            tracker(res.x)
        else:
            for start in _starts(opts):
                x0 = to_x(start)
                simplex = np.vstack([x0, x0 + opts.initial_step * np.eye(N_CLASSES)])
                minimize(
                    tracker,
                    x0,
                    method="Nelder-Mead",
                    options={
                        "initial_simplex": simplex,
                        "xatol": opts.xatol,
                        "fatol": 0.0,
                        "maxfev": opts.max_evals,
                    },
                )
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        warnings.warn(f"alpha optimization failed ({exc}); keeping identity calibration")
        return CalibrationResult(IDENTITY.copy(), before, before, tracker.trace, fell_back=True)

    logger.debug("calibration: J %.4f -> %.4f after %d evals", before, tracker.best_f, len(tracker.trace))
    return CalibrationResult(tracker.best_x, before, tracker.best_f, tracker.trace)

"""Confusion matrices, F1/Dice metrics, rater agreement and fraction KDE tables."""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .guidelines import N_CLASSES

KDE_GRID = np.round(np.arange(101) * 0.01, 2)
MIN_BANDWIDTH = 0.01


def confusion(reference, predicted) -> np.ndarray:
    """4x4 counts, rows = reference, columns = predicted."""
    r = np.asarray(reference, dtype=int).reshape(-1)
    p = np.asarray(predicted, dtype=int).reshape(-1)
    if r.shape != p.shape:
        raise ValueError(f"length mismatch: {r.size} reference vs {p.size} predicted")
    for name, a in (("reference", r), ("predicted", p)):
        if np.any((a < 0) | (a >= N_CLASSES)):
            raise ValueError(f"{name} labels must be in 0..3")
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=int)
    np.add.at(cm, (r, p), 1)
    return cm


def per_class_f1(cm) -> np.ndarray:
    cm = np.asarray(cm)
    tp = np.diag(cm).astype(float)
    denom = cm.sum(axis=0) + cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, 2 * tp / denom, 0.0)


def macro_f1(cm, mode: str = "present") -> float:
    """Unweighted mean of per-class F1.

    ``mode="present"`` skips classes absent from both reference and
    predictions; ``mode="strict"`` scores them 0.
    """
    cm = np.asarray(cm)
    if cm.sum() == 0:
        raise ValueError("macro F1 of an empty confusion matrix")
    f1 = per_class_f1(cm)
    if mode == "strict":
        return float(f1.mean())
    if mode != "present":
        raise ValueError(f"unknown mode {mode!r}")
    present = (cm.sum(axis=0) + cm.sum(axis=1)) > 0
    return float(f1[present].mean())


@dataclass(frozen=True)
class PixelMetrics:
    precision: float
    recall: float
    dice: float
    degenerate: bool


def pixel_metrics(tp: int, fp: int, fn: int) -> PixelMetrics:
    degenerate = tp == 0
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    denom = 2 * tp + fp + fn
    dice = 2 * tp / denom if denom > 0 else 0.0
    return PixelMetrics(precision, recall, dice, degenerate)


def silverman_bandwidth(x) -> float:
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 2:
        return MIN_BANDWIDTH
    sd = x.std(ddof=1)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return max(0.9 * spread * n ** (-0.2), MIN_BANDWIDTH)


def gaussian_kde(samples, grid=KDE_GRID, bandwidth: Optional[float] = None) -> np.ndarray:
    """Gaussian KDE on ``grid``; no boundary correction."""
    x = np.asarray(samples, dtype=float)
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    u = (np.asarray(grid)[:, None] - x[None, :]) / h
    return np.exp(-0.5 * u**2).sum(axis=1) / (x.size * h * np.sqrt(2 * np.pi))


def fraction_kde(fractions, slide_classes, bandwidth: Optional[float] = None) -> List[dict]:
    """Density of per-slide class fractions for each (slide class, patch class) cell.

    ``fractions`` is an ``(n_slides, 4)`` matrix; ``slide_classes`` the slide
    score each row is grouped by. Empty cells yield empty series.
    """
    F = np.asarray(fractions, dtype=float).reshape(-1, N_CLASSES)
    sc = np.asarray(slide_classes, dtype=int)
    table = []
    for s, c in itertools.product(range(N_CLASSES), range(N_CLASSES)):
        vals = F[sc == s, c]
        dens = gaussian_kde(vals, KDE_GRID, bandwidth).tolist() if vals.size else []
        table.append({
            "slideClass": s,
            "patchClass": c,
            "n": int(vals.size),
            "grid": KDE_GRID.tolist() if vals.size else [],
            "density": dens,
        })
    return table


def rater_agreement(label_sets: Mapping[str, Mapping[str, int]]) -> List[dict]:
    """Pairwise confusion and exact agreement over the slide ids shared by all raters."""
    if len(label_sets) < 2:
        raise ValueError("need at least two raters")
    names = list(label_sets)
    shared = set.intersection(*(set(v) for v in label_sets.values()))
    if not shared:
        raise ValueError("raters share no slide ids")
    ids = sorted(shared)
    out = []
    for a, b in itertools.combinations(names, 2):
        ra = [label_sets[a][i] for i in ids]
        rb = [label_sets[b][i] for i in ids]
        cm = confusion(ra, rb)
        agree = np.trace(cm) / cm.sum()
        out.append({
            "raters": [a, b],
            "n": len(ids),
            "agreement": float(agree),
            "discordance": float(1 - agree),
            "confusion": cm.tolist(),
        })
    return out


def write_confusion_csv(cm, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["reference\\predicted"] + [str(c) for c in range(N_CLASSES)])
        for r in range(N_CLASSES):
            w.writerow([r] + [int(x) for x in np.asarray(cm)[r]])


def write_metrics_csv(rows: Sequence[Dict], path) -> None:
    keys = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def write_kde_json(table, path) -> None:
    with open(path, "w") as fh:
        json.dump({"schema_version": 1, "cells": table}, fh)

"""CDF-based patch selection for broken slide-level constraints.

For an over-represented class ``c`` the lowest-confidence ``c`` patches are
selected until their tumor mass covers the excess; for an under-represented
label class ``Y`` the neighbor-class patches most confident in ``Y`` are
selected until they cover the deficit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .guidelines import (
    N_CLASSES,
    THRESH_EPS,
    ConstraintMatrices,
    LowerViolation,
    UpperViolation,
    broken_constraints,
    default_constraints,
)


def compute_fractions(weights, predictions) -> np.ndarray:
    """Class fraction vector: summed normalized weight per predicted class."""
    w = np.asarray(weights, dtype=float)
    pred = np.asarray(predictions, dtype=int)
    if w.shape != pred.shape:
        raise ValueError(f"{w.shape[0]} weights but {pred.shape[0]} predictions")
    return np.bincount(pred, weights=w, minlength=N_CLASSES)[:N_CLASSES]


def _order(keys: np.ndarray, ids: Sequence) -> List[int]:
    # stable: probability first, then patch id
    return sorted(range(len(keys)), key=lambda i: (keys[i], ids[i]))


def _ids(n: int, ids: Optional[Sequence]) -> Sequence:
    if ids is None:
        return list(range(n))
    if len(ids) != n:
        raise ValueError("ids must align with weights")
    return ids


def select_upper(
    weights,
    predictions,
    probs,
    violation: UpperViolation,
    ids: Optional[Sequence] = None,
) -> Tuple[List[int], int]:
    """Row indices pushed away from ``violation.cls`` and the cutoff index.

    Patches predicted as the violated class are sorted by ascending
    probability of that class; the shortest prefix whose weight reaches the
    excess is returned. The cutoff is the last prefix position (-1 if empty).
    """
    w = np.asarray(weights, dtype=float)
    pred = np.asarray(predictions)
    p = np.asarray(probs, dtype=float)
    ids = _ids(len(w), ids)
    c = violation.cls
    pool = np.flatnonzero(pred == c)
    if pool.size == 0:
        return [], -1
    order = [pool[k] for k in _order(p[pool, c], [ids[i] for i in pool])]
    cum = np.cumsum(w[order])
    hit = np.flatnonzero(cum >= violation.excess - THRESH_EPS)
    cut = int(hit[0]) if hit.size else len(order) - 1
    return [int(i) for i in order[: cut + 1]], cut


def neighbor_classes(Y: int) -> List[int]:
    return [k for k in (Y - 1, Y + 1) if 0 <= k < N_CLASSES]


def select_lower(
    weights,
    predictions,
    probs,
    violation: LowerViolation,
    Y: int,
    ids: Optional[Sequence] = None,
) -> Tuple[List[int], int]:
    """Row indices pushed toward ``Y`` and the cutoff index.

    Patches predicted in a neighbor class of ``Y`` are sorted by ascending
    probability of ``Y``; the shortest suffix whose weight reaches the deficit
    is returned. An undersized pool is returned whole.
    """
    if violation.deficit <= 0:
        return [], -1
    w = np.asarray(weights, dtype=float)
    pred = np.asarray(predictions)
    p = np.asarray(probs, dtype=float)
    ids = _ids(len(w), ids)
    pool = np.flatnonzero(np.isin(pred, neighbor_classes(Y)))
    if pool.size == 0:
        return [], -1
    order = [pool[k] for k in _order(p[pool, Y], [ids[i] for i in pool])]
    tail = np.cumsum(w[order][::-1])
    hit = np.flatnonzero(tail >= violation.deficit - THRESH_EPS)
    n_taken = int(hit[0]) + 1 if hit.size else len(order)
    cut = len(order) - n_taken
    return [int(i) for i in order[cut:]], cut


@dataclass
class SelectionSet:
    """Selected patches of one slide.

    ``upper`` maps a violated class to the selected row indices (their
    admissible set is every class except that one); ``lower`` rows get the
    slide label as a hard target.
    """

    slide_id: str
    label: int
    fractions: np.ndarray
    violations: list
    upper: Dict[int, List[int]] = field(default_factory=dict)
    lower: List[int] = field(default_factory=list)
    cutoffs: Dict[str, int] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return sum(len(v) for v in self.upper.values()) + len(self.lower)

    def admissible(self, c: int) -> List[int]:
        return [k for k in range(N_CLASSES) if k != c]


def select_slide(
    slide_id: str,
    label: int,
    weights,
    predictions,
    probs,
    C: ConstraintMatrices,
    ids: Optional[Sequence] = None,
) -> SelectionSet:
    V = compute_fractions(weights, predictions)
    violations = broken_constraints(V, label, C)
    sel = SelectionSet(slide_id, int(label), V, violations)
    for v in violations:
        if isinstance(v, LowerViolation):
            sel.lower, sel.cutoffs["lower"] = select_lower(weights, predictions, probs, v, label, ids)
    taken = set(sel.lower)
    for v in violations:
        if isinstance(v, UpperViolation):
            rows, cut = select_upper(weights, predictions, probs, v, ids)
            # a hard target toward the label beats a partial label
            sel.upper[v.cls] = [r for r in rows if r not in taken]
            sel.cutoffs[f"upper_{v.cls}"] = cut
    flat = sel.lower + [r for rows in sel.upper.values() for r in rows]
    assert len(flat) == len(set(flat)), "patch selected twice"
    return sel


def build_epoch_set(packed, predictions, probs, C: Optional[ConstraintMatrices] = None) -> List[SelectionSet]:
    """Per-slide selection over a packed cohort; row indices are cohort-global."""
    C = C or default_constraints()
    out = []
    for i in range(packed.n_slides):
        rows = packed.rows(i)
        start = rows.start
        sel = select_slide(
            packed.slide_ids[i],
            int(packed.labels[i]),
            packed.weights[rows],
            predictions[rows],
            probs[rows],
            C,
            packed.patch_ids[rows],
        )
        sel.lower = [r + start for r in sel.lower]
        sel.upper = {c: [r + start for r in rs] for c, rs in sel.upper.items()}
        out.append(sel)
    return out


def dump_epoch_set(selections: Sequence[SelectionSet], patch_ids: Sequence[str], fh) -> int:
    """Write one JSONL line per selected patch; returns the line count."""
    n = 0
    for sel in selections:
        for c, rows in sorted(sel.upper.items()):
            for r in rows:
                rec = {"slide": sel.slide_id, "patch": patch_ids[r], "kind": "upper",
                       "class": c, "cutoffIndex": sel.cutoffs[f"upper_{c}"]}
                fh.write(json.dumps(rec) + "\n")
                n += 1
        for r in sel.lower:
            rec = {"slide": sel.slide_id, "patch": patch_ids[r], "kind": "lower",
                   "target": sel.label, "cutoffIndex": sel.cutoffs["lower"]}
            fh.write(json.dumps(rec) + "\n")
            n += 1
    return n

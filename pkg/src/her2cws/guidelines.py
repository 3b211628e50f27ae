"""HER2 guideline rules expressed as surface-fraction constraints.

The four HER2 classes are indexed 0..3 (0, 1+, 2+, 3+). A slide is described
by its class fraction vector ``V``: the share of total tumor surface whose
patches were classified in each class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Union

import numpy as np

N_CLASSES = 4
SUM_TOL = 1e-9
# slack for float round-off when comparing fractions to thresholds
THRESH_EPS = 1e-12


@dataclass(frozen=True)
class ConstraintMatrices:
    """Lower (``L``) and upper (``U``) threshold matrices, indexed ``[label, class]``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        for name in ("lower", "upper"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.shape != (N_CLASSES, N_CLASSES):
                raise ValueError(f"{name} must be 4x4, got {m.shape}")
            if np.any(m < 0) or np.any(m > 1):
                raise ValueError(f"{name} entries must lie in [0, 1]")
            if name == "lower" and np.any(m != np.diag(np.diag(m))):
                raise ValueError("lower must be diagonal")
            if name == "upper" and np.any(np.tril(m) != 0):
                raise ValueError("upper must be strictly upper-triangular")
            m.setflags(write=False)
            object.__setattr__(self, name, m)
        # plain-float copies: the rule functions run per slide in tight loops
        object.__setattr__(self, "_lo", tuple(float(x) for x in np.diag(self.lower)))
        object.__setattr__(self, "_up", tuple(tuple(float(x) for x in r) for r in self.upper))

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}


def default_constraints() -> ConstraintMatrices:
    return _DEFAULT


_DEFAULT = ConstraintMatrices(
    lower=np.diag([0.7, 0.1, 0.1, 0.1]),
    upper=np.triu(np.full((N_CLASSES, N_CLASSES), 0.1), k=1),
)


@dataclass(frozen=True)
class UpperViolation:
    """Class ``c`` (above the label) holds ``excess`` too much tumor surface."""

    cls: int
    excess: float
    kind: str = field(default="upper", init=False)


@dataclass(frozen=True)
class LowerViolation:
    """The label class is short of its minimum surface by ``deficit``."""

    deficit: float
    kind: str = field(default="lower", init=False)


Violation = Union[UpperViolation, LowerViolation]


@dataclass(frozen=True)
class GuidelineVerdict:
    principal: int
    heterogeneous: bool
    recommended: int
    fractions: tuple

    def to_dict(self) -> dict:
        return {
            "principal": self.principal,
            "heterogeneous": self.heterogeneous,
            "recommended": self.recommended,
            "fractions": list(self.fractions),
        }


def check_fractions(V: Sequence[float]) -> np.ndarray:
    """Validate a class fraction vector and return it as a float array.

    Round-off negatives down to ``-SUM_TOL`` are clamped to zero.
    """
    return np.array(_checked(V))


def _checked(V) -> list:
    v = V.reshape(-1).tolist() if isinstance(V, np.ndarray) else list(map(float, V))
    if len(v) != N_CLASSES:
        raise ValueError(f"fraction vector must have 4 entries, got {len(v)}")
    total = v[0] + v[1] + v[2] + v[3]
    if not math.isfinite(total):
        raise ValueError("fraction vector contains non-finite values")
    if abs(total - 1.0) > SUM_TOL:
        raise ValueError(f"fractions must sum to 1, got sum {total!r}")
    low = min(v)
    if low < 0.0:
        # sum near 1 and no entry below -SUM_TOL bounds every entry by 1 + 4 * SUM_TOL
        if low < -SUM_TOL:
            raise ValueError(f"fractions must lie in [0, 1], got {v}")
        v = [max(x, 0.0) for x in v]
    return v


def _check_label(Y) -> int:
    if Y in _LABELS and not isinstance(Y, bool):
        return int(Y)
    raise ValueError(f"HER2 class must be in 0..3, got {Y!r}")


_LABELS = frozenset(range(N_CLASSES))


def principal_score(V: np.ndarray, C: ConstraintMatrices | None = None) -> int:
    """Highest class whose fraction reaches its lower threshold, else 0.

    No validation; callers pass a checked vector.
    """
    lo = (C or _DEFAULT)._lo
    for c in range(N_CLASSES - 1, 0, -1):
        if V[c] >= lo[c] - THRESH_EPS:
            return c
    return 0


def score_fractions(V: Sequence[float], C: ConstraintMatrices | None = None) -> GuidelineVerdict:
    """Slide-level verdict for a class fraction vector.

    The principal score follows the guideline cascade 3 -> 2 -> 1 -> 0.
    A slide is flagged heterogeneous when some class at least two levels
    above the principal score is present below its 10% threshold; the
    recommendation is then one level below the highest such class.
    """
    lo = (C or _DEFAULT)._lo
    v = _checked(V)
    principal = principal_score(v, C)
    recommended = principal
    # scan down from the top so the first hit is h_max
    for h in range(N_CLASSES - 1, principal + 1, -1):
        if 0.0 < v[h] < lo[h] - THRESH_EPS:
            recommended = h - 1
            break
    return GuidelineVerdict(principal, recommended != principal, recommended, tuple(v))


def broken_constraints(
    V: Sequence[float], Y: int, C: ConstraintMatrices | None = None
) -> List[Violation]:
    """List the upper and lower constraint violations of ``V`` for label ``Y``.

    Upper constraints only bind where ``U[Y, c] > 0`` (i.e. ``c > Y``); a
    fraction equal to its upper threshold already counts as a violation.
    """
    C = C or _DEFAULT
    v = _checked(V)
    Y = _check_label(Y)
    out: List[Violation] = []
    up = C._up[Y]
    for c in range(Y + 1, N_CLASSES):
        u = up[c]
        if u > 0 and v[c] >= u - THRESH_EPS:
            out.append(UpperViolation(cls=c, excess=v[c] - u))
    lo = C._lo[Y]
    if v[Y] < lo - THRESH_EPS:
        out.append(LowerViolation(deficit=lo - v[Y]))
    return out

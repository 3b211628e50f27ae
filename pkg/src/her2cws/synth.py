"""Synthetic slide cohorts with known patch classes.

Each slide's class composition is drawn from a per-class Dirichlet profile
and resampled until the realized (tumor-weighted) composition scores to the
declared HER2 class under the guideline rules.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cohort import Patch, Slide
from .guidelines import N_CLASSES, score_fractions

MAX_DRAWS = 10_000

# Dirichlet parameters over patch classes 0..3, one row per declared slide class.
# Lower classes are spread inside higher slides; higher classes stay rare.
DEFAULT_PROFILES = (
    (30.0, 1.0, 0.02, 0.02),
    (6.0, 8.0, 0.2, 0.02),
    (2.0, 3.0, 8.0, 0.1),
    (0.3, 0.5, 2.0, 10.0),
)


class CohortSpecError(ValueError):
    pass


def simplex_means(n_features: int, separation: float, sigma: float = 1.0) -> np.ndarray:
    """Four class means with every pairwise distance equal to ``separation * sigma``."""
    if n_features < N_CLASSES - 1:
        raise CohortSpecError("need at least 3 feature dimensions for 4 equidistant means")
    eye = np.eye(N_CLASSES)
    centered = eye - eye.mean(axis=0)
    # orthonormal basis of the 3-D subspace holding the centered vertices
    basis = np.linalg.svd(centered)[2][: N_CLASSES - 1]
    pts = centered @ basis.T * (separation * sigma / np.sqrt(2.0))
    means = np.zeros((N_CLASSES, n_features))
    means[:, : N_CLASSES - 1] = pts
    return means


def discordance_matrix(rate: float) -> np.ndarray:
    """Rater confusion moving ``rate`` of each class evenly onto adjacent classes."""
    if not 0.0 <= rate <= 1.0:
        raise CohortSpecError("discordance rate must be in [0, 1]")
    m = np.eye(N_CLASSES) * (1.0 - rate)
    for k in range(N_CLASSES):
        nb = [j for j in (k - 1, k + 1) if 0 <= j < N_CLASSES]
        for j in nb:
            m[k, j] = rate / len(nb)
    return m


@dataclass
class CohortSpec:
    slide_counts: Tuple[int, int, int, int] = (50, 50, 50, 50)
    patches_per_slide: Tuple[int, int] = (30, 60)
    n_features: int = 8
    separation: float = 4.0
    feature_sigma: float = 1.0
    class_means: Optional[List[List[float]]] = None
    profiles: Tuple[Tuple[float, ...], ...] = DEFAULT_PROFILES
    tumor_fraction_range: Tuple[float, float] = (0.15, 1.0)
    heterogeneous_rate: float = 0.0
    rater_noise: Optional[List[List[float]]] = None
    corrupt_labels: bool = False
    seed: int = 0

    def __post_init__(self):
        if len(self.slide_counts) != N_CLASSES or any(n < 0 for n in self.slide_counts):
            raise CohortSpecError("slide_counts must be 4 non-negative counts")
        lo, hi = self.patches_per_slide
        if not 1 <= lo <= hi:
            raise CohortSpecError("patches_per_slide must satisfy 1 <= lo <= hi")
        if self.feature_sigma <= 0:
            raise CohortSpecError("feature_sigma must be positive")
        prof = np.asarray(self.profiles, dtype=float)
        if prof.shape != (N_CLASSES, N_CLASSES) or np.any(prof <= 0):
            raise CohortSpecError("profiles must be 4x4 with positive entries")
        tlo, thi = self.tumor_fraction_range
        if not 0 < tlo <= thi <= 1:
            raise CohortSpecError("tumor_fraction_range must lie in (0, 1]")
        if not 0 <= self.heterogeneous_rate <= 1:
            raise CohortSpecError("heterogeneous_rate must be in [0, 1]")
        if self.rater_noise is not None:
            rn = np.asarray(self.rater_noise, dtype=float)
            if rn.shape != (N_CLASSES, N_CLASSES) or np.any(rn < 0) or not np.allclose(rn.sum(axis=1), 1):
                raise CohortSpecError("rater_noise must be a 4x4 row-stochastic matrix")
        if self.class_means is not None:
            if np.asarray(self.class_means).shape != (N_CLASSES, self.n_features):
                raise CohortSpecError("class_means must be 4 x n_features")

    def means(self) -> np.ndarray:
        if self.class_means is not None:
            return np.asarray(self.class_means, dtype=float)
        return simplex_means(self.n_features, self.separation, self.feature_sigma)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (list(map(list, v)) if k == "profiles" else v) for k, v in d.items()}


def _draw_slide(spec: CohortSpec, declared: int, index: int, means: np.ndarray) -> Slide:
    rng = np.random.default_rng([spec.seed, index])
    # only classes 0 and 1 can carry a class two levels higher
    want_het = declared <= 1 and rng.random() < spec.heterogeneous_rate
    alpha = np.asarray(spec.profiles[declared], dtype=float)
    lo, hi = spec.patches_per_slide
    tlo, thi = spec.tumor_fraction_range
    for _ in range(MAX_DRAWS):
        comp = rng.dirichlet(alpha)
        n = int(rng.integers(lo, hi + 1))
        tf = rng.uniform(tlo, thi, size=n)
        classes = rng.choice(N_CLASSES, size=n, p=comp)
        V = np.bincount(classes, weights=tf / tf.sum(), minlength=N_CLASSES)
        verdict = score_fractions(V)
        if verdict.principal == declared and verdict.heterogeneous == want_het:
            break
    else:
        raise CohortSpecError(
            f"slide {index}: no composition scoring to class {declared}"
            f" (heterogeneous={want_het}) within {MAX_DRAWS} draws; check profiles[{declared}]"
        )
    feats = means[classes] + rng.normal(0.0, spec.feature_sigma, size=(n, spec.n_features))
    label = declared
    if spec.corrupt_labels and spec.rater_noise is not None:
        label = int(rng.choice(N_CLASSES, p=np.asarray(spec.rater_noise)[declared]))
    sid = f"s{index:05d}"
    patches = [
        Patch(id=f"{sid}_p{j:03d}", features=feats[j], tumor_fraction=float(tf[j]), true_class=int(classes[j]))
        for j in range(n)
    ]
    return Slide(id=sid, label=label, patches=patches)


def generate_cohort(spec: CohortSpec) -> List[Slide]:
    """Generate slides in class order; slide ``i`` uses its own RNG stream ``(seed, i)``."""
    means = spec.means()
    declared = np.repeat(np.arange(N_CLASSES), spec.slide_counts)
    return [_draw_slide(spec, int(k), i, means) for i, k in enumerate(declared)]


def declared_class(slide: Slide) -> int:
    """Guideline score of a synthetic slide's ground-truth composition."""
    V = np.bincount([p.true_class for p in slide.patches], weights=slide.normalized_weights, minlength=N_CLASSES)
    return score_fractions(V).principal


def simulate_raters(
    slides: Sequence[Slide], noise, n_raters: int, seed: int
) -> Dict[str, Dict[str, int]]:
    """Per-rater slide labels.

    Rater ``reference`` reports each slide's declared class; raters
    ``rater1..n`` draw independently from ``noise[declared]``.
    """
    noise = np.asarray(noise, dtype=float)
    truth = {s.id: declared_class(s) for s in slides}
    out = {"reference": dict(truth)}
    for r in range(1, n_raters + 1):
        rng = np.random.default_rng([seed, 7919, r])
        out[f"rater{r}"] = {sid: int(rng.choice(N_CLASSES, p=noise[k])) for sid, k in truth.items()}
    return out


def expected_discordance(noise, priors, against_reference: bool = True) -> float:
    """Expected disagreement rate of a noisy rater with the reference, or of two noisy raters."""
    noise = np.asarray(noise, dtype=float)
    pi = np.asarray(priors, dtype=float) / np.sum(priors)
    if against_reference:
        return float(1.0 - pi @ np.diag(noise))
    return float(1.0 - pi @ (noise**2).sum(axis=1))


def split_cohort(slides: Sequence[Slide], ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Stratified slide-level split into ``(train, validation, test)``.

    Per-class counts use largest-remainder rounding so they sum exactly.
    """
    ratios = np.asarray(ratios, dtype=float)
    if ratios.shape != (3,) or np.any(ratios < 0) or abs(ratios.sum() - 1) > 1e-9:
        raise ValueError("ratios must be three non-negative numbers summing to 1")
    parts: List[List[Slide]] = [[], [], []]
    rng = np.random.default_rng(seed)
    n_parts = int(np.count_nonzero(ratios))
    for k in range(N_CLASSES):
        members = [s for s in slides if s.label == k]
        if not members:
            continue
        if len(members) < n_parts:
            raise ValueError(f"class {k} has {len(members)} slides, fewer than {n_parts} split parts")
        raw = ratios * len(members)
        counts = np.floor(raw).astype(int)
        for j in np.argsort(-(raw - counts), kind="stable")[: len(members) - counts.sum()]:
            counts[j] += 1
        perm = rng.permutation(len(members))
        start = 0
        for j in range(3):
            parts[j].extend(members[i] for i in sorted(perm[start : start + counts[j]]))
            start += counts[j]
    return tuple(sorted(p, key=lambda s: s.id) for p in parts)

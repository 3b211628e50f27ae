"""Slides, patches and the cohort JSONL format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .guidelines import N_CLASSES

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Patch:
    id: str
    features: np.ndarray
    tumor_fraction: float
    true_class: Optional[int] = None

    def __post_init__(self):
        f = np.asarray(self.features, dtype=float).reshape(-1)
        f.setflags(write=False)
        object.__setattr__(self, "features", f)
        if not 0.0 <= self.tumor_fraction <= 1.0:
            raise ValueError(f"patch {self.id}: tumor_fraction must be in [0, 1]")
        if self.true_class is not None and not 0 <= self.true_class < N_CLASSES:
            raise ValueError(f"patch {self.id}: true_class must be in 0..3")


@dataclass(frozen=True)
class Slide:
    id: str
    label: int
    patches: tuple
    normalized_weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "patches", tuple(self.patches))
        if not 0 <= int(self.label) < N_CLASSES:
            raise ValueError(f"slide {self.id}: label must be in 0..3")
        if not self.patches:
            raise ValueError(f"slide {self.id}: needs at least one patch")
        dims = {p.features.shape[0] for p in self.patches}
        if len(dims) != 1:
            raise ValueError(f"slide {self.id}: patches disagree on feature dimension")
        raw = np.array([p.tumor_fraction for p in self.patches], dtype=float)
        total = raw.sum()
        if total <= 0:
            raise ValueError(f"slide {self.id}: total tumor fraction is zero")
        w = raw / total
        w.setflags(write=False)
        object.__setattr__(self, "normalized_weights", w)

    @property
    def n_features(self) -> int:
        return self.patches[0].features.shape[0]

    def features(self) -> np.ndarray:
        return np.stack([p.features for p in self.patches])

    def to_dict(self) -> dict:
        patches = []
        for p in self.patches:
            d = {"id": p.id, "features": p.features.tolist(), "tumor_fraction": p.tumor_fraction}
            if p.true_class is not None:
                d["true_class"] = p.true_class
            patches.append(d)
        return {"schema_version": SCHEMA_VERSION, "id": self.id, "label": int(self.label), "patches": patches}

    @classmethod
    def from_dict(cls, d: dict) -> "Slide":
        patches = [
            Patch(
                id=str(p["id"]),
                features=p["features"],
                tumor_fraction=float(p["tumor_fraction"]),
                true_class=None if p.get("true_class") is None else int(p["true_class"]),
            )
            for p in d["patches"]
        ]
        return cls(id=str(d["id"]), label=int(d["label"]), patches=patches)


def write_cohort(slides: Iterable[Slide], path) -> None:
    with open(path, "w") as fh:
        for s in slides:
            fh.write(json.dumps(s.to_dict(), separators=(",", ":")) + "\n")


def read_cohort(path) -> List[Slide]:
    slides = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                slides.append(Slide.from_dict(json.loads(line)))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"{Path(path).name}:{lineno}: malformed slide record ({exc})") from exc
    return slides


def write_labels(pairs: Iterable[tuple], path) -> None:
    """Rater label file: one ``{"id", "label"}`` object per line."""
    with open(path, "w") as fh:
        for sid, label in pairs:
            fh.write(json.dumps({"schema_version": SCHEMA_VERSION, "id": sid, "label": int(label)}) + "\n")


def read_labels(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out[str(d["id"])] = int(d["label"])
    return out


@dataclass
class PackedCohort:
    """All patches of a cohort stacked into flat arrays.

    ``offsets[i]:offsets[i+1]`` is the row range of slide ``i``.
    """

    slide_ids: List[str]
    labels: np.ndarray
    patch_ids: List[str]
    features: np.ndarray
    weights: np.ndarray
    offsets: np.ndarray
    true_classes: Optional[np.ndarray] = None

    @property
    def n_slides(self) -> int:
        return len(self.slide_ids)

    @property
    def slide_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_slides), np.diff(self.offsets))

    def rows(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def patch_labels(self) -> np.ndarray:
        """Each patch tagged with its slide's label."""
        return np.repeat(self.labels, np.diff(self.offsets))

    def subset(self, slide_positions: Sequence[int]) -> "PackedCohort":
        rows = np.concatenate([np.arange(self.offsets[i], self.offsets[i + 1]) for i in slide_positions])
        sizes = np.array([self.offsets[i + 1] - self.offsets[i] for i in slide_positions])
        return PackedCohort(
            slide_ids=[self.slide_ids[i] for i in slide_positions],
            labels=self.labels[list(slide_positions)],
            patch_ids=[self.patch_ids[r] for r in rows],
            features=self.features[rows],
            weights=self.weights[rows],
            offsets=np.concatenate([[0], np.cumsum(sizes)]),
            true_classes=None if self.true_classes is None else self.true_classes[rows],
        )


def pack(slides: Sequence[Slide], with_truth: bool = False) -> PackedCohort:
    """Stack slides into a :class:`PackedCohort`.

    Ground-truth patch classes are only copied when ``with_truth`` is set,
    so training code never sees them unless asked for evaluation.
    """
    if not slides:
        raise ValueError("cohort is empty")
    sizes = np.array([len(s.patches) for s in slides])
    truth = None
    if with_truth:
        tc = [p.true_class for s in slides for p in s.patches]
        if any(t is None for t in tc):
            raise ValueError("some patches carry no true_class")
        truth = np.array(tc, dtype=int)
    return PackedCohort(
        slide_ids=[s.id for s in slides],
        labels=np.array([s.label for s in slides], dtype=int),
        patch_ids=[p.id for s in slides for p in s.patches],
        features=np.concatenate([s.features() for s in slides]),
        weights=np.concatenate([s.normalized_weights for s in slides]),
        offsets=np.concatenate([[0], np.cumsum(sizes)]),
        true_classes=truth,
    )

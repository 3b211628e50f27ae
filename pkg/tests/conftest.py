import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from her2cws.calibrate import LogitsMatrix
from her2cws.cohort import Patch, Slide
from her2cws.synth import CohortSpec, generate_cohort


@pytest.fixture(scope="session")
def small_cohort():
    spec = CohortSpec(slide_counts=(10, 10, 10, 10), patches_per_slide=(20, 30), seed=3)
    return generate_cohort(spec)


def onehot_slide(sid, label, classes, fractions, scale=1.0):
    """Slide whose patch features are one-hot codes of ``classes``."""
    patches = [
        Patch(id=f"{sid}_p{j:03d}", features=np.eye(4)[c] * scale, tumor_fraction=f, true_class=c)
        for j, (c, f) in enumerate(zip(classes, fractions))
    ]
    return Slide(id=sid, label=label, patches=patches)


def matrix_from_slides(rows_per_slide, weights_per_slide):
    rows = np.concatenate(rows_per_slide)
    idx = np.concatenate([[i] * len(r) for i, r in enumerate(rows_per_slide)])
    w = np.concatenate([np.asarray(w) / np.sum(w) for w in weights_per_slide])
    return LogitsMatrix(rows, idx, w, len(rows_per_slide))


def overcall_fixture():
    """Label-1 slides whose class-1 patches are scored slightly higher as class 2."""
    slides, weights, labels = [], [], []
    for _ in range(6):
        slides.append(np.array([[3.0, 1.0, 0.0, -1.0]] * 7 + [[0.0, 1.0, 1.2, -1.0]] * 3))
        weights.append(np.ones(10))
        labels.append(1)
    for _ in range(4):
        slides.append(np.array([[3.0, 1.0, 0.0, -1.0]] * 6 + [[0.0, 0.5, 2.0, -1.0]] * 4))
        weights.append(np.ones(10))
        labels.append(2)
    return matrix_from_slides(slides, weights), np.array(labels)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)

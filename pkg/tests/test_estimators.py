import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from her2cws.estimators import ConstrainedHER2Classifier, LogitCalibrator, slides_from_arrays
from her2cws.synth import CohortSpec, generate_cohort


def to_arrays(slides):
    X = np.concatenate([s.features() for s in slides])
    y = np.concatenate([[s.label] * len(s.patches) for s in slides])
    groups = np.concatenate([[s.id] * len(s.patches) for s in slides])
    w = np.array([p.tumor_fraction for s in slides for p in s.patches])
    truth = np.array([p.true_class for s in slides for p in s.patches])
    return X, y, groups, w, truth


@pytest.fixture(scope="module")
def arrays():
    return to_arrays(generate_cohort(CohortSpec(slide_counts=(20, 20, 20, 20), seed=4)))


@pytest.fixture(scope="module")
def fitted(arrays):
    X, y, g, w, _ = arrays
    return ConstrainedHER2Classifier(random_state=4).fit(X, y, groups=g, sample_weight=w)


def test_params_and_clone():
    est = ConstrainedHER2Classifier(weak_lr=1.0, calibrate=False)
    params = est.get_params()
    assert params["weak_lr"] == 1.0 and params["calibrate"] is False
    c = clone(est)
    assert c.get_params() == params
    est.set_params(weak_epochs=3)
    assert est.weak_epochs == 3


def test_not_fitted():
    with pytest.raises(NotFittedError):
        ConstrainedHER2Classifier().predict(np.zeros((2, 8)))


def test_fit_predict(fitted, arrays):
    X, y, g, w, truth = arrays
    assert fitted.classes_.tolist() == [0, 1, 2, 3]
    assert fitted.n_features_in_ == 8
    pred = fitted.predict(X)
    assert pred.shape == (len(X),)
    proba = fitted.predict_proba(X)
    assert np.allclose(proba.sum(1), 1)
    assert np.mean(fitted.predict(X, stage="weak") == truth) > np.mean(fitted.predict(X, stage="pretrain") == truth) - 0.02
    assert len(fitted.history_) >= 1 and fitted.alpha_.shape == (4,)
    with pytest.raises(ValueError):
        fitted.predict(X, stage="final")
    with pytest.raises(ValueError):
        fitted.predict(X[:, :5])


def test_predict_slides(fitted, arrays):
    X, y, g, w, _ = arrays
    verdicts = fitted.predict_slides(X, g, w)
    assert len(verdicts) == 80
    labels = dict(zip(g, y))
    acc = np.mean([v.principal == labels[sid] for sid, v in verdicts.items()])
    assert acc >= 0.85


def test_input_validation(arrays):
    X, y, g, w, _ = arrays
    est = ConstrainedHER2Classifier(pretrain_epochs=1, weak_epochs=1)
    with pytest.raises(ValueError):
        est.fit(X, y)
    bad = y.copy()
    bad[0] = (bad[0] + 1) % 4
    with pytest.raises(ValueError, match="different labels"):
        est.fit(X, bad, groups=g)
    with pytest.raises(ValueError):
        est.fit(X, y, groups=g, sample_weight=w * 2)
    with pytest.raises(ValueError):
        est.fit(np.full_like(X, np.nan), y, groups=g)


def test_slides_from_arrays_order():
    X = np.arange(8.0).reshape(4, 2)
    slides = slides_from_arrays(X, [1, 2, 1, 2], ["b", "a", "b", "a"], [0.5, 0.5, 0.5, 0.5])
    assert [s.id for s in slides] == ["a", "b"]
    assert slides[1].features().tolist() == [[0, 1], [4, 5]]


def test_logit_calibrator():
    rows = np.array([[3.0, 1.0, 0.0, -1.0]] * 7 + [[0.0, 1.0, 1.2, -1.0]] * 3)
    L = np.vstack([rows] * 4)
    g = np.repeat(["s0", "s1", "s2", "s3"], 10)
    y = np.ones(40, dtype=int)
    cal = LogitCalibrator().fit(L, y, groups=g, sample_weight=np.full(40, 0.5))
    assert cal.result_.objective_after < cal.result_.objective_before
    assert np.array_equal(cal.transform(L), L * cal.alpha_)
    assert (cal.predict(L) == 2).sum() < (L.argmax(1) == 2).sum()
    with pytest.raises(ValueError):
        cal.transform(np.zeros((2, 3)))
    with pytest.raises(NotFittedError):
        LogitCalibrator().transform(L)

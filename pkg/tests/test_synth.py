import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from her2cws.cohort import pack, write_cohort
from her2cws.evaluation import rater_agreement
from her2cws.guidelines import score_fractions
from her2cws.synth import (
    CohortSpec,
    CohortSpecError,
    declared_class,
    discordance_matrix,
    expected_discordance,
    generate_cohort,
    simplex_means,
    simulate_raters,
    split_cohort,
)


def true_fractions(slide):
    return np.bincount([p.true_class for p in slide.patches], weights=slide.normalized_weights, minlength=4)


def test_compositions_score_to_declared_class(small_cohort):
    for s in small_cohort:
        assert score_fractions(true_fractions(s)).principal == s.label
        assert declared_class(s) == s.label


def test_class3_slides_have_class3_mass(small_cohort):
    for s in small_cohort:
        if s.label == 3:
            assert true_fractions(s)[3] >= 0.1


def test_higher_classes_below_ten_percent():
    slides = generate_cohort(CohortSpec(slide_counts=(50, 50, 50, 50), seed=11))
    ok = [all(true_fractions(s)[h] < 0.1 for h in range(s.label + 1, 4)) for s in slides]
    assert np.mean(ok) >= 0.99


def test_heterogeneous_rate_one():
    profiles = ((30.0, 1.0, 1.0, 0.001), (6.0, 8.0, 0.2, 0.02), (2.0, 3.0, 8.0, 0.1), (0.3, 0.5, 2.0, 10.0))
    spec = CohortSpec(slide_counts=(20, 0, 0, 0), heterogeneous_rate=1.0, profiles=profiles, seed=4)
    slides = generate_cohort(spec)
    verdicts = [score_fractions(true_fractions(s)) for s in slides]
    assert all(v.principal == 0 and v.heterogeneous for v in verdicts)
    assert sum(0 < v.fractions[2] < 0.1 for v in verdicts) >= 15


def test_no_heterogeneity_by_default(small_cohort):
    assert not any(score_fractions(true_fractions(s)).heterogeneous for s in small_cohort)


def test_determinism(tmp_path):
    spec = CohortSpec(slide_counts=(3, 3, 3, 3), seed=9)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_cohort(generate_cohort(spec), a)
    write_cohort(generate_cohort(spec), b)
    assert a.read_bytes() == b.read_bytes()


def test_slide_streams_independent_of_count():
    a = generate_cohort(CohortSpec(slide_counts=(2, 0, 0, 0), seed=1))
    b = generate_cohort(CohortSpec(slide_counts=(3, 0, 0, 0), seed=1))
    assert np.array_equal(a[1].features(), b[1].features())


def test_rejection_cap_reports_spec():
    # class 3 needs >= 10% class-3 surface; a profile with almost none cannot get there
    profiles = ((30.0, 1.0, 0.02, 0.02), (6.0, 8.0, 0.2, 0.02), (2.0, 3.0, 8.0, 0.1), (50.0, 1e-3, 1e-3, 1e-3))
    spec = CohortSpec(slide_counts=(0, 0, 0, 1), profiles=profiles, patches_per_slide=(1, 1), seed=0)
    with pytest.raises(CohortSpecError, match="profiles\\[3\\]"):
        generate_cohort(spec)


@pytest.mark.parametrize(
    "kw",
    [
        dict(slide_counts=(1, 1, 1)),
        dict(slide_counts=(1, -1, 1, 1)),
        dict(feature_sigma=0.0),
        dict(profiles=((1, 1, 1, 0),) * 4),
        dict(tumor_fraction_range=(0.0, 1.0)),
        dict(heterogeneous_rate=1.5),
        dict(patches_per_slide=(5, 2)),
        dict(rater_noise=[[0.5, 0.5, 0, 0]] * 3),
    ],
)
def test_spec_validation(kw):
    with pytest.raises(CohortSpecError):
        CohortSpec(**kw)


def test_simplex_means_equidistant():
    m = simplex_means(8, 4.0, 1.5)
    d = np.linalg.norm(m[:, None] - m[None], axis=-1)
    off = d[~np.eye(4, dtype=bool)]
    assert np.allclose(off, 6.0)


def test_tumor_fractions_in_range(small_cohort):
    tf = np.array([p.tumor_fraction for s in small_cohort for p in s.patches])
    assert tf.min() >= 0.15 and tf.max() <= 1.0


def test_admitted_tumor_weight_share():
    spec = CohortSpec(slide_counts=(10, 10, 10, 10), tumor_fraction_range=(0.0 + 1e-9, 1.0), seed=2)
    tf = np.array([p.tumor_fraction for s in generate_cohort(spec) for p in s.patches])
    assert tf[tf > 0.1].sum() / tf.sum() >= 0.9


def _patch_accuracy(separation, seed=0):
    spec = CohortSpec(slide_counts=(40, 40, 40, 40), separation=separation, seed=seed)
    slides = generate_cohort(spec)
    train, _, test = split_cohort(slides, (0.5, 0.0, 0.5), seed)
    tr, te = pack(train, with_truth=True), pack(test, with_truth=True)
    clf = LogisticRegression(max_iter=2000).fit(tr.features, tr.true_classes)
    return clf.score(te.features, te.true_classes)


def test_oracle_accuracy_at_four_sigma_matches_bayes_level():
    # pairwise distance 4 sigma leaves ~6.5% Bayes error with three equidistant rivals
    acc = _patch_accuracy(4.0)
    assert 0.91 <= acc <= 0.96


def test_oracle_accuracy_high_at_six_sigma():
    assert _patch_accuracy(6.0) >= 0.99


@pytest.mark.xfail(strict=True, reason="4 sigma pairwise separation caps patch accuracy near 93.5%; see ledger")
def test_oracle_accuracy_99_at_four_sigma():
    assert _patch_accuracy(4.0) >= 0.99


def test_split_counts():
    slides = generate_cohort(CohortSpec(slide_counts=(10, 10, 10, 10), patches_per_slide=(2, 3), seed=0))
    train, val, test = split_cohort(slides, (0.8, 0.1, 0.1), seed=5)
    for part, n in ((train, 8), (val, 1), (test, 1)):
        assert np.bincount([s.label for s in part], minlength=4).tolist() == [n] * 4
    ids = [s.id for p in (train, val, test) for s in p]
    assert len(ids) == len(set(ids)) == 40
    again = split_cohort(slides, (0.8, 0.1, 0.1), seed=5)
    assert [[s.id for s in p] for p in again] == [[s.id for s in p] for p in (train, val, test)]
    tr, va, te = split_cohort(slides, (1.0, 0.0, 0.0), seed=1)
    assert len(tr) == 40 and not va and not te


def test_split_errors():
    slides = generate_cohort(CohortSpec(slide_counts=(2, 3, 3, 3), patches_per_slide=(2, 3), seed=0))
    with pytest.raises(ValueError):
        split_cohort(slides, (0.8, 0.1, 0.1))
    with pytest.raises(ValueError):
        split_cohort(slides, (0.5, 0.2, 0.2))


def test_discordance_matrix_rows():
    m = discordance_matrix(0.3)
    assert np.allclose(m.sum(1), 1) and np.allclose(np.diag(m), 0.7)
    assert m[0, 1] == pytest.approx(0.3) and m[1, 0] == pytest.approx(0.15)
    assert m[0, 2] == 0
    with pytest.raises(CohortSpecError):
        discordance_matrix(1.2)


def test_rater_noise_loop_closure():
    slides = generate_cohort(CohortSpec(slide_counts=(125, 125, 125, 125), patches_per_slide=(5, 10), seed=21))
    noise = discordance_matrix(0.3)
    raters = simulate_raters(slides, noise, n_raters=1, seed=21)
    (pair,) = rater_agreement({"reference": raters["reference"], "rater1": raters["rater1"]})
    assert pair["n"] == 500
    assert expected_discordance(noise, [1, 1, 1, 1]) == pytest.approx(0.3)
    assert abs(pair["discordance"] - 0.30) <= 0.03


def test_corrupted_labels_follow_noise():
    spec = CohortSpec(
        slide_counts=(100, 0, 0, 0), patches_per_slide=(3, 5), rater_noise=discordance_matrix(0.5).tolist(),
        corrupt_labels=True, seed=3,
    )
    slides = generate_cohort(spec)
    labels = np.array([s.label for s in slides])
    assert set(labels) <= {0, 1}
    assert 0.35 <= labels.mean() <= 0.65
    assert all(declared_class(s) == 0 for s in slides)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import average_precision_score

from octpair.metrics import average_precision, compute_metrics
from oracles import reference_weighted_scores


def _random_case(rng, n, ties=False):
    y = rng.integers(0, 4, n)
    p = rng.dirichlet(np.ones(4), n)
    if ties:
        p = np.round(p, 1)
    return y, p


def test_ap_matches_sklearn_with_and_without_ties(rng):
    for ties in (False, True):
        for _ in range(30):
            y = rng.integers(0, 2, 25).astype(bool)
            if not y.any():
                y[0] = True
            s = rng.random(25)
            if ties:
                s = np.round(s, 1)
            assert average_precision(y, s) == pytest.approx(average_precision_score(y, s), abs=1e-12)


def test_ap_hand_computed():
    # ranking: pos, neg, pos -> precision at the two hits 1 and 2/3
    y = np.array([1, 0, 1], dtype=bool)
    s = np.array([0.9, 0.8, 0.7])
    assert average_precision(y, s) == pytest.approx(0.5 * 1 + 0.5 * 2 / 3)
    assert np.isnan(average_precision(np.zeros(3, bool), s))


def test_weighted_scores_match_reference(rng):
    for k in range(40):
        y, p = _random_case(rng, int(rng.integers(5, 60)), ties=k % 2 == 1)
        rep = compute_metrics(y, p)
        ap, f1 = reference_weighted_scores(y, p)
        assert rep.weighted_ap == pytest.approx(ap, abs=1e-6)
        assert rep.weighted_f1 == pytest.approx(f1, abs=1e-6)


def test_perfect_classifier():
    y = np.repeat(np.arange(4), 5)
    rep = compute_metrics(y, np.eye(4)[y])
    assert rep.weighted_ap == 1.0 and rep.weighted_f1 == 1.0


def test_constant_predictor_on_balanced_data():
    y = np.repeat(np.arange(4), 7)
    p = np.tile([0.7, 0.1, 0.1, 0.1], (y.size, 1))
    rep = compute_metrics(y, p)
    assert rep.weighted_f1 == pytest.approx(0.1, abs=1e-15)
    assert rep.per_class["gelatin"]["f1"] == pytest.approx(0.4)


def test_missing_class_is_skipped_and_flagged():
    y = np.array([0, 0, 1, 1, 2])
    p = np.eye(4)[y] * 0.9 + 0.025
    rep = compute_metrics(y, p)
    assert rep.missing_classes == ["turkey"]
    assert rep.weighted_ap == pytest.approx(1.0)
    assert rep.per_class["turkey"]["support"] == 0
    assert set(rep.to_dict()) >= {"weighted_ap", "weighted_f1", "per_class", "missing_classes"}


def test_shape_errors():
    with pytest.raises(ValueError):
        compute_metrics([0, 1], np.ones((2, 3)))
    with pytest.raises(ValueError):
        compute_metrics([], np.ones((0, 4)))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 40), seed=st.integers(0, 100_000))
def test_metrics_bounded_and_order_free(n, seed):
    r = np.random.default_rng(seed)
    y, p = _random_case(r, n)
    rep = compute_metrics(y, p)
    assert 0.0 <= rep.weighted_ap <= 1.0
    assert 0.0 <= rep.weighted_f1 <= 1.0
    perm = r.permutation(n)
    again = compute_metrics(y[perm], p[perm])
    assert again.weighted_ap == pytest.approx(rep.weighted_ap, abs=1e-12)
    assert again.weighted_f1 == pytest.approx(rep.weighted_f1, abs=1e-12)

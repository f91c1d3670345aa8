import numpy as np
import pytest
from sklearn.utils.estimator_checks import check_estimator

from corpnlab.estimator import CoRPNClassifier


def test_sklearn_api_contract():
    check_estimator(CoRPNClassifier(n_rpns=3, max_iter=30))


def _blobs(seed=0, n=400, d=6):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    X = rng.normal(size=(n, d)) + 1.5 * y[:, None]
    return X, y


def test_learns_separable_problem():
    X, y = _blobs()
    clf = CoRPNClassifier(random_state=0).fit(X, y)
    assert clf.score(X, y) > 0.9
    assert clf.rpn_proba(X).shape == (5, len(X))
    p = clf.predict_proba(X)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    # the foreground vote and the most-certain score agree
    np.testing.assert_array_equal(clf.predict(X), clf.classes_[(p[:, 1] > 0.5).astype(int)])


def test_deterministic():
    X, y = _blobs(1)
    a = CoRPNClassifier(max_iter=50, random_state=4).fit(X, y)
    b = CoRPNClassifier(max_iter=50, random_state=4).fit(X, y)
    np.testing.assert_array_equal(a.predict_proba(X), b.predict_proba(X))


def test_rejects_multiclass_and_bad_params():
    X, _ = _blobs()
    with pytest.raises(ValueError, match="binary"):
        CoRPNClassifier().fit(X, np.arange(len(X)) % 3)
    with pytest.raises(ValueError):
        CoRPNClassifier(n_rpns=0).fit(X, np.arange(len(X)) % 2)
    with pytest.raises(ValueError):
        CoRPNClassifier(n_rpns=1, diversity="cosine").fit(X, np.arange(len(X)) % 2)

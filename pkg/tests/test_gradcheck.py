import numpy as np
import pytest

from corpnlab import corpn
from corpnlab.gradcheck import TERMS, central_diff, check_term, rel_err, run_gradcheck


def test_central_diff_quadratic():
    x = np.array([[1.0, -2.0], [0.5, 3.0]])
    np.testing.assert_allclose(central_diff(lambda v: float(np.sum(v ** 2)), x), 2 * x, atol=1e-8)


def test_rel_err():
    assert rel_err(np.ones(3), np.ones(3)) == 0.0
    assert rel_err(np.zeros(3), np.zeros(3)) == 0.0
    assert rel_err(np.array([1.0]), np.array([-1.0])) == pytest.approx(2.0)


def test_default_suite_passes():
    report = run_gradcheck(n_instances=20, seed=3)
    assert report.ok, report.format()
    assert {t.term for t in report.terms} == set(TERMS)
    for t in report.terms:
        assert t.checked == 20 and t.max_rel_err <= 1e-4


def _flipped_coop(F, fg, phi):
    loss, g = corpn.coop_loss(F, fg, phi)
    return loss, -g


def test_injected_sign_flip_is_named():
    report = run_gradcheck(n_instances=10, seed=0, terms=["ce", "coop"], functions={"coop": _flipped_coop})
    assert not report.ok
    assert [t.term for t in report.failures()] == ["coop"]
    text = report.format()
    assert "FAIL term=coop instance_seed=0:" in text and "max_rel_err=" in text


def test_exclusions_are_counted():
    r = check_term("coop", n_instances=50, seed=1)
    assert r.checked == 50 and r.skipped >= 0


def test_unknown_term():
    with pytest.raises(ValueError):
        run_gradcheck(terms=["nope"])

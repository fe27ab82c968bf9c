import math

import numpy as np
import pytest
import scipy.special
import scipy.stats

from qedistill.stats import betainc_regularized, paired_t_test, student_t_two_sided_p


def test_identical_samples_give_t0_p1():
    a = [0.5, 0.6, 0.7, 0.8]
    result = paired_t_test(a, list(a))
    assert result.t == 0.0
    assert result.p == 1.0
    assert result.degenerate == "all-zero-differences"


def test_constant_nonzero_difference_is_degenerate_infinite():
    a, b = [1.0, 2.0, 3.0, 4.0], [0.0, 1.0, 2.0, 3.0]
    result = paired_t_test(a, b)
    assert math.isinf(result.t) and result.t > 0
    assert result.p == 0.0
    assert result.degenerate == "zero-variance"


def test_too_few_pairs_rejected():
    with pytest.raises(ValueError):
        paired_t_test([1.0], [2.0])


def test_length_mismatch_rejected():
    with pytest.raises(ValueError):
        paired_t_test([1.0, 2.0], [1.0])


@pytest.mark.parametrize("seed", range(8))
def test_matches_scipy_reference(seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    n = 30
    a = rng.normal(0.5, 0.2, n)
    b = a + rng.normal(0.02, 0.1, n)
    result = paired_t_test(list(a), list(b))
    want = scipy.stats.ttest_rel(a, b)
    assert result.t == pytest.approx(want.statistic, abs=1e-9)
    assert result.p == pytest.approx(want.pvalue, abs=1e-6)


def test_one_sided_alternatives_match_scipy():
    rng = np.random.Generator(np.random.PCG64(42))
    a = rng.normal(0.6, 0.2, 25)
    b = rng.normal(0.5, 0.2, 25)
    for alternative in ("greater", "less"):
        got = paired_t_test(list(a), list(b), alternative=alternative)
        want = scipy.stats.ttest_rel(a, b, alternative=alternative)
        assert got.p == pytest.approx(want.pvalue, abs=1e-9)


@pytest.mark.parametrize(
    "a,b,x",
    [
        (0.5, 0.5, 0.3),
        (2.0, 3.0, 0.7),
        (10.0, 0.5, 0.99),
        (14.5, 0.5, 0.42),
        (1.0, 1.0, 0.5),
        (7.0, 7.0, 0.123),
    ],
)
def test_betainc_matches_scipy(a, b, x):
    assert betainc_regularized(a, b, x) == pytest.approx(
        scipy.special.betainc(a, b, x), abs=1e-12
    )


def test_betainc_bounds():
    assert betainc_regularized(2.0, 3.0, 0.0) == 0.0
    assert betainc_regularized(2.0, 3.0, 1.0) == 1.0
    with pytest.raises(ValueError):
        betainc_regularized(-1.0, 2.0, 0.5)


@pytest.mark.parametrize("t", [-4.2, -1.0, -0.2, 0.0, 0.35, 1.5, 2.8, 9.0])
@pytest.mark.parametrize("dof", [1, 2, 5, 29, 100])
def test_student_t_two_sided_matches_scipy(t, dof):
    want = 2.0 * scipy.stats.t.sf(abs(t), dof)
    assert student_t_two_sided_p(t, dof) == pytest.approx(want, abs=1e-12)

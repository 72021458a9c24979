from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mmdes.metrics import ccc, pearson, squared_errors


def ccc_exact(y, yhat):
    """Population-moment CCC in exact rational arithmetic."""
    y = [Fraction(v) for v in y]
    p = [Fraction(v) for v in yhat]
    n = len(y)
    my, mp = sum(y) / n, sum(p) / n
    cov = sum((a - my) * (b - mp) for a, b in zip(y, p)) / n
    vy = sum((a - my) ** 2 for a in y) / n
    vp = sum((b - mp) ** 2 for b in p) / n
    return 2 * cov / (vy + vp + (my - mp) ** 2)


def test_ccc_oracle_values():
    assert ccc_exact([1, 2, 3], [2, 3, 4]) == Fraction(4, 7)
    assert ccc_exact([1, 2, 3], [3, 2, 1]) == -1
    assert ccc([1, 2, 3], [1, 2, 3]) == 1.0
    assert ccc([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-12)
    assert ccc([1, 2, 3], [2, 3, 4]) == pytest.approx(4 / 7, abs=1e-12)


def test_ccc_matches_rho_sigma_form():
    rng = np.random.default_rng(3)
    y, p = rng.normal(size=50), rng.normal(size=50) + 0.3
    rho = np.corrcoef(y, p)[0, 1]
    ref = 2 * rho * y.std() * p.std() / (y.var() + p.var() + (y.mean() - p.mean()) ** 2)
    assert ccc(y, p) == pytest.approx(ref, abs=1e-12)


def test_ccc_degenerate_cases():
    assert ccc([2, 2, 2], [2, 2, 2]) == 1.0
    assert ccc([1, 2, 3], [5, 5, 5]) == 0.0


@pytest.mark.parametrize("y, p", [([1, 2], [1, 2, 3]), ([1], [1]), ([1, np.nan], [1, 2]), ([1, 2], [np.inf, 2])])
def test_ccc_errors(y, p):
    with pytest.raises(ValueError):
        ccc(y, p)


def test_pearson():
    assert pearson([0, 1], [0, 2]) == pytest.approx(1.0)
    assert pearson([0, 1], [2, 0]) == pytest.approx(-1.0)
    with pytest.raises(ValueError, match="zero-variance"):
        pearson([1, 1], [0, 1])
    with pytest.raises(ValueError):
        pearson([0, 1], [0, 1, 2])


def test_squared_errors():
    np.testing.assert_array_equal(squared_errors([1, 2], [1, 2]), [0, 0])
    np.testing.assert_array_equal(squared_errors([0], [3]), [9])
    np.testing.assert_array_equal(squared_errors([1, -1], [-1, 1]), [4, 4])
    with pytest.raises(ValueError):
        squared_errors([1, 2], [1])


series = arrays(np.float64, st.integers(3, 40), elements=st.floats(-100, 100, allow_nan=False))


def _nonconstant(a):
    return np.ptp(a) > 1e-3


@settings(max_examples=200, deadline=None)
@given(series, st.data())
def test_ccc_properties(y, data):
    p = data.draw(arrays(np.float64, y.size, elements=st.floats(-100, 100, allow_nan=False)))
    c = ccc(y, p)
    assert -1.0 - 1e-12 <= c <= 1.0 + 1e-12
    assert c == ccc(p, y)
    if _nonconstant(y):
        assert ccc(y, y) == pytest.approx(1.0, abs=1e-12)
    if _nonconstant(y) and _nonconstant(p):
        assert abs(c) <= abs(pearson(y, p)) + 1e-9


@settings(max_examples=100, deadline=None)
@given(series, st.floats(0.1, 10), st.floats(-50, 50), st.integers(0, 2**32 - 1))
def test_ccc_affine_invariance(y, a, b, seed):
    p = y + np.random.default_rng(seed).normal(size=y.size)
    assert ccc(a * y + b, a * p + b) == pytest.approx(ccc(y, p), abs=1e-9)

import math

import mpmath
import numpy as np
import pytest

from metasense import specfun
from metasense.errors import DomainError

mpmath.mp.dps = 30
X = np.logspace(-3, 3, 200)


def _oracle(kind, nu, x):
    f = mpmath.besselj if kind == "j" else mpmath.bessely
    return float(f(nu, mpmath.mpf(x)))


@pytest.mark.parametrize("nu", [0, 1, 2])
def test_j_matches_mpmath(nu):
    got = specfun.bessel_j(nu, X)
    ref = np.array([_oracle("j", nu, x) for x in X])
    # relative where the value is not near a zero, absolute near zeros
    err = np.abs(got - ref) / np.maximum(np.abs(ref), 1e-300)
    near_zero = np.abs(ref) < 1e-6 * np.max(np.abs(ref))
    assert np.all(err[~near_zero] < 1e-10)


@pytest.mark.parametrize("nu", [0, 1, 2])
def test_y_matches_mpmath(nu):
    got = specfun.bessel_y(nu, X)
    ref = np.array([_oracle("y", nu, x) for x in X])
    assert np.max(np.abs(got - ref) / np.abs(ref)) < 1e-10


def test_both_sides_of_crossover():
    for x in (4.999, 5.0, 5.001):
        for nu in (0, 1, 2):
            assert specfun.bessel_j(nu, x) == pytest.approx(_oracle("j", nu, x), rel=1e-12, abs=1e-15)
            assert specfun.bessel_y(nu, x) == pytest.approx(_oracle("y", nu, x), rel=1e-12, abs=1e-15)


def test_wronskian():
    w = specfun.bessel_j(1, X) * specfun.bessel_y(0, X) - specfun.bessel_j(0, X) * specfun.bessel_y(1, X)
    assert np.max(np.abs(w * math.pi * X / 2 - 1)) < 1e-9


def test_recurrence():
    for f in (specfun.bessel_j, specfun.bessel_y):
        lhs = f(2, X)
        rhs = 2 / X * f(1, X) - f(0, X)
        scale = np.abs(lhs) + np.abs(2 / X * f(1, X)) + np.abs(f(0, X))
        assert np.max(np.abs(lhs - rhs) / scale) < 1e-9


def test_hankel2_definition():
    h = specfun.hankel2(1, X)
    assert np.array_equal(h.real, specfun.bessel_j(1, X))
    assert np.array_equal(h.imag, -specfun.bessel_y(1, X))


def test_small_argument_behaviour():
    x = 1e-3
    assert specfun.bessel_j(0, x) == pytest.approx(1 - x * x / 4, rel=1e-12)
    assert specfun.bessel_y(0, x) == pytest.approx(2 / math.pi * (math.log(x / 2) + np.euler_gamma), rel=1e-6)
    assert specfun.bessel_y(2, x) == pytest.approx(-4 / (math.pi * x * x), rel=1e-5)


def test_scalar_in_scalar_out():
    assert isinstance(specfun.bessel_j(0, 1.0), float)
    assert isinstance(specfun.hankel2(0, 1.0), complex)
    assert specfun.bessel_j(1, np.ones((2, 3))).shape == (2, 3)


@pytest.mark.parametrize("nu", [-1, 3, 1.0, True, "0"])
def test_bad_order(nu):
    with pytest.raises(DomainError):
        specfun.bessel_j(nu, 1.0)


def test_domain():
    assert specfun.bessel_j(0, 0.0) == 1.0
    with pytest.raises(DomainError):
        specfun.bessel_y(0, 0.0)
    with pytest.raises(DomainError):
        specfun.hankel2(1, -1.0)
    with pytest.raises(DomainError):
        specfun.bessel_j(0, np.nan)

"""Cylinder functions of integer order 0, 1 and 2.

The kernels are backed by the Cephes routines shipped with scipy
(``j0``/``j1``/``y0``/``y1`` plus ``jv``/``yv`` for order 2).  Cephes switches
from a rational approximation to a Hankel-type asymptotic form at x = 5 for
orders 0 and 1; order 2 is obtained through stable forward recurrence from
those two.  Tests cover both sides of x = 5.

All functions accept scalars or numpy arrays and return the same shape.
"""
from __future__ import annotations

import numpy as np
from scipy import special

from .errors import DomainError

ORDERS = (0, 1, 2)
REGIME_CROSSOVER = 5.0

_J = {0: special.j0, 1: special.j1, 2: lambda x: special.jv(2, x)}
_Y = {0: special.y0, 1: special.y1, 2: lambda x: special.yv(2, x)}


def _check_order(nu):
    if isinstance(nu, bool) or not isinstance(nu, (int, np.integer)) or int(nu) not in ORDERS:
        raise DomainError(f"cylinder order must be one of {ORDERS}, got {nu!r}")
    return int(nu)


def _as_real(x):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError("argument must be finite")
    return arr


def _unwrap(arr):
    return arr.item() if arr.ndim == 0 else arr


def bessel_j(nu, x):
    """Bessel function of the first kind J_nu(x) for x >= 0."""
    nu = _check_order(nu)
    arr = _as_real(x)
    if np.any(arr < 0):
        raise DomainError("bessel_j is defined here for x >= 0 only")
    return _unwrap(np.asarray(_J[nu](arr), dtype=float))


def bessel_y(nu, x):
    """Bessel function of the second kind Y_nu(x) for x > 0."""
    nu = _check_order(nu)
    arr = _as_real(x)
    if np.any(arr <= 0):
        raise DomainError("bessel_y diverges at x <= 0")
    return _unwrap(np.asarray(_Y[nu](arr), dtype=float))


def hankel2(nu, x):
    """Hankel function of the second kind, H2_nu(x) = J_nu(x) - j Y_nu(x)."""
    nu = _check_order(nu)
    arr = _as_real(x)
    if np.any(arr <= 0):
        raise DomainError("hankel2 diverges at x <= 0")
    out = np.asarray(_J[nu](arr), dtype=float) - 1j * np.asarray(_Y[nu](arr), dtype=float)
    return _unwrap(out)

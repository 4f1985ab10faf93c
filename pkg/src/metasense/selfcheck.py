"""Fast invariant checks behind ``metasense validate``.

These exercise closed-form identities only (no external oracles), so they run
in a second or two on any installation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import specfun
from .channel import RxArray, Scenario, Target, dft_combiner
from .crb import finite_difference_fim, location_fim, peb_of_moments
from .em_core import (
    LorentzianParams,
    OperatingPoint,
    PanelGeometry,
    green_fs,
    green_wg,
    local_fields,
    max_strength,
    passivity_limit,
    power_audit,
    resonant_polarizability,
)


@dataclass
class Check:
    name: str
    ok: bool
    detail: str


def small_scenario(n_elements=16, n_antennas=16, n_targets=2, seed=7) -> Scenario:
    """Compact fixed-seed scenario used by the self-checks and tests."""
    op = OperatingPoint(20e9)
    lam = op.wavelength
    h = lam / 5
    rng = np.random.default_rng(seed)
    side = math.ceil(math.sqrt(n_elements))
    g = (np.arange(side) + 0.5) / side * 0.1 - 0.05
    xy = np.array([(x, y) for y in g for x in g])[:n_elements]
    xy = xy + rng.uniform(-1e-3, 1e-3, xy.shape)
    panel = PanelGeometry(0.1, 0.1, h, xy, (0.0013, -0.0021))
    gam = op.omega / 100
    el = LorentzianParams(np.full(n_elements, max_strength(op, h, gam)), op.omega, gam)
    pts = [[5.4, 5.3, 4.0], [7.1, 3.5, 5.25], [6.0, 4.0, 4.5]][:n_targets]
    ph = rng.uniform(0, 2 * math.pi, n_targets)
    targets = [Target(p, np.exp(1j * a)) for p, a in zip(pts, ph)]
    rx = RxArray([10.0, 5.0, 5.0], n_antennas, lam, combiner=dft_combiner(n_antennas, rng))
    return Scenario(op, panel, el, targets, rx, 1e-11, 100, 10 ** (1 / 10) * 1e-3).validate()


def _green_limits():
    op = OperatingPoint(20e9)
    h = op.wavelength / 5
    k = op.k
    rho = 0.01 / k
    wg = np.imag(green_wg(op, h, np.array([rho, 0.0]))) * (-8 * h / k**2)
    fs = np.imag(green_fs(op, np.array([rho, 0.0]))) * (-3 * math.pi / k**3)
    ok = abs(wg - 1) <= 1e-3 and abs(fs - 1) <= 1e-3
    return Check("green singular limits", ok, f"wg={wg:.6f} fs={fs:.6f}")


def _passivity():
    op = OperatingPoint(20e9)
    h = op.wavelength / 5
    gam = op.omega / 100
    F = max_strength(op, h, gam)
    worst = 0.0
    for frac, want in ((1.0, 1.0), (0.5, 0.5)):
        a = resonant_polarizability(np.array([frac * F]), op.omega, gam)
        r = power_audit(op, h, a, local_fields(a, np.array([1e-6 + 2e-6j]))).ratio[0]
        worst = max(worst, abs(r - want))
    return Check("passivity ratio at F_max and F_max/2", worst <= 1e-9, f"max |err|={worst:.2e}")


def _bessel():
    x = np.logspace(-3, 3, 200)
    w = specfun.bessel_j(1, x) * specfun.bessel_y(0, x) - specfun.bessel_j(0, x) * specfun.bessel_y(1, x)
    e1 = float(np.max(np.abs(w - 2 / (math.pi * x)) * (math.pi * x / 2)))
    r = specfun.bessel_j(2, x) - (2 / x * specfun.bessel_j(1, x) - specfun.bessel_j(0, x))
    scale = np.abs(specfun.bessel_j(2, x)) + np.abs(2 / x * specfun.bessel_j(1, x)) + np.abs(specfun.bessel_j(0, x))
    e2 = float(np.max(np.abs(r) / scale))
    return Check("bessel wronskian and recurrence", max(e1, e2) <= 1e-9, f"wronskian={e1:.1e} recurrence={e2:.1e}")


def _fim():
    sc = small_scenario(4, 4, 1)
    m = np.exp(1j * np.arange(4)) * 1e-6
    J = location_fim(sc, m).full
    Jfd = finite_difference_fim(sc, m).full
    d = np.sqrt(np.outer(np.diag(J), np.diag(J)))
    err = float(np.max(np.abs(J - Jfd) / d))
    return Check("FIM vs central differences", err <= 1e-3, f"max rel err={err:.2e}")


def _scaling():
    sc = small_scenario(16, 16, 2)
    m = np.exp(1j * np.arange(16) * 0.7) * 1e-6
    p = peb_of_moments(sc, m)
    r1 = peb_of_moments(sc.with_(n_pilots=2 * sc.n_pilots), m) / p
    r2 = peb_of_moments(sc.with_(noise_var=4 * sc.noise_var), m) / p
    err = max(abs(r1 - 1 / math.sqrt(2)), abs(r2 - 2))
    return Check("PEB scaling in T and sigma^2", err <= 1e-10, f"ratios {r1:.12f} {r2:.12f}")


def run_checks() -> list:
    out = []
    for fn in (_green_limits, _passivity, _bessel, _fim, _scaling):
        try:
            out.append(fn())
        except Exception as exc:  # noqa: BLE001 - a crash is a failed check
            out.append(Check(fn.__name__.strip("_"), False, f"raised {type(exc).__name__}: {exc}"))
    return out

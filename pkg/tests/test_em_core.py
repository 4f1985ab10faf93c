import math

import mpmath
import numpy as np
import pytest

from metasense.em_core import (
    LorentzianParams,
    OperatingPoint,
    PanelGeometry,
    build_coupling_matrix,
    dump_complex_csv,
    excitation_vector,
    green_fs,
    green_wg,
    local_fields,
    max_strength,
    neumann_contraction,
    passivity_limit,
    polarizability_lorentzian,
    power_audit,
    resonant_polarizability,
    solve_dipoles_exact,
    solve_dipoles_neumann,
)
from metasense.errors import DomainError, SingularityError, SolveError


def _panel(op, xy, feed=(0.0, 0.0), **kw):
    return PanelGeometry(0.5, 0.5, op.wavelength / 5, np.asarray(xy, float), feed, **kw)


def _h2(nu, x):
    return complex(mpmath.hankel2(nu, x))


def test_operating_point(op):
    assert op.k == pytest.approx(2 * math.pi * 20e9 / 299792458.0, rel=1e-15)
    assert op.eta == pytest.approx(376.730313, rel=1e-8)
    with pytest.raises(DomainError):
        OperatingPoint(0.0)


def test_passivity_constant_value(op):
    h = op.wavelength / 5
    k = op.k
    assert passivity_limit(op, h) == pytest.approx(k**3 / (3 * math.pi) + k**2 / (8 * h), rel=1e-15)
    assert passivity_limit(op, h) == pytest.approx(1.514e7, rel=1e-3)


def test_green_wg_against_independent_evaluation(op):
    h = op.wavelength / 5
    k = op.k
    rng = np.random.default_rng(0)
    for _ in range(10):
        dr = rng.uniform(-0.05, 0.05, 2)
        rho = math.hypot(*dr)
        psi = math.atan2(dr[1], dr[0])
        ref = -(1j * k * k / (8 * h)) * (_h2(0, k * rho) - math.cos(2 * psi) * _h2(2, k * rho))
        assert green_wg(op, h, dr) == pytest.approx(ref, rel=1e-11)


def test_green_fs_against_independent_evaluation(op):
    k = op.k
    for dr in ([0.01, 0.0], [0.003, -0.02], [-0.04, 0.01]):
        rho = math.hypot(*dr)
        c2 = (dr[0] / rho) ** 2
        kr = k * rho
        ref = ((3 / kr**2 + 3j / kr - 1) * c2 + (1 - 1j / kr - 1 / kr**2)) * k * k * np.exp(-1j * kr) / (2 * math.pi * rho)
        assert green_fs(op, np.array(dr)) == pytest.approx(ref, rel=1e-13)


@pytest.mark.parametrize("angle", [0.0, 0.4, math.pi / 2, 2.5])
def test_green_singular_limits(op, angle):
    h = op.wavelength / 5
    k = op.k
    rho = 0.01 / k
    dr = rho * np.array([math.cos(angle), math.sin(angle)])
    assert np.imag(green_wg(op, h, dr)) * (-8 * h / k**2) == pytest.approx(1.0, abs=1e-3)
    assert np.imag(green_fs(op, dr)) * (-3 * math.pi / k**3) == pytest.approx(1.0, abs=1e-3)


def test_green_zero_separation(op):
    with pytest.raises(SingularityError):
        green_wg(op, 1e-3, np.zeros(2))


def test_coupling_matrix_symmetric_zero_diagonal(op, rng):
    xy = rng.uniform(-0.2, 0.2, (30, 2))
    cm = build_coupling_matrix(op, _panel(op, xy))
    assert np.array_equal(cm.G, cm.G.T)
    assert np.all(np.diag(cm.G) == 0)
    # chunked assembly is identical
    assert np.array_equal(build_coupling_matrix(op, _panel(op, xy), chunk=7).G, cm.G)
    i, j = 3, 17
    assert cm.G[i, j] == pytest.approx(green_wg(op, op.wavelength / 5, xy[i] - xy[j]) + green_fs(op, xy[i] - xy[j]), rel=1e-14)


def test_coupling_matrix_duplicates(op):
    with pytest.raises(SingularityError):
        build_coupling_matrix(op, _panel(op, [[0.1, 0.1], [0.1, 0.1]]))


def test_excitation_vector(op):
    xy = np.array([[0.01, 0.02], [-0.03, 0.0], [0.0, -0.05]])
    feed = np.array([0.002, -0.001])
    h = excitation_vector(op, _panel(op, xy, feed)).h_f
    k = op.k
    for n in range(3):
        d = math.hypot(*(feed - xy[n]))
        ref = 1j * k / 4 * _h2(1, k * d) * (feed[1] - xy[n, 1]) / d
        assert h[n] == pytest.approx(ref, rel=1e-11)
    # an element level with the feed along y sees no excitation
    assert h[1] != 0 and abs(excitation_vector(op, _panel(op, [[0.03, -0.001]], feed)).h_f[0]) < 1e-12
    with pytest.raises(SingularityError):
        excitation_vector(op, _panel(op, [[0.0, 0.0]]))


def test_lorentzian(op):
    w = op.omega
    p = LorentzianParams(2.0, w, w / 100)
    assert polarizability_lorentzian(p, w) == pytest.approx(-1j * 2.0 * 100, rel=1e-14)
    assert resonant_polarizability(2.0, w, w / 100) == pytest.approx(-200j)
    off = polarizability_lorentzian(p, 0.9 * w)
    assert off == pytest.approx(2 * (0.9 * w) ** 2 / (w**2 - (0.9 * w) ** 2 + 1j * w / 100 * 0.9 * w))
    with pytest.raises(DomainError):
        LorentzianParams(0.0, w, 1.0)


@pytest.mark.parametrize("frac,want", [(1.0, 1.0), (0.5, 0.5), (0.1, 0.1)])
def test_power_ratio(op, frac, want):
    h = op.wavelength / 5
    gam = op.omega / 100
    F = frac * max_strength(op, h, gam)
    a = resonant_polarizability(np.array([F]), op.omega, gam)
    audit = power_audit(op, h, a, local_fields(a, np.array([3e-6 - 1e-6j])))
    assert audit.ratio[0] == pytest.approx(want, abs=1e-9)
    assert audit.passes()


def test_power_audit_flags_active_element(op):
    h = op.wavelength / 5
    gam = op.omega / 100
    a = resonant_polarizability(np.array([2 * max_strength(op, h, gam)]), op.omega, gam)
    assert not power_audit(op, h, a, np.array([1.0])).passes()


def _dense(op, n_side, spacing):
    g = (np.arange(n_side) - (n_side - 1) / 2) * spacing
    xy = np.array([(x, y) for y in g for x in g]) + np.array([spacing / 3, spacing / 5])
    return _panel(op, xy)


def test_exact_solve_residual(op, rng):
    panel = _panel(op, rng.uniform(-0.2, 0.2, (40, 2)))
    G = build_coupling_matrix(op, panel).G
    h = excitation_vector(op, panel).h_f
    gam = op.omega / 100
    a = resonant_polarizability(rng.uniform(0.1, 1, 40) * max_strength(op, panel.height, gam), op.omega, gam)
    sol = solve_dipoles_exact(G, a, h)
    assert np.linalg.norm(sol.moments / a - G @ sol.moments - h) <= 1e-10 * np.linalg.norm(h)
    with pytest.raises(SolveError):
        solve_dipoles_exact(G, a, h, condition_cap=1.0)
    with pytest.raises(DomainError):
        solve_dipoles_exact(G, np.zeros(40), h)


def test_neumann_error_bound(op):
    panel = _dense(op, 8, op.wavelength / 128)
    G = build_coupling_matrix(op, panel).G
    h = excitation_vector(op, panel).h_f
    gam = op.omega / 100
    a = resonant_polarizability(np.full(64, max_strength(op, panel.height, gam)), op.omega, gam)
    q = neumann_contraction(G, a)
    assert q <= 0.1
    approx = solve_dipoles_neumann(G, a, h)
    exact = solve_dipoles_exact(G, a, h).moments
    err = np.linalg.norm(approx.moments - exact) / np.linalg.norm(exact)
    assert approx.contractive and approx.contraction == pytest.approx(q)
    assert err <= 1.1 * q**2 / (1 - q)


def test_neumann_zero_limit(op, rng):
    panel = _panel(op, rng.uniform(-0.2, 0.2, (10, 2)))
    G = build_coupling_matrix(op, panel).G
    h = excitation_vector(op, panel).h_f
    m = solve_dipoles_neumann(G, None, h, inv_alpha=np.zeros(10)).moments
    assert np.allclose(G @ m, -h, rtol=0, atol=1e-12 * np.linalg.norm(h))


def test_panel_validation(op):
    assert _panel(op, [[0.1, 0.1], [0.2, 0.2]], min_spacing=0.01).validate()
    with pytest.raises(DomainError):
        _panel(op, [[0.3, 0.0]]).validate()
    with pytest.raises(DomainError):
        _panel(op, [[0.1, 0.1], [0.101, 0.1]], min_spacing=0.01).validate()
    with pytest.raises(SingularityError):
        _panel(op, [[0.0, 0.0]]).validate()


def test_dump_complex_csv(tmp_path):
    arr = np.array([[1 + 2j, 0.1 - 1e-20j], [math.pi, -3j]])
    dump_complex_csv(tmp_path / "g.csv", arr)
    rows = (tmp_path / "g.csv").read_text().splitlines()
    assert rows[0] == "row,col,re,im" and len(rows) == 5
    back = np.zeros((2, 2), complex)
    for line in rows[1:]:
        i, j, re, im = line.split(",")
        back[int(i), int(j)] = float(re) + 1j * float(im)
    assert np.array_equal(back, arr)


def test_excitation_axis_examples(op):
    d = op.wavelength
    h = excitation_vector(op, _panel(op, [[0.0, d], [d, 0.0]])).h_f
    assert h[0] == pytest.approx(-(1j * op.k / 4) * _h2(1, op.k * d), rel=1e-12)
    assert h[1] == 0


def test_excitation_decreasing_with_distance(op):
    lam = op.wavelength
    xy = [[0.0, f * lam] for f in (0.5, 1, 2, 4)]
    mag = np.abs(excitation_vector(op, _panel(op, xy)).h_f)
    assert np.all(np.diff(mag) < 0)


def test_two_element_matrix(op):
    lam = op.wavelength
    G = build_coupling_matrix(op, _panel(op, [[0.0, 0.01], [lam / 2, 0.01]])).G
    ref = green_wg(op, lam / 5, np.array([-lam / 2, 0.0])) + green_fs(op, np.array([-lam / 2, 0.0]))
    assert G[0, 1] == pytest.approx(ref, rel=1e-14) and G[1, 0] == G[0, 1]

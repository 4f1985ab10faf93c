"""Coupled-dipole model of a single-feed, parallel-plate-fed metasurface.

Every element is an x-directed magnetic dipole at z = 0.  Moments follow from
the local field (feed plus scattering from all other dipoles), so for a unit
feed current the moment vector solves ``(diag(alpha)^-1 - G) m = h_f``.

Units are SI throughout: positions in metres, polarizabilities in m^3,
moments per unit feed current in m^2, powers in watts.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import scipy.constants as const
from scipy import linalg

from .errors import DomainError, SingularityError, SolveError
from .specfun import hankel2

DEFAULT_CONDITION_CAP = 1e12


@dataclass(frozen=True)
class OperatingPoint:
    """Single-frequency operating point in an air-filled guide."""

    frequency: float

    def __post_init__(self):
        if not (self.frequency > 0 and math.isfinite(self.frequency)):
            raise DomainError("frequency must be positive and finite")

    @property
    def omega(self) -> float:
        return 2.0 * math.pi * self.frequency

    @property
    def k(self) -> float:
        return self.omega / const.c

    @property
    def wavelength(self) -> float:
        return const.c / self.frequency

    @property
    def eta(self) -> float:
        return math.sqrt(const.mu_0 / const.epsilon_0)

    @property
    def mu0(self) -> float:
        return const.mu_0


@dataclass
class PanelGeometry:
    """Aperture of size ``width`` x ``depth`` centred at ``center`` in the z = 0 plane.

    ``positions`` is an (N, 2) array of element (x, y) coordinates and ``feed``
    the (x, y) location of the line source.
    """

    width: float
    depth: float
    height: float
    positions: np.ndarray
    feed: np.ndarray
    min_spacing: float = 0.0
    center: tuple = (0.0, 0.0)

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if self.positions.size == 0:
            self.positions = self.positions.reshape(0, 2)
        self.feed = np.asarray(self.feed, dtype=float).reshape(2)
        self.center = tuple(float(c) for c in self.center)

    @property
    def n_elements(self) -> int:
        return self.positions.shape[0]

    @property
    def center3(self) -> np.ndarray:
        return np.array([self.center[0], self.center[1], 0.0])

    @property
    def positions3(self) -> np.ndarray:
        return np.column_stack([self.positions, np.zeros(self.n_elements)])

    def contains(self, xy, tol=1e-12) -> np.ndarray:
        xy = np.atleast_2d(xy)
        hx = self.width / 2 * (1 + tol)
        hy = self.depth / 2 * (1 + tol)
        return (np.abs(xy[:, 0] - self.center[0]) <= hx) & (np.abs(xy[:, 1] - self.center[1]) <= hy)

    def validate(self):
        """Raise if any geometric invariant is violated."""
        if self.width <= 0 or self.depth <= 0 or self.height <= 0:
            raise DomainError("aperture extents and waveguide height must be positive")
        if self.positions.shape[1] != 2:
            raise DomainError("positions must be an (N, 2) array")
        if not np.all(self.contains(self.positions)):
            raise DomainError("element outside the aperture")
        if not self.contains(self.feed[None, :])[0]:
            raise DomainError("feed outside the aperture")
        d_feed = np.hypot(*(self.positions - self.feed).T)
        if np.any(d_feed <= 0):
            raise SingularityError("element collocated with the feed")
        if self.n_elements > 1:
            d = min_pairwise_distance(self.positions)
            if d <= 0:
                raise SingularityError("duplicate element positions")
            if d < self.min_spacing * (1 - 1e-12):
                raise DomainError(f"minimum spacing violated: {d:.6g} < {self.min_spacing:.6g}")
        return self


def min_pairwise_distance(xy) -> float:
    xy = np.asarray(xy, dtype=float)
    if len(xy) < 2:
        return math.inf
    from scipy.spatial import cKDTree

    dist, _ = cKDTree(xy).query(xy, k=2)
    return float(dist[:, 1].min())


@dataclass(frozen=True)
class LorentzianParams:
    """Lorentzian resonance parameters; scalars or per-element arrays."""

    strength: np.ndarray
    omega0: np.ndarray
    damping: np.ndarray

    def __post_init__(self):
        for name in ("strength", "omega0", "damping"):
            val = np.asarray(getattr(self, name), dtype=float)
            if np.any(~(val > 0)):
                raise DomainError(f"{name} must be strictly positive")


def polarizability_lorentzian(params: LorentzianParams, omega):
    """alpha = F w^2 / (w0^2 - w^2 + j Gamma w)."""
    if np.any(np.asarray(omega) <= 0):
        raise DomainError("omega must be positive")
    F = np.asarray(params.strength, dtype=float)
    w0 = np.asarray(params.omega0, dtype=float)
    g = np.asarray(params.damping, dtype=float)
    out = F * omega**2 / (w0**2 - omega**2 + 1j * g * omega)
    return out.item() if np.ndim(out) == 0 else out


def resonant_polarizability(strength, omega0, damping):
    """Polarizability at resonance, ``-j F w0 / Gamma`` (purely imaginary)."""
    return -1j * np.asarray(strength, dtype=float) * omega0 / np.asarray(damping, dtype=float)


def _split(dr):
    dr = np.asarray(dr, dtype=float)
    dx, dy = dr[..., 0], dr[..., 1]
    rho = np.hypot(dx, dy)
    if np.any(rho == 0):
        raise SingularityError("Green's function evaluated at zero separation")
    return dx, dy, rho


def green_wg(op: OperatingPoint, h: float, dr):
    """Parallel-plate guided-mode coupling between x-directed magnetic dipoles.

    ``dr`` is an (..., 2) displacement.  ``cos(2 psi)`` is evaluated as
    ``(dx^2 - dy^2) / rho^2`` so it is quadrant-correct and swap-invariant.
    """
    dx, dy, rho = _split(dr)
    k = op.k
    cos2psi = (dx * dx - dy * dy) / (rho * rho)
    kr = k * rho
    out = -(1j * k * k / (8.0 * h)) * (hankel2(0, kr) - cos2psi * hankel2(2, kr))
    return out


def green_fs(op: OperatingPoint, dr):
    """Free-space x-to-x dyadic term including the ground-plane image."""
    dx, dy, rho = _split(dr)
    k = op.k
    kr = k * rho
    cos2 = (dx * dx) / (rho * rho)
    bracket = (3.0 / kr**2 + 3j / kr - 1.0) * cos2 + (1.0 - 1j / kr - 1.0 / kr**2)
    return bracket * k * k * np.exp(-1j * kr) / (2.0 * math.pi * rho)


@dataclass
class CouplingMatrix:
    G: np.ndarray
    rho: np.ndarray
    psi: np.ndarray

    @property
    def n(self) -> int:
        return self.G.shape[0]


def build_coupling_matrix(op: OperatingPoint, panel: PanelGeometry, chunk: int | None = None) -> CouplingMatrix:
    """Assemble the N x N interaction matrix (zero diagonal, exactly symmetric).

    Only the upper triangle is evaluated and mirrored.  ``chunk`` bounds the
    number of pairs evaluated per batch; results do not depend on it.
    """
    xy = panel.positions
    n = xy.shape[0]
    G = np.zeros((n, n), dtype=complex)
    rho = np.zeros((n, n))
    psi = np.zeros((n, n))
    if n < 2:
        return CouplingMatrix(G, rho, psi)
    iu, ju = np.triu_indices(n, k=1)
    dr = xy[iu] - xy[ju]
    r = np.hypot(dr[:, 0], dr[:, 1])
    if np.any(r == 0):
        raise SingularityError("duplicate element positions")
    step = len(iu) if chunk is None else max(1, int(chunk))
    vals = np.empty(len(iu), dtype=complex)
    for s in range(0, len(iu), step):
        sl = slice(s, s + step)
        vals[sl] = green_wg(op, panel.height, dr[sl]) + green_fs(op, dr[sl])
    G[iu, ju] = vals
    G[ju, iu] = vals
    rho[iu, ju] = rho[ju, iu] = r
    ang = np.arctan2(dr[:, 1], dr[:, 0])
    psi[iu, ju] = ang
    psi[ju, iu] = np.arctan2(-dr[:, 1], -dr[:, 0])
    return CouplingMatrix(G, rho, psi)


@dataclass
class ExcitationVector:
    h_f: np.ndarray
    current: float = 1.0

    @property
    def h0(self) -> np.ndarray:
        return self.h_f * self.current


def excitation_vector(op: OperatingPoint, panel: PanelGeometry, current: float = 1.0) -> ExcitationVector:
    """Feed coupling ``(jk/4) H2_1(k d_n) s_n`` with ``s_n = (p_y - r_yn) / d_n``."""
    diff = panel.feed[None, :] - panel.positions
    d = np.hypot(diff[:, 0], diff[:, 1])
    if np.any(d == 0):
        raise SingularityError("element collocated with the feed")
    s = diff[:, 1] / d
    k = op.k
    h = (1j * k / 4.0) * np.asarray(hankel2(1, k * d)) * s
    return ExcitationVector(np.asarray(h, dtype=complex).reshape(-1), current)


@dataclass
class DipoleSolution:
    moments: np.ndarray
    exact: bool
    condition: float = math.nan
    contraction: float | None = None
    contractive: bool | None = None
    residual: float = math.nan


def _lu_condition(A):
    lu, piv = linalg.lu_factor(A, check_finite=False)
    anorm = np.linalg.norm(A, 1)
    (gecon,) = linalg.get_lapack_funcs(("gecon",), (lu,))
    rcond, info = gecon(lu, anorm, norm="1")
    cond = math.inf if rcond == 0 else 1.0 / rcond
    return (lu, piv), cond


def solve_dipoles_exact(G, alpha, h_f, condition_cap: float = DEFAULT_CONDITION_CAP) -> DipoleSolution:
    """Solve ``(diag(alpha)^-1 - G) m = h_f``.

    The system is solved in the row-scaled form ``(I - diag(alpha) G) m =
    alpha * h_f``; this has the same solution but its conditioning does not
    blow up merely because some elements are tuned almost off (tiny alpha).
    Raises SolveError (carrying the 1-norm condition estimate of the scaled
    system) when it exceeds ``condition_cap``.
    """
    G = np.asarray(G, dtype=complex)
    alpha = np.asarray(alpha, dtype=complex).reshape(-1)
    h_f = np.asarray(h_f, dtype=complex).reshape(-1)
    if np.any(alpha == 0) or not np.all(np.isfinite(alpha)):
        raise DomainError("polarizabilities must be finite and non-zero")
    A = np.eye(alpha.size) - alpha[:, None] * G
    rhs = alpha * h_f
    factors, cond = _lu_condition(A)
    if not cond < condition_cap:
        raise SolveError(f"dipole system ill-conditioned (cond ~ {cond:.3e})", condition=cond)
    m = linalg.lu_solve(factors, rhs, check_finite=False)
    resid = float(np.linalg.norm(m / alpha - G @ m - h_f))
    return DipoleSolution(m, exact=True, condition=cond, residual=resid)


def neumann_contraction(G, alpha) -> float:
    """Spectral norm of ``G^-1 diag(alpha)^-1``; the series converges when < 1."""
    ainv = 1.0 / np.asarray(alpha, dtype=complex).reshape(-1)
    B = linalg.solve(np.asarray(G, dtype=complex), np.diag(ainv))
    return float(np.linalg.norm(B, 2))


def solve_dipoles_neumann(G, alpha, h_f, inv_alpha=None) -> DipoleSolution:
    """Two-term expansion ``m ~ -(G^-1 + G^-1 diag(alpha)^-1 G^-1) h_f``.

    ``inv_alpha`` may be passed directly (e.g. zeros for the formal
    ``diag(alpha)^-1 -> 0`` limit).
    """
    G = np.asarray(G, dtype=complex)
    h_f = np.asarray(h_f, dtype=complex).reshape(-1)
    if inv_alpha is None:
        inv_alpha = 1.0 / np.asarray(alpha, dtype=complex).reshape(-1)
    inv_alpha = np.asarray(inv_alpha, dtype=complex).reshape(-1)
    factors, cond = _lu_condition(G)
    if not np.isfinite(cond) or cond > 1e15:
        raise SolveError("coupling matrix is singular", condition=cond)
    v = linalg.lu_solve(factors, h_f, check_finite=False)
    m = -(v + linalg.lu_solve(factors, inv_alpha * v, check_finite=False))
    B = linalg.lu_solve(factors, np.diag(inv_alpha), check_finite=False)
    q = float(np.linalg.norm(B, 2))
    return DipoleSolution(m, exact=False, condition=cond, contraction=q, contractive=q < 1.0)


def passivity_limit(op: OperatingPoint, h: float) -> float:
    """Lower bound C on |Im(1/alpha)|: k^3/(3 pi) + k^2/(8 h)."""
    if not h > 0:
        raise DomainError("waveguide height must be positive")
    k = op.k
    return k**3 / (3.0 * math.pi) + k**2 / (8.0 * h)


def max_strength(op: OperatingPoint, h: float, damping):
    """Largest passive resonance strength at resonance, Gamma / (C w)."""
    return np.asarray(damping, dtype=float) / (passivity_limit(op, h) * op.omega)


@dataclass
class PowerAudit:
    h_loc: np.ndarray
    p_sup: np.ndarray
    p_rad: np.ndarray

    @property
    def margin(self) -> np.ndarray:
        return self.p_sup - self.p_rad

    @property
    def ratio(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.p_rad / self.p_sup

    def passes(self, rtol: float = 1e-9) -> bool:
        return bool(np.all(self.p_rad <= self.p_sup * (1 + rtol) + 0.0))


def power_audit(op: OperatingPoint, h: float, alpha, h_loc) -> PowerAudit:
    """Supplied and radiated power of each dipole for a given local field."""
    alpha = np.asarray(alpha, dtype=complex)
    if np.any(alpha == 0):
        raise DomainError("polarizability must be non-zero")
    h2 = np.abs(np.asarray(h_loc, dtype=complex)) ** 2
    w, mu = op.omega, op.mu0
    p_sup = -0.5 * w * mu * alpha.imag * h2
    p_rad = 0.5 * w * mu * np.abs(alpha) ** 2 * h2 * passivity_limit(op, h)
    return PowerAudit(np.asarray(h_loc, dtype=complex), p_sup, p_rad)


def local_fields(alpha, moments):
    """H_loc = m / alpha, element-wise."""
    return np.asarray(moments, dtype=complex) / np.asarray(alpha, dtype=complex)


def dump_complex_csv(path, array):
    """Write a vector or matrix as rows of (row, col, re, im)."""
    arr = np.asarray(array, dtype=complex)
    if arr.ndim == 1:
        arr = arr[:, None]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "re", "im"])
        for (i, j), v in np.ndenumerate(arr):
            w.writerow([i, j, repr(float(v.real)), repr(float(v.imag))])

"""Bistatic sensing channel: focusing vectors, round-trip channel, pilots.

The TX panel lies in the z = 0 plane.  For an element at r_n and a point p,
the dominant z-component of the radiated field is proportional to
``sin(theta_e) sin(theta_a) = (p_y - r_yn) / R_n``; the ratio form is used
everywhere so broadside points (zero horizontal offset) give an exact null
instead of 0/0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .em_core import LorentzianParams, OperatingPoint, PanelGeometry
from .errors import ConfigError, DomainError, SingularityError


def dbm_to_watt(dbm):
    return 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)


def watt_to_dbm(w):
    return 10.0 * np.log10(np.asarray(w, dtype=float)) + 30.0


@dataclass(frozen=True)
class Target:
    position: np.ndarray
    beta: complex = 1.0 + 0j

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "beta", complex(self.beta))
        if p[2] == 0:
            raise DomainError("target must lie off the panel plane (z != 0)")


def dft_combiner(m: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Unitary M x M DFT matrix, columns randomly permuted when ``rng`` is given."""
    F = np.fft.fft(np.eye(m)) / math.sqrt(m)
    if rng is not None:
        F = F[:, rng.permutation(m)]
    return F


@dataclass
class RxArray:
    """Half-wavelength-spaced RX array centred at ``center``.

    ``layout="planar"`` places the antennas on a near-square grid spanned by
    ``axis`` and ``axis2`` (ceil(sqrt(M)) rows, filled row-major);
    ``layout="linear"`` places them on a line along ``axis``.  A linear array
    is blind to rotations of the target about its own axis, so only the planar
    layout yields a finite PEB on its own.
    """

    center: np.ndarray
    n_antennas: int
    wavelength: float
    layout: str = "planar"
    axis: tuple = (0.0, 1.0, 0.0)
    axis2: tuple = (0.0, 0.0, 1.0)
    combiner: np.ndarray | None = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        if self.layout not in ("planar", "linear"):
            raise ConfigError(f"unknown RX layout {self.layout!r}")
        ax = np.asarray(self.axis, dtype=float).reshape(3)
        ax2 = np.asarray(self.axis2, dtype=float).reshape(3)
        self.axis = tuple(ax / np.linalg.norm(ax))
        self.axis2 = tuple(ax2 / np.linalg.norm(ax2))
        if self.combiner is None:
            self.combiner = np.eye(self.n_antennas, dtype=complex)
        self.combiner = np.asarray(self.combiner, dtype=complex)

    @property
    def spacing(self) -> float:
        return self.wavelength / 2.0

    @property
    def grid_shape(self) -> tuple:
        if self.layout == "linear":
            return (1, self.n_antennas)
        rows = math.ceil(math.sqrt(self.n_antennas))
        return (rows, math.ceil(self.n_antennas / rows))

    @property
    def positions(self) -> np.ndarray:
        rows, cols = self.grid_shape
        idx = np.arange(self.n_antennas)
        r, c = idx // cols, idx % cols
        u = (c - (cols - 1) / 2.0) * self.spacing
        v = (r - (rows - 1) / 2.0) * self.spacing
        return (
            self.center[None, :]
            + u[:, None] * np.asarray(self.axis)[None, :]
            + v[:, None] * np.asarray(self.axis2)[None, :]
        )

    def validate(self, atol: float = 1e-10):
        W = self.combiner
        if W.shape != (self.n_antennas, self.n_antennas):
            raise ConfigError("combiner must be M x M")
        if np.max(np.abs(W.conj().T @ W - np.eye(self.n_antennas))) > atol:
            raise ConfigError("combiner must be unitary (noise is assumed white after combining)")
        if self.layout == "planar" and abs(np.dot(self.axis, self.axis2)) > 1e-12:
            raise ConfigError("planar RX axes must be orthogonal")
        return self


@dataclass
class Scenario:
    op: OperatingPoint
    panel: PanelGeometry
    elements: LorentzianParams
    targets: list
    rx: RxArray
    noise_var: float
    n_pilots: int
    tx_power: float

    @property
    def n_targets(self) -> int:
        return len(self.targets)

    @property
    def fim_scale(self) -> float:
        """Common factor ``2 T P_TX / sigma^2`` of every FIM entry."""
        return 2.0 * self.n_pilots * self.tx_power / self.noise_var

    @property
    def betas(self) -> np.ndarray:
        return np.array([t.beta for t in self.targets], dtype=complex)

    def validate(self):
        self.panel.validate()
        self.rx.validate()
        U = self.n_targets
        if U < 1:
            raise ConfigError("at least one target is required")
        if U > min(self.panel.n_elements, self.rx.n_antennas):
            raise ConfigError("number of targets must not exceed min(N, M)")
        if not self.noise_var > 0:
            raise ConfigError("noise variance must be positive")
        if self.n_pilots < 1:
            raise ConfigError("at least one pilot is required")
        if not self.tx_power > 0:
            raise ConfigError("transmit power must be positive")
        return self

    def with_(self, **changes) -> "Scenario":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass
class FocusingVector:
    values: np.ndarray
    target: Target
    geometry: dict = field(default_factory=dict)
    gradient: np.ndarray | None = None  # (len, 3) d values / d target position


def _tx_terms(op: OperatingPoint, panel: PanelGeometry, p):
    p = np.asarray(p, dtype=float).reshape(3)
    d = p[None, :] - panel.positions3
    R = np.linalg.norm(d, axis=1)
    if np.any(R == 0):
        raise SingularityError("target coincides with a metasurface element")
    dc = p - panel.center3
    Ru = float(np.linalg.norm(dc))
    amp = -op.k**2 * op.eta / (2.0 * math.pi * Ru)
    phase = np.exp(1j * op.k * R)
    a = amp * (d[:, 1] / R) * phase
    return p, d, R, dc, Ru, amp, phase, a


def tx_response(op: OperatingPoint, panel: PanelGeometry, p):
    """TX focusing vector at ``p`` and its (N, 3) gradient w.r.t. ``p``."""
    p, d, R, dc, Ru, amp, phase, a = _tx_terms(op, panel, p)
    k = op.k
    grad = a[:, None] * (-dc[None, :] / Ru**2 + (1j * k / R - 1.0 / R**2)[:, None] * d)
    grad[:, 1] += amp * phase / R
    return a, grad


def tx_focusing_vector(op: OperatingPoint, panel: PanelGeometry, target: Target) -> FocusingVector:
    p, d, R, dc, Ru, amp, phase, a = _tx_terms(op, panel, target.position)
    _, grad = tx_response(op, panel, p)
    rho = np.hypot(d[:, 0], d[:, 1])
    geom = {
        "R_center": Ru,
        "R": R,
        "theta_e": np.arccos(np.clip(d[:, 2] / R, -1.0, 1.0)),
        "theta_a": np.arctan2(d[:, 1], d[:, 0]),
        "rho_xy": rho,
    }
    return FocusingVector(a, target, geom, grad)


def rx_response(op: OperatingPoint, rx: RxArray, p):
    """RX focusing vector ``exp(jk B_m) / B_u`` at ``p`` and its (M, 3) gradient."""
    p = np.asarray(p, dtype=float).reshape(3)
    d = p[None, :] - rx.positions
    B = np.linalg.norm(d, axis=1)
    if np.any(B == 0):
        raise SingularityError("target coincides with an RX antenna")
    dc = p - rx.center
    Bu = float(np.linalg.norm(dc))
    if Bu == 0:
        raise SingularityError("target at the RX array centre")
    a = np.exp(1j * op.k * B) / Bu
    grad = a[:, None] * (1j * op.k * d / B[:, None] - dc[None, :] / Bu**2)
    return a, grad


def rx_focusing_vector(op: OperatingPoint, rx: RxArray, target: Target) -> FocusingVector:
    p = target.position
    a, grad = rx_response(op, rx, p)
    d = p[None, :] - rx.positions
    B = np.linalg.norm(d, axis=1)
    geom = {
        "B_center": float(np.linalg.norm(p - rx.center)),
        "B": B,
        "psi_e": np.arccos(np.clip(d[:, 2] / B, -1.0, 1.0)),
        "psi_a": np.arctan2(d[:, 1], d[:, 0]),
    }
    return FocusingVector(a, target, geom, grad)


def round_trip_channel(tx_vectors, rx_vectors, betas) -> np.ndarray:
    """H_R = sum_u beta_u a_RX(p_u) a_TX(p_u)^H, an M x N matrix."""
    tx = np.column_stack([np.asarray(getattr(v, "values", v)) for v in tx_vectors])
    rx = np.column_stack([np.asarray(getattr(v, "values", v)) for v in rx_vectors])
    betas = np.asarray(betas, dtype=complex).reshape(-1)
    if not (tx.shape[1] == rx.shape[1] == betas.size):
        raise DomainError("focusing vectors and reflection coefficients disagree in U")
    return (rx * betas[None, :]) @ tx.conj().T


def scenario_channel(sc: Scenario) -> np.ndarray:
    tx = [tx_response(sc.op, sc.panel, t.position)[0] for t in sc.targets]
    rx = [rx_response(sc.op, sc.rx, t.position)[0] for t in sc.targets]
    return round_trip_channel(tx, rx, sc.betas)


def mean_response(W, H_R, m_bar) -> np.ndarray:
    """Noiseless combined response mu = W^H H_R m_bar."""
    return np.asarray(W).conj().T @ (np.asarray(H_R) @ np.asarray(m_bar))


def pilot_sequence(n_pilots: int, tx_power: float) -> np.ndarray:
    """Constant-modulus pilots with |i_t|^2 = P_TX."""
    return np.full(n_pilots, math.sqrt(tx_power), dtype=complex)


def simulate_received(sc: Scenario, m_bar, seed) -> np.ndarray:
    """Draw one M x T block of received pilots, Y = mu i^T + N."""
    mu = mean_response(sc.rx.combiner, scenario_channel(sc), m_bar)
    pilots = pilot_sequence(sc.n_pilots, sc.tx_power)
    rng = np.random.default_rng(seed)
    shape = (mu.size, sc.n_pilots)
    noise = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * math.sqrt(sc.noise_var / 2.0)
    return np.outer(mu, pilots) + noise

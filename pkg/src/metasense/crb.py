"""Fisher information for target locations and the position error bound.

Location parameters are ordered ``[p_1, ..., p_U, Re(beta), Im(beta)]``
(3U coordinates followed by 2U reflection components).  Each FIM entry is

    J[i, j] = (2 T P_TX / sigma^2) Re{ dmu_i^H dmu_j },   mu = W^H H_R m_bar.

Three routes compute it: ``location_fim`` differentiates mu directly,
``chain_rule_fim_oracle`` goes through the per-element channel parameters and
a Jacobian, and ``finite_difference_fim`` uses central differences of mu.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .channel import Scenario, mean_response, round_trip_channel, rx_response, tx_response
from .errors import DomainError, UnobservableError

ORACLE_MAX_PARAMS = 5000
PIVOT_RTOL = 1e-12


@dataclass
class FimBlocks:
    pp: np.ndarray
    pb: np.ndarray
    bb: np.ndarray

    @classmethod
    def from_full(cls, J, n_targets):
        J = np.asarray(J, dtype=float)
        J = 0.5 * (J + J.T)
        k = 3 * n_targets
        return cls(J[:k, :k].copy(), J[:k, k:].copy(), J[k:, k:].copy())

    @property
    def full(self) -> np.ndarray:
        return np.block([[self.pp, self.pb], [self.pb.T, self.bb]])

    @property
    def n_targets(self) -> int:
        return self.pp.shape[0] // 3

    def scaled(self, s) -> "FimBlocks":
        return FimBlocks(self.pp * s, self.pb * s, self.bb * s)

    def __add__(self, other):
        return FimBlocks(self.pp + other.pp, self.pb + other.pb, self.bb + other.bb)


@dataclass
class PebValue:
    peb: float
    condition: float
    valid: bool = True


def chain_rule_param_count(n_elements, n_antennas, n_targets) -> int:
    """Length of the channel-parameter vector, U (3N + 3M + 2)."""
    return n_targets * (3 * n_elements + 3 * n_antennas + 2)


def _responses(sc: Scenario):
    out = []
    for t in sc.targets:
        a_tx, g_tx = tx_response(sc.op, sc.panel, t.position)
        a_rx, g_rx = rx_response(sc.op, sc.rx, t.position)
        out.append((a_tx, g_tx, a_rx, g_rx))
    return out


def mu_jacobian(sc: Scenario, m_bar) -> np.ndarray:
    """d mu / d location-parameters as an (M, 5U) complex matrix."""
    m_bar = np.asarray(m_bar, dtype=complex)
    U = sc.n_targets
    Wh = sc.rx.combiner.conj().T
    D = np.zeros((sc.rx.n_antennas, 5 * U), dtype=complex)
    for u, (a_tx, g_tx, a_rx, g_rx) in enumerate(_responses(sc)):
        beta = sc.targets[u].beta
        s = np.vdot(a_tx, m_bar)  # a_tx^H m
        ds = g_tx.conj().T @ m_bar
        for d in range(3):
            D[:, 3 * u + d] = beta * (g_rx[:, d] * s + a_rx * ds[d])
        D[:, 3 * U + u] = a_rx * s
        D[:, 4 * U + u] = 1j * a_rx * s
    return Wh @ D


def location_fim(sc: Scenario, m_bar) -> FimBlocks:
    Dmu = mu_jacobian(sc, m_bar)
    J = sc.fim_scale * np.real(Dmu.conj().T @ Dmu)
    return FimBlocks.from_full(J, sc.n_targets)


def finite_difference_fim(sc: Scenario, m_bar, step=None) -> FimBlocks:
    """FIM from central differences of mu (position step defaults to 1e-4 wavelengths)."""
    if step is None:
        step = 1e-4 * sc.op.wavelength
    m_bar = np.asarray(m_bar, dtype=complex)
    U = sc.n_targets
    W = sc.rx.combiner

    def mu_at(positions, betas):
        tx = [tx_response(sc.op, sc.panel, p)[0] for p in positions]
        rx = [rx_response(sc.op, sc.rx, p)[0] for p in positions]
        return mean_response(W, round_trip_channel(tx, rx, betas), m_bar)

    pos = np.array([t.position for t in sc.targets])
    betas = sc.betas
    cols = []
    for u in range(U):
        for d in range(3):
            hi, lo = pos.copy(), pos.copy()
            hi[u, d] += step
            lo[u, d] -= step
            cols.append((mu_at(hi, betas) - mu_at(lo, betas)) / (2 * step))
    for part in (1.0, 1j):
        for u in range(U):
            e = np.zeros(U, dtype=complex)
            e[u] = part
            cols.append((mu_at(pos, betas + e) - mu_at(pos, betas - e)) / 2.0)
    Dmu = np.column_stack(cols)
    return FimBlocks.from_full(sc.fim_scale * np.real(Dmu.conj().T @ Dmu), U)


def _unit_rows(d, r):
    return d / r[:, None]


def chain_rule_fim_oracle(sc: Scenario, m_bar, return_full=False):
    """Location FIM via the channel-parameter FIM and its Jacobian, T^T J T.

    The parameter vector is ``[theta_a, theta_e, psi_a, psi_e, R, B, beta]``
    (entries ordered element-fastest, then target) followed by the U TX and
    U RX centre distances, which the focusing-vector amplitudes depend on.
    """
    N, M, U = sc.panel.n_elements, sc.rx.n_antennas, sc.n_targets
    L = chain_rule_param_count(N, M, U)
    if L + 2 * U > ORACLE_MAX_PARAMS:
        raise DomainError(f"oracle limited to {ORACLE_MAX_PARAMS} parameters, need {L + 2 * U}")
    m_bar = np.asarray(m_bar, dtype=complex)
    k, eta = sc.op.k, sc.op.eta
    Wh = sc.rx.combiner.conj().T
    NU, MU = N * U, M * U
    off = {
        "ta": 0, "te": NU, "pa": 2 * NU, "pe": 2 * NU + MU,
        "R": 2 * NU + 2 * MU, "B": 3 * NU + 2 * MU, "beta": 3 * NU + 3 * MU,
        "Ru": L, "Bu": L + U,
    }
    Lx = L + 2 * U
    Dmu = np.zeros((M, Lx), dtype=complex)
    T = np.zeros((Lx, 5 * U))
    r_tx = sc.panel.positions3
    c_tx = sc.panel.center3
    q_rx = sc.rx.positions
    for u, tgt in enumerate(sc.targets):
        p, beta = tgt.position, tgt.beta
        d = p[None, :] - r_tx
        R = np.linalg.norm(d, axis=1)
        rho = np.hypot(d[:, 0], d[:, 1])
        if np.any(rho == 0) or np.any(R == 0):
            raise DomainError("degenerate TX geometry for the angle parameterisation")
        te = np.arccos(d[:, 2] / R)
        ta = np.arctan2(d[:, 1], d[:, 0])
        Ru = np.linalg.norm(p - c_tx)
        amp = -k * k * eta / (2 * math.pi * Ru)
        ph = np.exp(1j * k * R)
        a_tx = amp * np.sin(te) * np.sin(ta) * ph

        e = p[None, :] - q_rx
        B = np.linalg.norm(e, axis=1)
        Bu = np.linalg.norm(p - sc.rx.center)
        a_rx = np.exp(1j * k * B) / Bu
        s = np.vdot(a_tx, m_bar)

        # d mu / d(channel parameter); a_tx enters through a_tx^H m
        dA_ta = amp * np.sin(te) * np.cos(ta) * ph
        dA_te = amp * np.cos(te) * np.sin(ta) * ph
        dA_R = 1j * k * a_tx
        Dmu[:, off["ta"] + u * N + np.arange(N)] = Wh @ (beta * np.outer(a_rx, dA_ta.conj() * m_bar))
        Dmu[:, off["te"] + u * N + np.arange(N)] = Wh @ (beta * np.outer(a_rx, dA_te.conj() * m_bar))
        Dmu[:, off["R"] + u * N + np.arange(N)] = Wh @ (beta * np.outer(a_rx, dA_R.conj() * m_bar))
        Dmu[:, off["B"] + u * M + np.arange(M)] = Wh @ (beta * s * np.diag(1j * k * a_rx))
        Dmu[:, off["beta"] + u] = Wh @ (a_rx * s)
        Dmu[:, off["beta"] + U + u] = Wh @ (1j * a_rx * s)
        Dmu[:, off["Ru"] + u] = Wh @ (beta * a_rx * (-s / Ru))
        Dmu[:, off["Bu"] + u] = Wh @ (beta * (-a_rx / Bu) * s)
        # RX angles do not enter the isotropic RX response: zero columns.

        # Jacobian rows, d(channel parameter) / d p_u
        cols = slice(3 * u, 3 * u + 3)
        dta = np.column_stack([-d[:, 1], d[:, 0], np.zeros(N)]) / (rho**2)[:, None]
        dte = -np.array([0.0, 0.0, 1.0])[None, :] / rho[:, None] + (d[:, 2] / (rho * R**2))[:, None] * d
        T[off["ta"] + u * N + np.arange(N), cols] = dta
        T[off["te"] + u * N + np.arange(N), cols] = dte
        T[off["R"] + u * N + np.arange(N), cols] = _unit_rows(d, R)
        rho_e = np.hypot(e[:, 0], e[:, 1])
        if np.any(rho_e == 0):
            raise DomainError("degenerate RX geometry for the angle parameterisation")
        T[off["pa"] + u * M + np.arange(M), cols] = np.column_stack([-e[:, 1], e[:, 0], np.zeros(M)]) / (rho_e**2)[:, None]
        T[off["pe"] + u * M + np.arange(M), cols] = (
            -np.array([0.0, 0.0, 1.0])[None, :] / rho_e[:, None] + (e[:, 2] / (rho_e * B**2))[:, None] * e
        )
        T[off["B"] + u * M + np.arange(M), cols] = _unit_rows(e, B)
        T[off["Ru"] + u, cols] = (p - c_tx) / Ru
        T[off["Bu"] + u, cols] = (p - sc.rx.center) / Bu
        T[off["beta"] + u, 3 * U + u] = 1.0
        T[off["beta"] + U + u, 4 * U + u] = 1.0

    J = sc.fim_scale * np.real(Dmu.conj().T @ Dmu)
    Jt = T.T @ J @ T
    blocks = FimBlocks.from_full(Jt, U)
    if return_full:
        return blocks, J, T, off
    return blocks


@dataclass
class FimKernel:
    """Low-rank factors ``D_i = R_i T_i^H`` of d H_R / d(location parameter i).

    ``groups[i]`` lists the factor columns belonging to parameter i.
    """

    R: np.ndarray  # (M, K)
    T: np.ndarray  # (N, K)
    groups: list
    scale: float
    Q: np.ndarray  # R^H W W^H R

    def fim(self, Mcov) -> FimBlocks:
        S = self.T.conj().T @ Mcov @ self.T
        return self._assemble(S)

    def fim_rank_one(self, m_bar) -> FimBlocks:
        g = self.T.conj().T @ np.asarray(m_bar, dtype=complex)
        return self._assemble(np.outer(g, g.conj()))

    def _assemble(self, S):
        P = len(self.groups)
        J = np.zeros((P, P))
        for i, gi in enumerate(self.groups):
            for j, gj in enumerate(self.groups):
                J[i, j] = np.real(np.sum(self.Q[np.ix_(gi, gj)] * S[np.ix_(gj, gi)].T))
        return FimBlocks.from_full(self.scale * J, P // 5)

    def projected(self, basis) -> list:
        """For M = basis Lam basis^H return K_ij with J_ij = scale Re Tr(Lam K_ij)."""
        G = np.asarray(basis).conj().T @ self.T  # (r, K)
        P = len(self.groups)
        out = [[None] * P for _ in range(P)]
        for i, gi in enumerate(self.groups):
            for j, gj in enumerate(self.groups):
                q = self.Q[np.ix_(gi, gj)]
                out[i][j] = G[:, gi] @ q @ G[:, gj].conj().T
        return out


def _deflate(vec, ref):
    """Remove the component of ``vec`` along ``ref``."""
    return vec - ref * (np.vdot(ref, vec) / np.vdot(ref, ref))


def fim_kernel(sc: Scenario, deflate: bool = False) -> FimKernel:
    """Low-rank derivative factors of the round-trip channel.

    With ``deflate=True`` each derivative vector is replaced by its part
    orthogonal to the focusing vector of the same target.  The removed parts
    are complex multiples of the reflection-coefficient directions, so this
    is a reparameterisation of beta that leaves the position Schur
    complement unchanged for every covariance M, while the blocks
    themselves differ from ``location_fim``.
    """
    U = sc.n_targets
    Rc, Tc, groups = [], [], [[] for _ in range(5 * U)]
    col = 0
    W = sc.rx.combiner
    for u, (a_tx, g_tx, a_rx, g_rx) in enumerate(_responses(sc)):
        beta = sc.targets[u].beta
        for d in range(3):
            drx, dtx = g_rx[:, d], g_tx[:, d]
            if deflate:
                drx = _deflate(drx, a_rx)
                dtx = _deflate(dtx, a_tx)
            Rc += [beta * drx, beta * a_rx]
            Tc += [a_tx, dtx]
            groups[3 * u + d] = [col, col + 1]
            col += 2
        Rc.append(a_rx)
        Tc.append(a_tx)
        groups[3 * U + u] = [col]
        col += 1
        Rc.append(1j * a_rx)
        Tc.append(a_tx)
        groups[4 * U + u] = [col]
        col += 1
    R = np.column_stack(Rc)
    T = np.column_stack(Tc)
    WR = W.conj().T @ R
    Q = WR.conj().T @ WR
    return FimKernel(R, T, groups, sc.fim_scale, Q)


def fim_linear_in_M(sc: Scenario, Mcov, kernel: FimKernel | None = None) -> FimBlocks:
    """Location FIM as a linear function of the moment covariance M = E[m m^H]."""
    Mcov = np.asarray(Mcov, dtype=complex)
    if Mcov.shape != (sc.panel.n_elements,) * 2:
        raise DomainError("moment covariance must be N x N")
    scale = max(np.max(np.abs(Mcov)), 1e-300)
    if np.max(np.abs(Mcov - Mcov.conj().T)) > 1e-10 * scale:
        raise DomainError("moment covariance must be Hermitian")
    if kernel is None:
        kernel = fim_kernel(sc)
    return kernel.fim(Mcov)


def _psd_inverse(A, what):
    A = 0.5 * (A + A.T)
    w = np.linalg.eigvalsh(A)
    top = max(abs(w[-1]), 1e-300)
    if not w[0] > PIVOT_RTOL * top:
        raise UnobservableError(f"{what} is singular or indefinite (eigenvalues {w[0]:.3e} .. {w[-1]:.3e})", eigenvalues=w)
    c = linalg.cho_factor(A, lower=True)
    return linalg.cho_solve(c, np.eye(A.shape[0])), top / w[0]


def effective_position_fim(blocks: FimBlocks) -> np.ndarray:
    """Schur complement J_pp - J_pb J_bb^-1 J_pb^T."""
    bb_inv, _ = _psd_inverse(blocks.bb, "reflection-coefficient FIM block")
    S = blocks.pp - blocks.pb @ bb_inv @ blocks.pb.T
    return 0.5 * (S + S.T)


def peb(blocks: FimBlocks) -> PebValue:
    """Position error bound in metres."""
    S = effective_position_fim(blocks)
    S_inv, cond = _psd_inverse(S, "effective position FIM")
    return PebValue(float(math.sqrt(np.trace(S_inv))), cond, True)


def effective_position_fim_rank_one(sc: Scenario, m_bar) -> np.ndarray:
    """Schur complement for a single moment vector, formed by projection.

    The reflection-coefficient directions are removed from the stacked real
    Jacobian with a (twice applied) QR projection before the Gram product,
    which avoids the cancellation of ``J_pp - J_pb J_bb^-1 J_pb^T`` when the
    retained information is many orders below J_pp.
    """
    D = mu_jacobian(sc, m_bar)
    X = np.vstack([D.real, D.imag])
    k = 3 * sc.n_targets
    Xp, Xb = X[:, :k], X[:, k:]
    Q, Rb = np.linalg.qr(Xb)
    d = np.abs(np.diag(Rb))
    if d.size == 0 or d.min() <= PIVOT_RTOL * d.max():
        raise UnobservableError("reflection-coefficient directions are degenerate", eigenvalues=d)
    for _ in range(2):
        Xp = Xp - Q @ (Q.T @ Xp)
    S = sc.fim_scale * (Xp.T @ Xp)
    return 0.5 * (S + S.T)


def peb_of_moments(sc: Scenario, m_bar) -> float:
    """PEB of the array driven by ``m_bar`` (numerically stable route)."""
    S = effective_position_fim_rank_one(sc, m_bar)
    S_inv, _ = _psd_inverse(S, "effective position FIM")
    return float(math.sqrt(np.trace(S_inv)))

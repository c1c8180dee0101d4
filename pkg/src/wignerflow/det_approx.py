"""Deterministic approximations and two-body stability machinery.

Spectral pairs nu = (z, D) carry their MDE solution; from two of them the
module builds the stability quantities beta, beta*, the linear term, the
control parameter gamma_hat, the (inverse) stability operator, deterministic
approximations of two- and three-resolvent chains, and the regularization of
observables against the unstable direction V.

Everything here is a pure function of immutable inputs.  When both
deformations are diagonal in the identity basis, traces reduce to vector
contractions; otherwise full matrices are formed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matrix_core import operator_norm
from .mde import Deformation, MdeSolution, shares_basis, solve_mde

REAL_AXIS_LIFT = 1e-7
STABILITY_FLOOR = 1e-13
DEFAULT_DELTA = 0.1


class SingularStabilityError(ArithmeticError):
    """The two-body stability operator is numerically singular (beta ~ 0)."""


@dataclass(frozen=True)
class SpectralPair:
    """A spectral parameter together with a deformation and its MDE solution."""

    z: complex
    deformation: Deformation
    sol: MdeSolution

    @classmethod
    def solve(cls, D: Deformation, z: complex, tol: float = 1e-13) -> "SpectralPair":
        z = complex(z)
        return cls(z=z, deformation=D, sol=solve_mde(D, z, tol=tol))

    @property
    def eta(self) -> float:
        return abs(self.z.imag)

    @property
    def energy(self) -> float:
        return self.z.real

    @property
    def rho(self) -> float:
        return self.sol.rho

    @property
    def m(self) -> complex:
        return self.sol.m

    def conjugate(self) -> "SpectralPair":
        return SpectralPair(z=np.conj(self.z), deformation=self.deformation,
                            sol=self.sol.conjugate())

    def m_matrix(self) -> np.ndarray:
        """Full M(z) in the lab frame."""
        basis = self.deformation.basis
        if basis is None:
            return np.diag(self.sol.diag)
        return (basis * self.sol.diag) @ basis.conj().T


def pair_at_energy(D: Deformation, E: float, eta: float = REAL_AXIS_LIFT,
                   sign: int = 1, tol: float = 1e-13) -> SpectralPair:
    """Spectral pair just off the real axis, for real-energy evaluations."""
    return SpectralPair.solve(D, complex(E, sign * eta), tol=tol)


def solve_pairs(D: Deformation, zs, tol: float = 1e-13) -> list:
    """Solve many spectral pairs for one deformation in a single continuation."""
    from .mde import MdeSolution, solve_mde_many

    zs = np.atleast_1d(np.asarray(zs, dtype=complex))
    m, res = solve_mde_many(D, zs, tol=tol)
    out = []
    for z, mv, rv in zip(zs, m, res):
        diag = 1.0 / (D.eigenvalues - z - mv)
        sol = MdeSolution(z=complex(z), m=complex(mv), diag=diag,
                          rho=abs(mv.imag) / np.pi, residual=float(rv))
        out.append(SpectralPair(z=complex(z), deformation=D, sol=sol))
    return out


# ---------------------------------------------------------------------------
# Trace contractions


def _diag_frame(nu1: SpectralPair, nu2: SpectralPair) -> bool:
    d1, d2 = nu1.deformation, nu2.deformation
    return d1.basis is None and d2.basis is None and d1.dim == d2.dim


def trace_prod(nu1: SpectralPair, nu2: SpectralPair) -> complex:
    """<M1 M2>."""
    if _diag_frame(nu1, nu2):
        return complex(np.mean(nu1.sol.diag * nu2.sol.diag))
    M1 = nu1.m_matrix()
    M2 = nu2.m_matrix()
    n = M1.shape[0]
    return complex(np.sum(M1 * M2.T)) / n


def trace_weighted(nu1: SpectralPair, nu2: SpectralPair, weight: np.ndarray) -> complex:
    """<M1 X M2> for X diagonal (in the shared frame) with diagonal ``weight``."""
    if _diag_frame(nu1, nu2):
        return complex(np.mean(nu1.sol.diag * weight * nu2.sol.diag))
    M1 = nu1.m_matrix()
    M2 = nu2.m_matrix()
    n = M1.shape[0]
    return complex(np.sum(M1 * (weight[:, None] * M2).T)) / n


def deformation_gap_sq(D1: Deformation, D2: Deformation) -> float:
    """Delta^2 = <(D1 - D2)^2>."""
    if shares_basis(D1, D2):
        return float(np.mean((D1.eigenvalues - D2.eigenvalues) ** 2))
    diff = D1.matrix() - D2.matrix()
    return float(np.real(np.trace(diff @ diff)) / diff.shape[0])


def _gap_weight(nu1: SpectralPair, nu2: SpectralPair) -> np.ndarray | None:
    """Entrywise D1 - D2 when the deformations live in a shared diagonal frame."""
    d1, d2 = nu1.deformation, nu2.deformation
    if d1.basis is None and d2.basis is None and d1.dim == d2.dim:
        return d1.eigenvalues - d2.eigenvalues
    return None


def trace_gap_prod(nu1: SpectralPair, nu2: SpectralPair) -> complex:
    """<M1 (D1 - D2) M2>."""
    w = _gap_weight(nu1, nu2)
    if w is not None:
        return complex(np.mean(nu1.sol.diag * w * nu2.sol.diag))
    M1 = nu1.m_matrix()
    M2 = nu2.m_matrix()
    diff = nu1.deformation.matrix() - nu2.deformation.matrix()
    n = M1.shape[0]
    return complex(np.trace(M1 @ diff @ M2)) / n


# ---------------------------------------------------------------------------
# Stability scalars


def beta(nu1: SpectralPair, nu2: SpectralPair) -> float:
    """|1 - <M1 M2>|, the smallest eigenvalue modulus of the stability operator."""
    return abs(1.0 - trace_prod(nu1, nu2))


def beta_star(nu1: SpectralPair, nu2: SpectralPair) -> float:
    """min of beta over the two conjugation choices of the second argument."""
    return min(beta(nu1, nu2), beta(nu1, nu2.conjugate()))


def linear_term(nu1: SpectralPair, nu2: SpectralPair) -> float:
    """Renormalized spectral-parameter distance, capped at 1.

    Branches on the relative sign of the imaginary parts: for opposite signs
    the plain product <M1 M2> appears, for equal signs the conjugated one.
    """
    s = np.sign(nu1.z.imag * nu2.z.imag)
    if s == 0:
        raise ValueError("linear_term needs Im z != 0; lift real energies by i*1e-7")
    if s < 0:
        partner = nu2
        zdiff = nu1.z - nu2.z
    else:
        partner = nu2.conjugate()
        zdiff = nu1.z - np.conj(nu2.z)
    denom = trace_prod(nu1, partner)
    if abs(denom) < 1e-14:
        return 1.0
    num = trace_gap_prod(nu1, partner)
    return min(abs(zdiff - num / denom), 1.0)


@dataclass(frozen=True)
class ControlParams:
    """All scalar control quantities attached to a pair of spectral pairs."""

    beta: float
    beta_star: float
    delta2: float
    lt: float
    e_diff2: float
    eta_rho_1: float
    eta_rho_2: float
    gamma_hat: float
    eta_star: float
    ell: float

    def to_json(self) -> dict:
        return {k: float(getattr(self, k)) for k in
                ("beta", "beta_star", "delta2", "lt", "e_diff2",
                 "eta_rho_1", "eta_rho_2", "gamma_hat", "eta_star", "ell")}


def control_params(nu1: SpectralPair, nu2: SpectralPair) -> ControlParams:
    """Assemble beta, beta*, Delta^2, LT, gamma_hat, eta* and ell."""
    d2 = deformation_gap_sq(nu1.deformation, nu2.deformation)
    lt = linear_term(nu1, nu2)
    e_diff2 = min(abs(nu1.energy - nu2.energy) ** 2, 1.0)
    er1 = min(nu1.eta / nu1.rho, 1.0) if nu1.rho > 0 else 1.0
    er2 = min(nu2.eta / nu2.rho, 1.0) if nu2.rho > 0 else 1.0
    gamma = d2 + lt + e_diff2 + er1 + er2
    return ControlParams(
        beta=beta(nu1, nu2),
        beta_star=beta_star(nu1, nu2),
        delta2=d2,
        lt=lt,
        e_diff2=e_diff2,
        eta_rho_1=er1,
        eta_rho_2=er2,
        gamma_hat=gamma,
        eta_star=min(nu1.eta, nu2.eta, 1.0),
        ell=min(nu1.eta * nu1.rho, nu2.eta * nu2.rho),
    )


def gamma_hat(nu1: SpectralPair, nu2: SpectralPair) -> float:
    return control_params(nu1, nu2).gamma_hat


# ---------------------------------------------------------------------------
# Stability operator and deterministic chain approximations


def stability_inverse(nu1: SpectralPair, nu2: SpectralPair, X: np.ndarray,
                      check: bool = True) -> np.ndarray:
    """Exact inverse of B12[.] = 1 - M1 <.> M2 applied to X."""
    c = trace_prod(nu1, nu2)
    b = abs(1.0 - c)
    if b <= STABILITY_FLOOR:
        raise SingularStabilityError(f"stability operator singular: beta = {b:.3e}")
    X = np.asarray(X, dtype=complex)
    n = X.shape[0]
    M1 = nu1.m_matrix()
    M2 = nu2.m_matrix()
    tr_x = complex(np.trace(X)) / n
    result = X + (tr_x / (1.0 - c)) * (M1 @ M2)
    if check:
        tr_r = complex(np.trace(result)) / n
        back = result - tr_r * (M1 @ M2)
        scale = max(float(np.max(np.abs(X))), 1e-300)
        err = float(np.max(np.abs(back - X))) / scale
        if err > 1e-10:
            raise SingularStabilityError(
                f"stability inverse round-trip error {err:.3e} (beta = {b:.3e})")
    return result


def m2_det(nu1: SpectralPair, nu2: SpectralPair, A: np.ndarray) -> np.ndarray:
    """Deterministic approximation of G1 A G2:  B12^{-1}[M1 A M2]."""
    c = trace_prod(nu1, nu2)
    if abs(1.0 - c) <= STABILITY_FLOOR:
        raise SingularStabilityError(f"stability operator singular: beta = {abs(1-c):.3e}")
    M1 = nu1.m_matrix()
    M2 = nu2.m_matrix()
    core = M1 @ np.asarray(A, dtype=complex) @ M2
    n = core.shape[0]
    tr = complex(np.trace(core)) / n
    return core + (tr / (1.0 - c)) * (M1 @ M2)


def m2_trace(nu1: SpectralPair, nu2: SpectralPair) -> complex:
    """<M^I_{12}> = <M1 M2> / (1 - <M1 M2>), the trace of the identity chain."""
    c = trace_prod(nu1, nu2)
    if abs(1.0 - c) <= STABILITY_FLOOR:
        raise SingularStabilityError(f"stability operator singular: beta = {abs(1-c):.3e}")
    return c / (1.0 - c)


def chain_trace(nu1: SpectralPair, nu2: SpectralPair, B1: np.ndarray,
                B2: np.ndarray | None = None) -> complex:
    """<M1 B1 M2 B2> (B2 = I when None) without forming the chain product.

    1-D observables are read as diagonal matrices.  In the shared diagonal
    frame Tr(M1 B1 M2 B2) = sum_{kl} g1_k (B1)_{kl} g2_l (B2)_{lk}, which
    collapses further whenever an observable is diagonal.
    """
    B1 = np.asarray(B1, dtype=complex)
    B2a = None if B2 is None else np.asarray(B2, dtype=complex)
    if _diag_frame(nu1, nu2):
        g1, g2 = nu1.sol.diag, nu2.sol.diag
        n = g1.shape[0]
        if B1.ndim == 1:
            w = g1 * B1 * g2  # diagonal of M1 B1 M2
            if B2a is None:
                return complex(np.mean(w))
            d2 = np.diag(B2a) if B2a.ndim == 2 else B2a
            return complex(np.mean(w * d2))
        if B2a is None:
            return complex(np.mean(g1 * np.diag(B1) * g2))
        if B2a.ndim == 1:
            return complex(np.mean(g1 * np.diag(B1) * g2 * B2a))
        mid = (g1[:, None] * B1) * g2[None, :]
        return complex(np.sum(mid * B2a.T)) / n
    M1 = nu1.m_matrix()
    M2 = nu2.m_matrix()
    chain = M1 @ (B1 if B1.ndim == 2 else np.diag(B1)) @ M2
    if B2a is not None:
        chain = chain @ (B2a if B2a.ndim == 2 else np.diag(B2a))
    return complex(np.trace(chain)) / chain.shape[0]


def m2_avg(nu1: SpectralPair, nu2: SpectralPair, B1: np.ndarray,
           B2: np.ndarray | None = None) -> complex:
    """<M^{B1}_{12} B2> via trace contractions (O(N^2) in the shared frame)."""
    c = trace_prod(nu1, nu2)
    if abs(1.0 - c) <= STABILITY_FLOOR:
        raise SingularStabilityError(f"stability operator singular: beta = {abs(1-c):.3e}")
    lead = chain_trace(nu1, nu2, B1, B2)
    tr_core = chain_trace(nu1, nu2, B1, None)
    if B2 is None:
        tail = c
    else:
        ones = np.ones(nu1.deformation.dim)
        tail = chain_trace(nu1, nu2, ones, B2)
    return lead + tr_core / (1.0 - c) * tail


def m2_bilinear(nu1: SpectralPair, nu2: SpectralPair, B1: np.ndarray,
                x: np.ndarray, y: np.ndarray) -> complex:
    """<x, M^{B1}_{12} y> without forming the full matrix in the shared frame."""
    c = trace_prod(nu1, nu2)
    if abs(1.0 - c) <= STABILITY_FLOOR:
        raise SingularStabilityError(f"stability operator singular: beta = {abs(1-c):.3e}")
    B1 = np.asarray(B1, dtype=complex)
    if _diag_frame(nu1, nu2):
        g1, g2 = nu1.sol.diag, nu2.sol.diag
        xv = np.conj(x) * g1
        yv = g2 * y
        core = complex(xv @ B1 @ yv) if B1.ndim == 2 else complex(np.sum(xv * B1 * yv))
        mix = complex(np.sum(np.conj(x) * g1 * g2 * y))
    else:
        M1 = nu1.m_matrix()
        M2 = nu2.m_matrix()
        Bm = B1 if B1.ndim == 2 else np.diag(B1)
        core = complex(np.conj(x) @ (M1 @ Bm @ M2) @ y)
        mix = complex(np.conj(x) @ (M1 @ M2) @ y)
    tr_core = chain_trace(nu1, nu2, B1)
    return core + tr_core / (1.0 - c) * mix


def m3_det(nu1: SpectralPair, nu2: SpectralPair, nu3: SpectralPair,
           B1: np.ndarray, B2: np.ndarray) -> np.ndarray:
    """Deterministic approximation of G1 B1 G2 B2 G3.

    B13^{-1}[ M1 B1 M^{B2}_{23} + <M^{B1}_{12}> M1 M^{B2}_{23} ].
    """
    inner = m2_det(nu2, nu3, B2)
    M1 = nu1.m_matrix()
    lead = M1 @ np.asarray(B1, dtype=complex) @ inner
    n = lead.shape[0]
    tr12 = complex(np.trace(m2_det(nu1, nu2, B1))) / n
    return stability_inverse(nu1, nu3, lead + tr12 * (M1 @ inner), check=False)


# ---------------------------------------------------------------------------
# Regular observables


def v_matrix(nu1: SpectralPair, nu2: SpectralPair) -> np.ndarray:
    """Unstable direction V = M2' M1 / <M1 M2'>, with the sign-flipped M2'.

    M2' is M^{D2} evaluated at Re z2 + i*s*Im z2 where s = -sgn(Im z1 Im z2),
    i.e. M2 itself for opposite half-planes and M2* for equal ones.
    """
    s = np.sign(nu1.z.imag * nu2.z.imag)
    if s == 0:
        raise ValueError("v_matrix needs Im z != 0 on both pairs")
    partner = nu2 if s < 0 else nu2.conjugate()
    denom = trace_prod(nu1, partner)
    if abs(denom) < 1e-13:
        raise SingularStabilityError(f"degenerate <M1 M2'> = {denom:.3e} in V")
    return (partner.m_matrix() @ nu1.m_matrix()) / denom


def v_trace_with(nu1: SpectralPair, nu2: SpectralPair, A: np.ndarray) -> complex:
    """<V A> without forming V (uses the shared diagonal frame when possible)."""
    s = np.sign(nu1.z.imag * nu2.z.imag)
    partner = nu2 if s < 0 else nu2.conjugate()
    denom = trace_prod(nu1, partner)
    if abs(denom) < 1e-13:
        raise SingularStabilityError(f"degenerate <M1 M2'> = {denom:.3e} in V")
    # <V A> = <M2' M1 A> / <M1 M2'> = <M1 A M2'> / <M1 M2'> by cyclicity
    return chain_trace(nu1, partner, np.asarray(A)) / denom


def smoothstep_bump(x, delta: float):
    """Symmetric cubic bump: 1 on |x| <= delta/2, 0 on |x| >= delta.

    Accepts scalars or arrays; the transition is the cubic smoothstep in
    u = (|x| - delta/2)/(delta/2).
    """
    u = (np.abs(x) - delta / 2.0) / (delta / 2.0)
    u = np.clip(u, 0.0, 1.0)
    out = 1.0 - (3.0 * u * u - 2.0 * u**3)
    return float(out) if np.isscalar(x) else out


def phi_cutoff(nu1: SpectralPair, nu2: SpectralPair, delta: float = DEFAULT_DELTA) -> float:
    """Product cutoff in (Re z1 - Re z2, Delta^2, Im z1, Im z2)."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    d2 = deformation_gap_sq(nu1.deformation, nu2.deformation)
    return (smoothstep_bump(nu1.energy - nu2.energy, delta)
            * smoothstep_bump(d2, delta)
            * smoothstep_bump(nu1.z.imag, delta)
            * smoothstep_bump(nu2.z.imag, delta))


@dataclass(frozen=True)
class RegularizedObservable:
    """A = raw observable, A_ring = A - phi <V A> I, its regular component."""

    A: np.ndarray
    A_ring: np.ndarray
    phi: float
    vA: complex
    V: np.ndarray
    delta: float

    @property
    def shift(self) -> complex:
        return self.phi * self.vA


def regularize(A: np.ndarray, nu1: SpectralPair, nu2: SpectralPair,
               delta: float = DEFAULT_DELTA) -> RegularizedObservable:
    """Project out the unstable direction:  A_ring = A - phi(nu1,nu2) <V A> I."""
    A = np.asarray(A, dtype=complex)
    V = v_matrix(nu1, nu2)
    phi = phi_cutoff(nu1, nu2, delta)
    n = A.shape[0]
    vA = complex(np.trace(V @ A)) / n
    ring = A - phi * vA * np.eye(n)
    return RegularizedObservable(A=A, A_ring=ring, phi=phi, vA=vA, V=V, delta=delta)


def reg_comparison_gap(A: np.ndarray, nu1: SpectralPair, nu2: SpectralPair,
                       y1: float, y2: float, delta: float = DEFAULT_DELTA) -> float:
    """Largest normalized distance between regularizations at shifted pairs.

    Compares A_ring at (nu1', nu2'), (conj nu1', nu2'), (nu2', nu1') and
    (conj nu2', nu1') against A_ring at (nu1, nu2), each divided by
    ||A|| sqrt(gamma_hat(z1', z2')), where z_l' = z_l + i y_l.
    """
    if y1 < 0 or y2 < 0:
        raise ValueError("y shifts must be nonnegative")
    base = regularize(A, nu1, nu2, delta).A_ring
    nu1p = SpectralPair.solve(nu1.deformation, nu1.z + 1j * y1) if y1 else nu1
    nu2p = SpectralPair.solve(nu2.deformation, nu2.z + 1j * y2) if y2 else nu2
    gam = gamma_hat(nu1p, nu2p)
    norm_a = operator_norm(np.asarray(A, dtype=complex))
    if norm_a == 0:
        return 0.0
    combos = [
        (nu1p, nu2p),
        (nu1p.conjugate(), nu2p),
        (nu2p, nu1p),
        (nu2p.conjugate(), nu1p),
    ]
    worst = 0.0
    for a, b in combos:
        ring = regularize(A, a, b, delta).A_ring
        worst = max(worst, operator_norm(ring - base) / (norm_a * np.sqrt(gam)))
    return worst

"""Deformed Wigner ensembles: sampling, eigen-data, overlaps, chain statistics.

Resolvent chains are always evaluated through eigendecompositions: the
observables are transformed into the pair of eigenbases once, after which
each spectral parameter costs O(N^2).  RNG streams are counter-based and
keyed by (master seed, trial, purpose), so the same W is reused across the
two deformations inside a trial and trials are independent of scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matrix_core import SpectralDecomposition, eigh
from .mde import Deformation

_PURPOSES = {"wigner": 0, "ou": 1, "vectors": 2}


def stream(master_seed: int, trial: int, purpose: str = "wigner") -> np.random.Generator:
    """Counter-based RNG stream keyed by (master seed, trial, purpose)."""
    key = np.random.SeedSequence((int(master_seed), int(trial), _PURPOSES[purpose]))
    return np.random.Generator(np.random.Philox(key))


@dataclass(frozen=True)
class WignerSpec:
    """Entry conventions for a Wigner matrix: E chi = 0, E|chi_od|^2 = 1."""

    n: int
    beta_sym: int = 2
    dist: str = "gaussian"
    seed: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("Wigner matrices need n >= 2")
        if self.beta_sym not in (1, 2):
            raise ValueError("beta_sym must be 1 or 2")
        if self.dist not in ("gaussian", "rademacher", "uniform"):
            raise ValueError(f"unknown entry distribution {self.dist!r}")


def _offdiag_entries(spec: WignerSpec, rng: np.random.Generator, size) -> np.ndarray:
    if spec.dist == "gaussian":
        if spec.beta_sym == 2:
            return (rng.standard_normal(size) + 1j * rng.standard_normal(size)) / np.sqrt(2.0)
        return rng.standard_normal(size)
    if spec.dist == "rademacher":
        signs = rng.integers(0, 2, size=size) * 2 - 1
        if spec.beta_sym == 2:
            signs_im = rng.integers(0, 2, size=size) * 2 - 1
            return (signs + 1j * signs_im) / np.sqrt(2.0)
        return signs.astype(float)
    # uniform on [-sqrt(3), sqrt(3)] has unit variance
    u = rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=size)
    if spec.beta_sym == 2:
        v = rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=size)
        return (u + 1j * v) / np.sqrt(2.0)
    return u


def sample_wigner(spec: WignerSpec, trial: int = 0,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Hermitian W with E|W_ab|^2 = 1/N off the diagonal (E W_ab^2 = 0 if complex)."""
    gen = rng if rng is not None else stream(spec.seed, trial, "wigner")
    n = spec.n
    off = _offdiag_entries(spec, gen, (n, n))
    upper = np.triu(off, 1)
    W = (upper + upper.conj().T) / np.sqrt(n)
    if spec.dist == "gaussian" and spec.beta_sym == 1:
        diag = gen.standard_normal(n) * np.sqrt(2.0)  # GOE diagonal convention
    else:
        diag = np.real(_offdiag_entries(spec, gen, n)) * (np.sqrt(2.0) if spec.beta_sym == 2 else 1.0)
    W = W + np.diag(diag.real) / np.sqrt(n)
    return W if spec.beta_sym == 2 else W.real


def deform_and_solve(W: np.ndarray, D: Deformation) -> SpectralDecomposition:
    """Eigendata of H = W + D."""
    n = W.shape[0]
    if D.dim != n:
        raise ValueError(f"dimension mismatch: W is {n}, deformation is {D.dim}")
    if D.basis is None:
        H = W + np.diag(D.eigenvalues)
    else:
        H = W + D.matrix()
    return eigh(H, check_input=False)


@dataclass(frozen=True)
class OverlapMatrix:
    """O_ij = <u_i^1, A u_j^2> with the quantile locations attached."""

    values: np.ndarray
    left_quantiles: np.ndarray | None = None
    right_quantiles: np.ndarray | None = None
    observable_id: str = "identity"


def eigenvector_overlaps(dec1: SpectralDecomposition, dec2: SpectralDecomposition,
                         A: np.ndarray | None = None,
                         left_quantiles: np.ndarray | None = None,
                         right_quantiles: np.ndarray | None = None,
                         observable_id: str | None = None) -> OverlapMatrix:
    if dec1.dim != dec2.dim:
        raise ValueError("eigenbases have different dimensions")
    U1, U2 = dec1.eigenvectors, dec2.eigenvectors
    if A is None:
        values = U1.conj().T @ U2
        obs_id = observable_id or "identity"
    else:
        A = np.asarray(A)
        mid = A[:, None] * U2 if A.ndim == 1 else A @ U2
        values = U1.conj().T @ mid
        obs_id = observable_id or "custom"
    return OverlapMatrix(values=values, left_quantiles=left_quantiles,
                         right_quantiles=right_quantiles, observable_id=obs_id)


class ChainKernel:
    """Resolvent-chain evaluator for a fixed pair of eigenbases.

    Transforms the observables into the two eigenbases once; every call with
    new spectral parameters is then an O(N^2) contraction.  1-D observables
    are understood as diagonal matrices.
    """

    def __init__(self, dec1: SpectralDecomposition, dec2: SpectralDecomposition,
                 B1: np.ndarray | None = None, B2: np.ndarray | None = None,
                 B1t: np.ndarray | None = None, B2t: np.ndarray | None = None):
        if dec1.dim != dec2.dim:
            raise ValueError("eigenbases have different dimensions")
        self.lam1 = dec1.eigenvalues
        self.lam2 = dec2.eigenvalues
        self.U1 = dec1.eigenvectors
        self.U2 = dec2.eigenvectors
        # precomputed transforms may be shared across kernels for one basis pair
        self.B1t = B1t if B1t is not None else self._cross(B1, self.U1, self.U2)
        self.B2t = B2t if B2t is not None else self._cross(B2, self.U2, self.U1)
        self.P = self.B1t * self.B2t.T                 # for averaged chains

    @staticmethod
    def _cross(B, Ua, Ub) -> np.ndarray:
        if B is None:
            return Ua.conj().T @ Ub
        B = np.asarray(B)
        mid = B[:, None] * Ub if B.ndim == 1 else B @ Ub
        return Ua.conj().T @ mid

    @staticmethod
    def _weights(lam: np.ndarray, z: complex, mode: str) -> np.ndarray:
        if mode == "g":
            return 1.0 / (lam - z)
        if mode == "g*":
            return 1.0 / (lam - np.conj(z))
        if mode == "im":
            eta = z.imag
            return eta / ((lam - z.real) ** 2 + eta**2)
        raise ValueError(mode)

    def avg(self, z1: complex, z2: complex, mode1: str = "g", mode2: str = "g") -> complex:
        """<G1 B1 G2 B2> (or Im G variants) at the given spectral parameters."""
        w1 = self._weights(self.lam1, z1, mode1)
        w2 = self._weights(self.lam2, z2, mode2)
        n = self.lam1.shape[0]
        return complex(w1 @ self.P @ w2) / n

    def iso2(self, z1: complex, z2: complex, x: np.ndarray, y: np.ndarray) -> complex:
        """(G1 B1 G2)_{xy}."""
        a = self.U1.conj().T @ x
        b = self.U2.conj().T @ y
        w1 = self._weights(self.lam1, z1, "g")
        w2 = self._weights(self.lam2, z2, "g")
        return complex((a.conj() * w1) @ self.B1t @ (w2 * b))

    def iso3(self, z1: complex, z2: complex, z3: complex, x: np.ndarray,
             y: np.ndarray, star_last: bool = False) -> complex:
        """(G1 B1 G2 B2 G1^{(*)})_{xy}; the last resolvent reuses basis 1."""
        a = self.U1.conj().T @ x
        b = self.U1.conj().T @ y
        w1 = self._weights(self.lam1, z1, "g")
        w2 = self._weights(self.lam2, z2, "g")
        w3 = self._weights(self.lam1, z3, "g*" if star_last else "g")
        return complex((a.conj() * w1) @ self.B1t @ ((w2[:, None] * self.B2t) @ (w3 * b)))


def resolvent_chain_avg(dec1: SpectralDecomposition, dec2: SpectralDecomposition,
                        z1: complex, z2: complex,
                        B1: np.ndarray | None = None,
                        B2: np.ndarray | None = None) -> complex:
    """<G1 B1 G2 B2> via spectral calculus."""
    if z1.imag == 0 or z2.imag == 0:
        raise ValueError("resolvent chains need Im z != 0")
    return ChainKernel(dec1, dec2, B1, B2).avg(z1, z2)


def resolvent_chain_iso(dec1: SpectralDecomposition, dec2: SpectralDecomposition,
                        z1: complex, z2: complex, B1: np.ndarray | None,
                        x: np.ndarray, y: np.ndarray,
                        B2: np.ndarray | None = None, z3: complex | None = None,
                        star_last: bool = False) -> complex:
    """(G1 B1 G2)_{xy} or, with B2 given, (G1 B1 G2 B2 G1^{(*)})_{xy}."""
    for v in (x, y):
        if abs(np.linalg.norm(v) - 1.0) > 1e-10:
            raise ValueError("test vectors must be unit vectors")
    kern = ChainKernel(dec1, dec2, B1, B2)
    if B2 is None:
        return kern.iso2(z1, z2, x, y)
    return kern.iso3(z1, z2, z3 if z3 is not None else z1, x, y, star_last=star_last)


@dataclass(frozen=True)
class ImImReport:
    statistic: float
    overlap_sq: float
    window_weight: float
    lower_bound: float

    @property
    def ratio(self) -> float:
        if self.overlap_sq == 0:
            return np.inf
        return self.statistic / self.overlap_sq


def imim_overlap_bound(dec1: SpectralDecomposition, dec2: SpectralDecomposition,
                       i: int, j: int, eta: float,
                       gamma_i: float, gamma_j: float) -> ImImReport:
    """(N eta)^2 <Im G1(gamma_i + i eta) Im G2(gamma_j + i eta)> vs N |<u_i, u_j>|^2.

    The double spectral sum dominates its single (i, j) term exactly:
    statistic >= N |O_ij|^2 * w with the window weight
    w = eta^4 / ((lambda_i - gamma_i)^2 + eta^2) / ((lambda_j - gamma_j)^2 + eta^2).
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    n = dec1.dim
    kern = ChainKernel(dec1, dec2)
    z1 = complex(gamma_i, eta)
    z2 = complex(gamma_j, eta)
    stat = (n * eta) ** 2 * abs(kern.avg(z1, z2, mode1="im", mode2="im"))
    o_sq = abs(kern.B1t[i, j]) ** 2  # B1t is U1* U2 here
    w = eta**2 / ((dec1.eigenvalues[i] - gamma_i) ** 2 + eta**2)
    w *= eta**2 / ((dec2.eigenvalues[j] - gamma_j) ** 2 + eta**2)
    return ImImReport(statistic=float(stat), overlap_sq=float(n * o_sq),
                      window_weight=float(w), lower_bound=float(n * o_sq * w))

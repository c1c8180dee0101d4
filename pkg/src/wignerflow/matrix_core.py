"""Dense Hermitian matrix algebra: eigendecompositions, traces, resolvents.

Resolvents and matrix functions are always formed through the
eigendecomposition (spectral calculus), never by direct inversion; this is
what keeps evaluations stable for spectral parameters close to the real
axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HERMITICITY_TOL = 1e-12
RECONSTRUCTION_TOL = 1e-10


class NonHermitianError(ValueError):
    """Input matrix is not Hermitian within tolerance."""


class EigensolverError(RuntimeError):
    """LAPACK failed to converge; carries matrix-norm diagnostics."""


def hermiticity_defect(matrix: np.ndarray) -> float:
    """Relative magnitude of the anti-Hermitian part of ``matrix``."""
    matrix = np.asarray(matrix)
    scale = max(float(np.max(np.abs(matrix))), 1.0)
    return float(np.max(np.abs(matrix - matrix.conj().T))) / scale


def require_hermitian(matrix: np.ndarray, tol: float = HERMITICITY_TOL) -> np.ndarray:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix.real)) or not np.all(np.isfinite(matrix.imag)):
        raise ValueError("matrix has non-finite entries")
    defect = hermiticity_defect(matrix)
    if defect > tol:
        raise NonHermitianError(
            f"matrix is not Hermitian: relative defect {defect:.3e} > {tol:.1e}"
        )
    return matrix


def normalized_trace(matrix: np.ndarray) -> complex:
    """<A> = Tr(A) / N for a square matrix."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {matrix.shape}")
    return complex(np.trace(matrix)) / matrix.shape[0]


def operator_norm(matrix: np.ndarray) -> float:
    return float(np.linalg.norm(matrix, 2))


@dataclass(frozen=True)
class SpectralDecomposition:
    """Eigendata of a Hermitian matrix: ascending eigenvalues, unitary columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def dim(self) -> int:
        return self.eigenvalues.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.eigenvectors * self.eigenvalues) @ self.eigenvectors.conj().T

    def validate(self, original: np.ndarray | None = None, tol: float = RECONSTRUCTION_TOL) -> None:
        """Check unitarity and, when the source matrix is given, reconstruction."""
        n = self.dim
        gram = self.eigenvectors.conj().T @ self.eigenvectors
        unitary_defect = float(np.max(np.abs(gram - np.eye(n))))
        if unitary_defect > tol:
            raise EigensolverError(f"eigenvector unitarity defect {unitary_defect:.3e}")
        if np.any(np.diff(self.eigenvalues) < 0):
            raise EigensolverError("eigenvalues are not nondecreasing")
        if original is not None:
            scale = max(operator_norm(original), 1e-300)
            err = operator_norm(self.reconstruct() - original) / scale
            if err > tol:
                raise EigensolverError(f"reconstruction error {err:.3e} > {tol:.1e}")

    def resolvent(self, z: complex) -> np.ndarray:
        """G(z) = (H - z)^{-1} via spectral calculus; requires Im z != 0."""
        if z.imag == 0:
            raise ValueError("resolvent requires Im z != 0")
        g = 1.0 / (self.eigenvalues - z)
        return (self.eigenvectors * g) @ self.eigenvectors.conj().T

    def abs_resolvent(self, z: complex) -> np.ndarray:
        """|G(z)| = U diag(1/|lambda_i - z|) U*; the spectral-calculus oracle."""
        if z.imag == 0:
            raise ValueError("abs_resolvent requires Im z != 0")
        g = 1.0 / np.abs(self.eigenvalues - z)
        return (self.eigenvectors * g) @ self.eigenvectors.conj().T


def eigh(matrix: np.ndarray, *, check_input: bool = True, validate: bool = False) -> SpectralDecomposition:
    """Eigendecomposition of a Hermitian matrix.

    ``check_input`` enforces Hermiticity up front (cheap); ``validate`` runs
    the O(N^3) reconstruction/unitarity check, meant for tests rather than
    hot loops.
    """
    matrix = np.asarray(matrix)
    if check_input:
        require_hermitian(matrix)
    try:
        vals, vecs = np.linalg.eigh(matrix)
    except np.linalg.LinAlgError as exc:
        raise EigensolverError(
            f"eigensolver failed on {matrix.shape[0]}x{matrix.shape[0]} matrix "
            f"(max|H|={np.max(np.abs(matrix)):.3e}, fro={np.linalg.norm(matrix):.3e}): {exc}"
        ) from exc
    dec = SpectralDecomposition(eigenvalues=vals, eigenvectors=vecs)
    if validate:
        dec.validate(matrix)
    return dec


@dataclass(frozen=True)
class QuadConfig:
    """Controls for the |G| integral quadrature.

    The integral is taken in the variable u after substituting
    x = eta*sinh(u), which removes the eta-scale stiffness; panels of width
    ``panel_width`` are evaluated with Gauss-Legendre rules of increasing
    order until stable, and the panel sweep stops once a panel contributes
    less than ``tail_factor * tol``.
    """

    tol: float = 1e-8
    panel_width: float = 1.0
    max_panels: int = 200
    orders: tuple[int, ...] = (8, 16, 32, 64)
    tail_factor: float = 1e-3


class QuadratureError(RuntimeError):
    """Panel quadrature failed to converge within the configured budget."""


def _abs_weight_integrand(gaps: np.ndarray, eta: float, u: np.ndarray) -> np.ndarray:
    # After x = eta*sinh(u) the integrand for eigen-gap g is
    # (2/pi) * eta*cosh(u) / (g^2 + eta^2*cosh(u)^2), one row per gap.
    zeta = eta * np.cosh(u)
    return (2.0 / np.pi) * zeta / (gaps[:, None] ** 2 + zeta[None, :] ** 2)


def _panel_values(gaps: np.ndarray, eta: float, a: float, b: float, cfg: QuadConfig) -> np.ndarray:
    prev = None
    for order in cfg.orders:
        nodes, weights = np.polynomial.legendre.leggauss(order)
        u = 0.5 * (b - a) * nodes + 0.5 * (a + b)
        vals = _abs_weight_integrand(gaps, eta, u) @ weights * (0.5 * (b - a))
        if prev is not None and float(np.max(np.abs(vals - prev))) <= 0.1 * cfg.tol:
            return vals
        prev = vals
    return prev


def abs_resolvent_integral(
    decomp: SpectralDecomposition,
    E: float,
    eta: float,
    quad: QuadConfig | None = None,
) -> np.ndarray:
    """|G(E+i*eta)| via the contour integral over Im G on the vertical ray.

    Evaluates (2/pi) * Int_0^inf Im G(E + i*sqrt(eta^2+x^2)) / sqrt(eta^2+x^2) dx
    by adaptive panel quadrature; Im G at the nodes is formed spectrally, so
    the whole integral reduces to one weight per eigenvalue and a single
    basis sandwich at the end.
    """
    if eta <= 0:
        raise ValueError("abs_resolvent_integral requires eta > 0")
    cfg = quad or QuadConfig()
    gaps = decomp.eigenvalues - E
    totals = np.zeros_like(gaps, dtype=float)
    converged = False
    for k in range(cfg.max_panels):
        a = k * cfg.panel_width
        b = a + cfg.panel_width
        vals = _panel_values(gaps, eta, a, b, cfg)
        totals += vals
        # The operator norm of U diag(w) U* is max|w|, so panel
        # contributions can be judged on the weight vector directly.
        if float(np.max(np.abs(vals))) < cfg.tail_factor * cfg.tol:
            converged = True
            break
    if not converged:
        raise QuadratureError(
            f"|G| quadrature did not converge within {cfg.max_panels} panels "
            f"(eta={eta:.3e}, last panel {float(np.max(np.abs(vals))):.3e})"
        )
    U = decomp.eigenvectors
    return (U * totals) @ U.conj().T

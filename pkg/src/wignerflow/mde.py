"""Matrix Dyson Equation for flat self-energy and free-convolution densities.

For a traceless Hermitian deformation D the MDE  -M^{-1} = z - D + <M>
is diagonal in D's eigenbasis, so everything reduces to the scalar
self-consistent equation

    m = <(D - z - m)^{-1}> = (1/N) sum_i 1/(d_i - z - m),

solved under the half-plane constraint Im m * Im z > 0.  The full matrix
solution is recovered as M_ii = 1/(d_i - z - m).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import PchipInterpolator

TRACELESS_TOL = 1e-10
DEFAULT_TOL = 1e-13
DENSITY_ETAS = (1e-5, 5e-6, 2.5e-6)
DEFAULT_GRID = 4096


class MdeConvergenceError(RuntimeError):
    """Fixed-point/Newton iteration failed; message carries last residual."""


class ExtrapolationWarning(UserWarning):
    """Richardson steps disagree; likely near an edge or cusp."""


# ---------------------------------------------------------------------------
# Deformation


@dataclass(frozen=True)
class Deformation:
    """Traceless Hermitian deformation given by spectrum and eigenbasis.

    ``basis is None`` means the identity basis.  ``norm_bound`` is the L in
    ||D|| <= L used by the admissibility checks.  ``eigenvalues`` keeps the
    caller's ordering: entry k is the diagonal value in basis column k, so
    differences D1 - D2 of deformations sharing a basis stay aligned
    entrywise (sorting would silently re-pair the atoms).  ``spectrum``
    gives the ascending view.
    """

    eigenvalues: np.ndarray
    basis: np.ndarray | None = None
    norm_bound: float | None = None

    def __post_init__(self):
        d = np.asarray(self.eigenvalues, dtype=float)
        object.__setattr__(self, "eigenvalues", d)
        n = d.shape[0]
        if abs(d.sum()) > TRACELESS_TOL * n:
            raise ValueError(f"deformation is not traceless: |sum d| = {abs(d.sum()):.3e}")
        bound = self.norm_bound
        if bound is None:
            bound = float(np.max(np.abs(d))) if n else 0.0
        elif np.max(np.abs(d), initial=0.0) > bound + 1e-12:
            raise ValueError("max|d_i| exceeds the declared norm bound")
        object.__setattr__(self, "norm_bound", float(bound))
        if self.basis is not None:
            basis = np.asarray(self.basis, dtype=complex)
            if basis.shape != (n, n):
                raise ValueError("basis shape does not match the spectrum")
            defect = np.max(np.abs(basis.conj().T @ basis - np.eye(n)))
            if defect > 1e-10:
                raise ValueError(f"basis is not unitary: defect {defect:.3e}")
            object.__setattr__(self, "basis", basis)

    @property
    def dim(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def spectrum(self) -> np.ndarray:
        return np.sort(self.eigenvalues)

    def matrix(self) -> np.ndarray:
        if self.basis is None:
            return np.diag(self.eigenvalues.astype(complex))
        return (self.basis * self.eigenvalues) @ self.basis.conj().T

    def scaled(self, factor: float) -> "Deformation":
        return Deformation(self.eigenvalues * factor, self.basis,
                           abs(factor) * self.norm_bound)

    @classmethod
    def zero(cls, dim: int = 1) -> "Deformation":
        return cls(np.zeros(dim))

    @classmethod
    def from_json(cls, payload: str | dict) -> "Deformation":
        data = json.loads(payload) if isinstance(payload, str) else payload
        eigenvalues = np.asarray(data["eigenvalues"], dtype=float)
        basis = data.get("basis", "identity")
        if isinstance(basis, str):
            if basis != "identity":
                raise ValueError(f"unknown basis spec {basis!r}")
            basis_arr = None
        else:
            rows = [[complex(c[0], c[1]) if isinstance(c, (list, tuple)) else complex(c)
                     for c in row] for row in basis]
            basis_arr = np.asarray(rows, dtype=complex)
        return cls(eigenvalues, basis_arr, data.get("norm_bound"))

    def to_json(self) -> dict:
        if self.basis is None:
            basis = "identity"
        else:
            basis = [[[float(c.real), float(c.imag)] for c in row] for row in self.basis]
        return {"eigenvalues": [float(x) for x in self.eigenvalues],
                "basis": basis, "norm_bound": self.norm_bound}


def shares_basis(d1: Deformation, d2: Deformation) -> bool:
    if d1.basis is None and d2.basis is None:
        return True
    if d1.basis is None or d2.basis is None:
        return False
    return d1.basis is d2.basis or np.array_equal(d1.basis, d2.basis)


# ---------------------------------------------------------------------------
# Scalar MDE solver (vectorized over spectral parameters)


def _measure_atoms(D) -> tuple[np.ndarray, np.ndarray]:
    """Unique spectral atoms with weights; collapses repeated eigenvalues."""
    if isinstance(D, Deformation):
        cached = getattr(D, "_atoms", None)
        if cached is not None:
            return cached
        vals, counts = np.unique(D.eigenvalues, return_counts=True)
        atoms = (vals, counts / counts.sum())
        object.__setattr__(D, "_atoms", atoms)
        return atoms
    d = np.asarray(D, dtype=float)
    vals, counts = np.unique(d, return_counts=True)
    return vals, counts / counts.sum()


def _self_energy(d: np.ndarray, w: np.ndarray, z: np.ndarray, m: np.ndarray,
                 power: int = 1) -> np.ndarray:
    # weighted mean over the spectral measure; chunked to bound the
    # K x M temporary
    K = d.shape[0]
    M = z.shape[0]
    block = max(1, (1 << 22) // max(K, 1))
    if K * M <= (1 << 22):
        g = 1.0 / (d[:, None] - z[None, :] - m[None, :])
        return w @ (g if power == 1 else g**power)
    out = np.empty(M, dtype=complex)
    for s in range(0, M, block):
        e = min(s + block, M)
        g = 1.0 / (d[:, None] - z[None, s:e] - m[None, s:e])
        out[s:e] = w @ (g if power == 1 else g**power)
    return out


_NEWTON_ERR = 0.05


def _iterate_batch(d: np.ndarray, w: np.ndarray, z: np.ndarray, m: np.ndarray,
                   tol: float, max_iter: int) -> tuple[np.ndarray, np.ndarray]:
    """Damped fixed point with a Newton tail, staying in the upper half plane.

    Converged entries drop out of the active set, so late iterations only
    touch the stragglers (spectral-edge columns at tiny eta).
    """
    m = m.copy()
    res = np.full(z.shape, np.inf)
    idx = np.arange(z.size)
    for _ in range(max_iter):
        zz = z[idx]
        mm = m[idx]
        s1 = _self_energy(d, w, zz, mm)
        f = mm - s1
        err = np.abs(f)
        res[idx] = err
        keep = err > tol
        if not keep.any():
            return m, res
        idx = idx[keep]
        zz, mm, f, err = zz[keep], mm[keep], f[keep], err[keep]
        step = 0.5 * f
        newton = err < _NEWTON_ERR
        if newton.any():
            fprime = 1.0 - _self_energy(d, w, zz, mm, power=2)
            newton &= np.abs(fprime) > 1e-12
            step = np.where(newton, f / np.where(newton, fprime, 1.0), step)
        cand = mm - step
        # guard Newton: stay in the half plane and under the Stieltjes bound
        bad = (cand.imag <= 0) | (np.abs(cand) > 2.0 / np.abs(zz.imag))
        cand = np.where(bad, mm - 0.5 * f, cand)
        m[idx] = cand
    # out of budget: report the true residual for the stragglers
    s1 = _self_energy(d, w, z[idx], m[idx])
    res[idx] = np.abs(m[idx] - s1)
    return m, res


def solve_mde_many(
    D: Deformation | np.ndarray,
    z: np.ndarray,
    tol: float = DEFAULT_TOL,
    max_iter: int = 400,
    m0: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Solve the scalar MDE at an array of spectral parameters.

    Returns (m, residual).  Parameters in the lower half plane are handled by
    reflection m(conj z) = conj(m(z)).  For |Im z| < 0.1 the solve continues
    in eta from 1 downward in factor-2 steps, warm-starting each step.
    """
    d, w = _measure_atoms(D)
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    eta_t = z.imag
    if np.any(eta_t == 0):
        raise ValueError("solve_mde requires Im z != 0; use density() on the real axis")
    sign = np.sign(eta_t)
    zv = z.real + 1j * np.abs(eta_t)

    res = None
    if m0 is not None:
        m0 = np.atleast_1d(np.asarray(m0, dtype=complex))
        start = np.where(sign < 0, np.conj(m0), m0)
        cold = _self_energy(d, w, zv, np.zeros_like(zv))
        start = np.where(start.imag > 0, start, cold)
        m, res = _iterate_batch(d, w, zv, start, tol, max_iter)
    if res is None or np.any(res > tol):
        # cold start: direct solve for eta >= 0.1, otherwise continuation
        # from eta = 1 downward in factor-2 steps, warm-starting each step
        eta_min = float(np.min(np.abs(eta_t)))
        m = _self_energy(d, w, zv.real + 1j * np.maximum(np.abs(eta_t), 1.0),
                         np.zeros_like(zv))
        if eta_min >= 0.1:
            m, res = _iterate_batch(d, w, zv, m, tol, max_iter)
        else:
            eta = 1.0
            while eta > eta_min:
                stage = zv.real + 1j * np.maximum(np.abs(eta_t), eta)
                m, _ = _iterate_batch(d, w, stage, m, tol, max_iter)
                eta /= 2.0
            m, res = _iterate_batch(d, w, zv, m, tol, max_iter)

    if np.any(res > tol):
        worst = float(np.max(res))
        raise MdeConvergenceError(
            f"MDE did not converge to {tol:.1e} after continuation; last residual {worst:.3e}"
        )
    m = np.where(sign < 0, np.conj(m), m)
    return m, res


@dataclass(frozen=True)
class MdeSolution:
    """Solution of the MDE at one spectral parameter.

    ``diag`` is M in D's eigenbasis, ``m = <M>``, ``rho = |Im m|/pi``.
    """

    z: complex
    m: complex
    diag: np.ndarray
    rho: float
    residual: float

    def conjugate(self) -> "MdeSolution":
        return MdeSolution(np.conj(self.z), np.conj(self.m),
                           np.conj(self.diag), self.rho, self.residual)


def solve_mde(D: Deformation, z: complex, tol: float = DEFAULT_TOL,
              max_iter: int = 400, m0: complex | None = None) -> MdeSolution:
    z = complex(z)
    m0_arr = None if m0 is None else np.asarray([m0], dtype=complex)
    m, res = solve_mde_many(D, np.asarray([z]), tol=tol, max_iter=max_iter, m0=m0_arr)
    m_val = complex(m[0])
    diag = 1.0 / (D.eigenvalues - z - m_val)
    return MdeSolution(z=z, m=m_val, diag=diag,
                       rho=abs(m_val.imag) / np.pi, residual=float(res[0]))


def stieltjes(D: Deformation, z: complex, tol: float = DEFAULT_TOL) -> complex:
    """m_D(z) = <M^D(z)>; lower half plane by reflection."""
    return solve_mde(D, complex(z), tol=tol).m


def resolvent_diag_grid(D: Deformation, z: np.ndarray,
                        tol: float = DEFAULT_TOL) -> np.ndarray:
    """Matrix of M-diagonals: row i is 1/(d - z_i - m(z_i)) in D's eigenbasis."""
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    m, _ = solve_mde_many(D, z, tol=tol)
    return 1.0 / (D.eigenvalues[None, :] - z[:, None] - m[:, None])


# ---------------------------------------------------------------------------
# Boundary density via Richardson extrapolation in eta


def density_curve(D: Deformation, energies: np.ndarray,
                  etas: tuple[float, ...] = DENSITY_ETAS,
                  warn_tol: float | None = None) -> np.ndarray:
    """rho_D on an array of real energies, extrapolated eta -> 0+ and clamped at 0."""
    E = np.atleast_1d(np.asarray(energies, dtype=float))
    # one continuation ladder for all eta levels at once
    stacked = np.concatenate([E + 1j * eta for eta in etas])
    m_all = solve_mde_many(D, stacked)[0]
    rho = [m_all[k * E.size:(k + 1) * E.size].imag / np.pi for k in range(len(etas))]
    if len(rho) == 1:
        out = rho[0]
    else:
        # first-order model rho(eta) = rho(0) + c*eta: r_k = 2*rho(eta/2) - rho(eta)
        extraps = [2.0 * rho[k + 1] - rho[k] for k in range(len(rho) - 1)]
        out = extraps[-1]
        if warn_tol is not None and len(extraps) >= 2:
            gap = float(np.max(np.abs(extraps[-1] - extraps[-2])))
            if gap > warn_tol:
                warnings.warn(
                    f"density extrapolation steps disagree by {gap:.2e} "
                    f"(> {warn_tol:.0e}); likely near an edge or cusp",
                    ExtrapolationWarning, stacklevel=2)
    return np.clip(out, 0.0, None)


def density(D: Deformation, E: float, etas: tuple[float, ...] = DENSITY_ETAS,
            warn_tol: float = 1e-4) -> float:
    """rho_D(E) = lim_{eta->0+} |Im m_D(E+i eta)| / pi."""
    return float(density_curve(D, np.asarray([float(E)]), etas, warn_tol)[0])


# ---------------------------------------------------------------------------
# Cumulative density, quantiles, bulk


def _support_window(D: Deformation, margin: float = 1.0) -> tuple[float, float]:
    # supp(mu_sc boxplus mu_D) is contained in [d_min - 2, d_max + 2]
    d = D.eigenvalues
    return float(d.min() - 2.0 - margin), float(d.max() + 2.0 + margin)


class CumulativeDensity:
    """Cached cumulative of rho_D built by adaptive Simpson refinement.

    Nodes concentrate where the local Simpson error estimate is large (the
    square-root edges); the cumulative values are interpolated with a
    monotone cubic, so quantile inversion is a plain bisection.
    """

    def __init__(self, D: Deformation, grid: int = DEFAULT_GRID,
                 margin: float = 1.0, tol: float = 1e-9, max_depth: int = 14):
        self.deformation = D
        lo, hi = _support_window(D, margin)
        width = hi - lo
        base = np.linspace(lo, hi, max(grid // 2, 16) + 1)
        rho = density_curve(D, base)
        a, b = base[:-1], base[1:]
        fa, fb = rho[:-1], rho[1:]
        mid = 0.5 * (a + b)
        fm = density_curve(D, mid)
        whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)

        pieces = []  # (a, b, integral)
        node_x = [base]
        node_f = [rho]
        for _ in range(max_depth):
            ml = 0.5 * (a + mid)
            mr = 0.5 * (mid + b)
            fml = density_curve(D, ml)
            fmr = density_curve(D, mr)
            node_x.append(ml)
            node_x.append(mr)
            node_f.append(fml)
            node_f.append(fmr)
            left = (mid - a) / 6.0 * (fa + 4.0 * fml + fm)
            right = (b - mid) / 6.0 * (fm + 4.0 * fmr + fb)
            refined = left + right
            err = np.abs(refined - whole) / 15.0
            ok = err <= tol * np.maximum((b - a) / width, 1e-6)
            corrected = refined + (refined - whole) / 15.0
            for aa, bb, s in zip(a[ok], b[ok], corrected[ok]):
                pieces.append((float(aa), float(bb), float(s)))
            keep = ~ok
            if not keep.any():
                break
            a = np.concatenate([a[keep], mid[keep]])
            b = np.concatenate([mid[keep], b[keep]])
            fa = np.concatenate([fa[keep], fm[keep]])
            fb = np.concatenate([fm[keep], fb[keep]])
            mid = np.concatenate([ml[keep], mr[keep]])
            fm = np.concatenate([fml[keep], fmr[keep]])
            whole = np.concatenate([left[keep], right[keep]])
        else:
            # depth cap reached: bank the current Simpson estimates
            for aa, bb, s in zip(a, b, whole):
                pieces.append((float(aa), float(bb), float(s)))

        pieces.sort(key=lambda p: p[0])
        edges = np.asarray([p[0] for p in pieces] + [pieces[-1][1]])
        cum = np.concatenate([[0.0], np.cumsum([p[2] for p in pieces])])
        self.x = edges
        self.F = cum
        self.mass = float(cum[-1])
        self._interp = PchipInterpolator(edges, cum, extrapolate=False)
        order = np.argsort(np.concatenate(node_x), kind="stable")
        self.nodes = np.concatenate(node_x)[order]
        self.node_density = np.concatenate(node_f)[order]

    def __call__(self, x):
        xv = np.clip(np.asarray(x, dtype=float), self.x[0], self.x[-1])
        return self._interp(xv)

    def quantile(self, p):
        """Leftmost x with F(x) >= p (vectorized bisection on the spline)."""
        p = np.atleast_1d(np.asarray(p, dtype=float))
        if np.any(p < -1e-9) or np.any(p > self.mass + 1e-6):
            raise ValueError("quantile levels outside the accumulated mass")
        target = np.clip(p, 0.0, self.mass)
        lo = np.full_like(target, self.x[0])
        hi = np.full_like(target, self.x[-1])
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            ge = self(mid) >= target
            hi = np.where(ge, mid, hi)
            lo = np.where(ge, lo, mid)
        return hi


def cumulative_density(D: Deformation, grid: int = DEFAULT_GRID,
                       margin: float = 1.0, tol: float = 1e-9) -> CumulativeDensity:
    return CumulativeDensity(D, grid=grid, margin=margin, tol=tol)


def quantiles(D: Deformation, n: int, grid: int = DEFAULT_GRID,
              cumulative: CumulativeDensity | None = None) -> np.ndarray:
    """gamma_i with  Int_{-inf}^{gamma_i} rho_D = i/n  for i = 1..n."""
    if n < 1:
        raise ValueError("need at least one quantile")
    cum = cumulative if cumulative is not None else cumulative_density(D, grid=grid)
    if abs(cum.mass - 1.0) > 1e-5:
        raise MdeConvergenceError(
            f"cumulative mass {cum.mass:.8f} deviates from 1 by more than 1e-5")
    levels = np.arange(1, n + 1) / n
    # tiny slack keeps the p = 1 target strictly inside the support, where
    # the cumulative is still strictly increasing; the induced quantile
    # shift is O(1e-9 / rho) in the bulk and ~(1e-9)^{2/3} at the edge
    targets = np.clip(levels * cum.mass - 1e-9, 0.0, cum.mass)
    return cum.quantile(targets)


def _refine_crossings(D: Deformation, level: float, outside: np.ndarray,
                      inside: np.ndarray, iters: int = 45) -> np.ndarray:
    """Vector bisection between rho < level (outside) and rho >= level (inside)."""
    outside = np.asarray(outside, dtype=float).copy()
    inside = np.asarray(inside, dtype=float).copy()
    for _ in range(iters):
        mid = 0.5 * (outside + inside)
        above = density_curve(D, mid) >= level
        inside = np.where(above, mid, inside)
        outside = np.where(above, outside, mid)
        if np.max(np.abs(inside - outside)) < 1e-10:
            break
    return 0.5 * (outside + inside)


def kappa_bulk(D: Deformation, kappa: float, grid: int = DEFAULT_GRID) -> list[tuple[float, float]]:
    """Maximal closed intervals {E : rho_D(E) >= kappa}, endpoints to ~1e-8."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    lo, hi = _support_window(D, margin=0.1)
    E = np.linspace(lo, hi, grid)
    rho = density_curve(D, E)
    mask = rho >= kappa
    runs = []
    i = 0
    while i < grid:
        if mask[i]:
            j = i
            while j + 1 < grid and mask[j + 1]:
                j += 1
            runs.append((i, j))
            i = j + 1
        else:
            i += 1
    if not runs:
        return []
    outside, inside, slots = [], [], []
    endpoints = {}
    for k, (i, j) in enumerate(runs):
        if i == 0:
            endpoints[(k, "left")] = E[0]
        else:
            outside.append(E[i - 1]); inside.append(E[i]); slots.append((k, "left"))
        if j == grid - 1:
            endpoints[(k, "right")] = E[-1]
        else:
            outside.append(E[j + 1]); inside.append(E[j]); slots.append((k, "right"))
    if slots:
        refined = _refine_crossings(D, kappa, np.asarray(outside), np.asarray(inside))
        for slot, val in zip(slots, refined):
            endpoints[slot] = float(val)
    return [(endpoints[(k, "left")], endpoints[(k, "right")])
            for k in range(len(runs))]


def support_intervals(D: Deformation, eps: float = 1e-7, grid: int = DEFAULT_GRID) -> list[tuple[float, float]]:
    """Intervals where rho_D exceeds a tiny floor; used for support distances."""
    return kappa_bulk(D, eps, grid=grid)


def distance_to_support(D: Deformation, z: complex,
                        intervals: list[tuple[float, float]] | None = None) -> float:
    intervals = intervals if intervals is not None else support_intervals(D)
    if not intervals:
        return float("inf")
    best = np.inf
    for a, b in intervals:
        dx = max(a - z.real, 0.0, z.real - b)
        best = min(best, float(np.hypot(dx, z.imag)))
    return best


# ---------------------------------------------------------------------------
# Deformation class check (square-root Hoelder partition)


@dataclass(frozen=True)
class ClassCheckResult:
    passed: bool
    n_segments: int
    segments: list[tuple[int, int]]
    worst_pair: tuple[int, int] | None
    worst_excess: float

    def __bool__(self) -> bool:
        return self.passed


def deformation_class_check(d, L: float) -> ClassCheckResult:
    """Check membership in the admissible deformation class with constant L.

    Requires max|d_i| <= L and a partition of the index range into at most L
    contiguous segments such that |d_j - d_k| <= L sqrt(|j-k|/N) within each
    segment.  Segments are built greedily left to right; greedy maximal
    extension is optimal for a pairwise condition closed under subintervals.
    """
    if isinstance(d, Deformation):
        d = d.eigenvalues
    d = np.sort(np.asarray(d, dtype=float))
    n = d.shape[0]
    if n == 0:
        return ClassCheckResult(True, 0, [], None, 0.0)
    norm_ok = float(np.max(np.abs(d))) <= L + 1e-12

    segments = []
    start = 0
    worst_pair = None
    worst_excess = -np.inf
    for k in range(1, n):
        idx = np.arange(start, k)
        lhs = d[k] - d[idx]
        rhs = L * np.sqrt((k - idx) / n)
        excess = lhs - rhs
        j = int(idx[np.argmax(excess)])
        top = float(np.max(excess))
        if top > worst_excess:
            worst_excess = top
            worst_pair = (j, k)
        if top > 1e-12:
            segments.append((start, k - 1))
            start = k
    segments.append((start, n - 1))
    max_segments = max(1.0, float(L))
    passed = norm_ok and len(segments) <= max_segments
    if n == 1:
        worst_excess = 0.0
    return ClassCheckResult(passed, len(segments), segments, worst_pair,
                            float(max(worst_excess, 0.0)))

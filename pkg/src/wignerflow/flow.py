"""Characteristic flow: integration, identities, domains, OU matrix evolution.

The flow shrinks the deformation, D_t = e^{-t/2} D_0, and moves the spectral
parameter by  dz/dt = -m(z_t) - z_t/2,  which has the closed-form solution
z_t = e^{-t/2} z_0 - 2 m_0(z_0) sinh(t/2) and transports the MDE solution as
M_t(z_t) = e^{t/2} M_0(z_0).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import mde
from .det_approx import SpectralPair, chain_trace, m2_avg, m2_trace, trace_prod
from .mde import Deformation, MdeConvergenceError, solve_mde

AXIS_FLOOR = 1e-9


@dataclass(frozen=True)
class FlowState:
    """One point on a characteristic trajectory."""

    t: float
    z: complex
    d_scale: float
    deformation: Deformation
    sol: mde.MdeSolution

    @property
    def pair(self) -> SpectralPair:
        return SpectralPair(z=self.z, deformation=self.deformation, sol=self.sol)


@dataclass(frozen=True)
class FlowTrajectory:
    states: list
    exited: bool = False

    @property
    def final(self) -> FlowState:
        return self.states[-1]


def flow_closed_form(nu0: SpectralPair, t: float) -> complex:
    """z_t = e^{-t/2} z_0 - 2 m_0(z_0) sinh(t/2)."""
    return np.exp(-t / 2.0) * nu0.z - 2.0 * nu0.m * np.sinh(t / 2.0)


def flow_map(nu0: SpectralPair, t: float, tol: float = 1e-13) -> FlowState:
    """Exact flow point at time t: closed-form z_t, rescaled D, fresh MDE solve."""
    scale = float(np.exp(-t / 2.0))
    z_t = complex(flow_closed_form(nu0, t))
    D_t = nu0.deformation.scaled(scale)
    # the flow transports m as m_t = e^{t/2} m_0, which is the warm start
    sol = solve_mde(D_t, z_t, tol=tol, m0=np.exp(t / 2.0) * nu0.m)
    return FlowState(t=float(t), z=z_t, d_scale=scale, deformation=D_t, sol=sol)


def _rhs(D0: Deformation, t: float, z: complex, m_guess: complex) -> tuple[complex, complex]:
    D_t = D0.scaled(float(np.exp(-t / 2.0)))
    sol = solve_mde(D_t, z, m0=m_guess)
    return -sol.m - z / 2.0, sol.m


def flow_integrate(nu0: SpectralPair, t_final: float, dt: float = 1e-3,
                   tol: float = 1e-13) -> FlowTrajectory:
    """RK4 integration of the characteristic ODE, re-solving the MDE per stage.

    Stops early (``exited=True``) if the trajectory reaches |Im z| < 1e-9.
    """
    if dt > 1e-3 + 1e-15:
        raise ValueError("flow_integrate requires dt <= 1e-3")
    D0 = nu0.deformation
    n_steps = max(1, int(np.ceil(t_final / dt - 1e-12)))
    h = t_final / n_steps
    t, z, m = 0.0, complex(nu0.z), nu0.m
    states = [FlowState(t=0.0, z=z, d_scale=1.0, deformation=D0, sol=nu0.sol)]
    for _ in range(n_steps):
        try:
            k1, m1 = _rhs(D0, t, z, m)
            k2, m2 = _rhs(D0, t + h / 2.0, z + h / 2.0 * k1, m1)
            k3, m3 = _rhs(D0, t + h / 2.0, z + h / 2.0 * k2, m2)
            k4, m4 = _rhs(D0, t + h, z + h * k3, m3)
        except (ValueError, MdeConvergenceError):
            return FlowTrajectory(states=states, exited=True)
        z_next = z + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if abs(z_next.imag) < AXIS_FLOOR:
            return FlowTrajectory(states=states, exited=True)
        t += h
        z = z_next
        scale = float(np.exp(-t / 2.0))
        D_t = D0.scaled(scale)
        sol = solve_mde(D_t, z, tol=tol, m0=m4)
        m = sol.m
        states.append(FlowState(t=t, z=z, d_scale=scale, deformation=D_t, sol=sol))
    return FlowTrajectory(states=states, exited=False)


@dataclass(frozen=True)
class BackwardResult:
    z0: complex
    D0: Deformation
    iterations: int
    residual: float
    dist_to_support: float


def flow_backward(z_T: complex, D_T: Deformation, T: float,
                  tol: float = 1e-10, max_iter: int = 50) -> BackwardResult:
    """Initial condition (z_0, D_0) whose characteristic reaches (z_T, D_T).

    D_0 = e^{T/2} D_T; z_0 is found by a Newton iteration on the closed-form
    flow map, warm-started above the target.  Reports the distance from z_0
    to the support of rho_{D_0}.
    """
    if not 0 <= T < 1:
        raise ValueError("flow_backward expects 0 <= T < 1")
    D0 = D_T.scaled(float(np.exp(T / 2.0)))
    z_T = complex(z_T)
    if T == 0:
        dist = mde.distance_to_support(D0, z_T)
        return BackwardResult(z_T, D0, 0, 0.0, dist)
    sgn = np.sign(z_T.imag) or 1.0
    z0 = z_T + 1j * sgn * T
    sinh_half = np.sinh(T / 2.0)
    exp_half = np.exp(-T / 2.0)
    m_guess = None
    residual = np.inf
    for it in range(1, max_iter + 1):
        sol = solve_mde(D0, z0, m0=m_guess)
        m_guess = sol.m
        F = exp_half * z0 - 2.0 * sol.m * sinh_half - z_T
        residual = abs(F)
        if residual <= tol:
            break
        # m'(z) = <M^2> / (1 - <M^2>)
        s2 = complex(np.mean(sol.diag**2))
        mprime = s2 / (1.0 - s2)
        step = F / (exp_half - 2.0 * mprime * sinh_half)
        cand = z0 - step
        if cand.imag * sgn <= 0:
            cand = complex(cand.real, 0.5 * z0.imag)
        z0 = cand
    else:
        raise MdeConvergenceError(
            f"backward Newton did not reach {tol:.1e} in {max_iter} steps "
            f"(last residual {residual:.3e})")
    dist = mde.distance_to_support(D0, z0)
    return BackwardResult(complex(z0), D0, it, float(residual), float(dist))


# ---------------------------------------------------------------------------
# Propagator quantities along a joint flow


@dataclass(frozen=True)
class PropagatorSample:
    """f_t = max(2 Re <M^I_{12,t}>, 0) and beta_t at one flow time."""

    t: float
    f: float
    beta_t: float
    s0: float | None = None


@dataclass(frozen=True)
class PropagatorReport:
    samples: list
    s0: float | None
    checks: dict


def _joint_pairs(nu1_0: SpectralPair, nu2_0: SpectralPair, t: float) -> tuple[SpectralPair, SpectralPair]:
    return flow_map(nu1_0, t).pair, flow_map(nu2_0, t).pair

def _f_beta(nu1_0: SpectralPair, nu2_0: SpectralPair, t: float) -> tuple[float, float, float]:
    p1, p2 = _joint_pairs(nu1_0, nu2_0, t)
    c = trace_prod(p1, p2)
    f = max(2.0 * (c / (1.0 - c)).real, 0.0)
    bound = np.pi * (p1.rho / p1.eta + p2.rho / p2.eta)
    violation = 2.0 * abs(c / (1.0 - c)) - bound
    return f, abs(1.0 - c), violation


def _gauss_integral(fun, a: float, b: float, order: int = 64) -> float:
    if b <= a:
        return 0.0
    nodes, weights = np.polynomial.legendre.leggauss(order)
    x = 0.5 * (b - a) * nodes + 0.5 * (a + b)
    return float(sum(w * fun(xx) for xx, w in zip(x, weights)) * 0.5 * (b - a))


def propagator_trace(nu1_0: SpectralPair, nu2_0: SpectralPair,
                     t_grid: np.ndarray) -> PropagatorReport:
    """f_r and beta_r along the joint flow, with the propagator identities.

    Checks recorded (never raised): the pointwise bound
    2|<M^I_12>| <= pi rho_1/eta_1 + pi rho_2/eta_2, the integral identity
    int_s^t f = 2 log(beta_{s ^ s0} / beta_{t ^ s0}), and the two-sided
    comparison beta_s ~ beta_t + (t - s).
    """
    t_grid = np.sort(np.asarray(t_grid, dtype=float))
    c0 = trace_prod(nu1_0, nu2_0)
    t_end = float(t_grid[-1])
    # closed form: c_t = e^t c_0, so Re<M^I> changes sign where e^t = Re c0/|c0|^2
    if c0.real <= 0:
        s0 = 0.0
    else:
        s0 = float(np.log(c0.real / abs(c0) ** 2))
        s0 = min(max(s0, 0.0), t_end)

    samples = []
    max_violation = -np.inf
    for t in t_grid:
        f, b, violation = _f_beta(nu1_0, nu2_0, float(t))
        max_violation = max(max_violation, violation)
        samples.append(PropagatorSample(t=float(t), f=f, beta_t=b, s0=s0))

    s, t = float(t_grid[0]), t_end
    fun = lambda r: _f_beta(nu1_0, nu2_0, r)[0]
    integral = (_gauss_integral(fun, s, min(s0, t))
                + _gauss_integral(fun, min(s0, t), t))
    beta_at = lambda r: _f_beta(nu1_0, nu2_0, r)[1]
    rhs = 2.0 * np.log(beta_at(min(s, s0)) / beta_at(min(t, s0)))

    betas = np.asarray([smp.beta_t for smp in samples])
    ratios = []
    for i in range(len(t_grid)):
        for j in range(i + 1, len(t_grid)):
            ratios.append(betas[i] / (betas[j] + (t_grid[j] - t_grid[i])))
    ratios = np.asarray(ratios) if ratios else np.asarray([1.0])

    checks = {
        "m12_bound_max_violation": float(max_violation),
        "propagator_integral": float(integral),
        "propagator_integral_rhs": float(rhs),
        "propagator_integral_error": float(abs(integral - rhs)),
        "beta_comparison_min": float(np.min(ratios)),
        "beta_comparison_max": float(np.max(ratios)),
    }
    return PropagatorReport(samples=samples, s0=s0, checks=checks)


# ---------------------------------------------------------------------------
# Spectral domain boundaries


def domain_boundary(D: Deformation, epsilon: float, N: int,
                    E_grid: np.ndarray) -> np.ndarray:
    """Solve eta * rho_D(E + i eta) = N^{-1+eps} per energy (unique root).

    eta -> eta*rho(E+i eta) is strictly increasing, so a vectorized bisection
    over the whole grid converges unconditionally.
    """
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    E = np.asarray(E_grid, dtype=float)
    target = float(N) ** (-1.0 + epsilon)

    def eta_rho(eta_vec):
        m, _ = mde.solve_mde_many(D, E + 1j * eta_vec)
        return eta_vec * np.abs(m.imag) / np.pi

    lo = np.full(E.shape, 1e-12)
    if np.any(eta_rho(lo) >= target):
        raise ValueError("target level below the solver floor eta = 1e-12")
    hi = np.full(E.shape, 1.0)
    for _ in range(40):
        need = eta_rho(hi) < target
        if not need.any():
            break
        hi = np.where(need, hi * 2.0, hi)
    else:
        raise ValueError("could not bracket the domain boundary from above")
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        above = eta_rho(mid) >= target
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    return 0.5 * (lo + hi)


class EmptyBulkError(ValueError):
    """The kappa-bulk of the density is empty."""


@dataclass(frozen=True)
class BulkDomain:
    """Bulk-restricted spectral domain: boundary curve minus gap notches.

    Each notch is a wedge over a gap (lo, hi) of the kappa-bulk with slope
    +-1 sides: {z : lo <= Re z <= hi, |Im z| <= min(Re z - lo, hi - Re z)}.
    Outer gaps extend to -inf / +inf.  Box bounds replace the impractically
    large polynomial clamps of the asymptotic formulation.
    """

    intervals: list
    curve_E: np.ndarray
    curve_eta: np.ndarray
    notches: list
    re_box: float
    im_box: float

    def boundary_eta(self, E: float) -> float:
        return float(np.interp(E, self.curve_E, self.curve_eta))

    def contains(self, z: complex) -> bool:
        if abs(z.real) > self.re_box or abs(z.imag) > self.im_box:
            return False
        if abs(z.imag) < self.boundary_eta(z.real):
            return False
        for lo, hi in self.notches:
            depth = min(z.real - lo, hi - z.real)
            if depth >= 0 and abs(z.imag) <= depth:
                return False
        return True


def bulk_domain_boundary(D: Deformation, kappa: float, epsilon: float, N: int,
                         E_grid: np.ndarray | None = None,
                         re_box: float | None = None,
                         im_box: float = 10.0) -> BulkDomain:
    """Bulk-restricted domain data: unrestricted curve plus gap notches."""
    intervals = mde.kappa_bulk(D, kappa)
    if not intervals:
        raise EmptyBulkError(f"kappa-bulk is empty for kappa = {kappa}")
    if E_grid is None:
        E_grid = np.linspace(intervals[0][0] - 1.0, intervals[-1][1] + 1.0, 513)
    curve = domain_boundary(D, epsilon, N, E_grid)
    notches = [(-np.inf, intervals[0][0])]
    for (a, b), (a2, _b2) in zip(intervals[:-1], intervals[1:]):
        notches.append((b, a2))
    notches.append((intervals[-1][1], np.inf))
    if re_box is None:
        re_box = 10.0 * max(D.norm_bound, 1.0)
    return BulkDomain(intervals=intervals, curve_E=np.asarray(E_grid),
                      curve_eta=curve, notches=notches,
                      re_box=float(re_box), im_box=float(im_box))


# ---------------------------------------------------------------------------
# Ornstein-Uhlenbeck matrix evolution


def gaussian_wigner(n: int, beta_sym: int, rng: np.random.Generator) -> np.ndarray:
    """GOE/GUE matrix with off-diagonal variance 1/n (stationary OU law)."""
    if beta_sym == 2:
        x = rng.standard_normal((n, n))
        y = rng.standard_normal((n, n))
        off = (x + 1j * y) / np.sqrt(2.0)
        W = (np.triu(off, 1) + np.triu(off, 1).conj().T) / np.sqrt(n)
        W = W + np.diag(rng.standard_normal(n) / np.sqrt(n)).astype(complex)
        return W
    if beta_sym == 1:
        x = rng.standard_normal((n, n))
        W = (np.triu(x, 1) + np.triu(x, 1).T) / np.sqrt(n)
        W = W + np.diag(rng.standard_normal(n) * np.sqrt(2.0 / n))
        return W
    raise ValueError("beta_sym must be 1 or 2")


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(rng)))


def ou_evolve(W: np.ndarray, s: float, t: float, dt: float = 1e-2,
              rng=0, beta_sym: int = 2, method: str = "exact") -> np.ndarray:
    """Evolve W by the matrix OU process dW = -W/2 dr + dB/sqrt(N).

    ``exact`` (default) steps with the OU transition kernel, which has no
    discretization bias: W <- e^{-h/2} W + fresh Gaussian with variance
    factor (1 - e^{-h}).  ``euler`` is the Euler-Maruyama discretization.
    """
    if t < s:
        raise ValueError("ou_evolve needs t >= s")
    if dt > 1e-2 + 1e-15:
        raise ValueError("ou_evolve requires dt <= 1e-2")
    if t == s:
        return np.array(W, copy=True)
    gen = _as_rng(rng)
    W = np.array(W, copy=True)
    n = W.shape[0]
    n_steps = max(1, int(np.ceil((t - s) / dt - 1e-12)))
    h = (t - s) / n_steps
    for _ in range(n_steps):
        G = gaussian_wigner(n, beta_sym, gen)
        if method == "exact":
            W = np.exp(-h / 2.0) * W + np.sqrt(1.0 - np.exp(-h)) * G
        elif method == "euler":
            W = W - (h / 2.0) * W + np.sqrt(h) * G
        else:
            raise ValueError(f"unknown OU stepping method {method!r}")
    return W


# ---------------------------------------------------------------------------
# Time derivative identity for the two-chain deterministic approximation


def m_evolution_check(nu1_0: SpectralPair, nu2_0: SpectralPair,
                      R1: np.ndarray, R2: np.ndarray, t: float,
                      dt_fd: float = 1e-4) -> float:
    """Relative error of d/dt <M^{R1}_{12,t} R2> against its closed form.

    The derivative equals <M^{R1}_{12,t} R2> + <M^{R1}_{12,t}> <M^{R2}_{21,t}>;
    the left side is estimated by a central finite difference along the flow.
    """
    def h(tt: float) -> complex:
        p1, p2 = _joint_pairs(nu1_0, nu2_0, tt)
        return m2_avg(p1, p2, R1, R2)

    p1, p2 = _joint_pairs(nu1_0, nu2_0, t)
    rhs = m2_avg(p1, p2, R1, R2) + m2_avg(p1, p2, R1) * m2_avg(p2, p1, R2)
    fd = (h(t + dt_fd) - h(t - dt_fd)) / (2.0 * dt_fd)
    return float(abs(fd - rhs) / max(abs(rhs), 1e-300))

"""Statistical acceptance harness: theorems rendered as finite-size checks.

A high-probability family bound "X is dominated by Y up to o(N^eps)" is
rendered falsifiable at desk scale as: the q-percentile (default 0.99) of
X/Y over trials and admissible indices must stay below a magnitude ceiling,
and its log-log slope across the N-ladder must stay below a slope ceiling.
All ceilings live in the config; reports carry every measured constant.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import det_approx as da
from . import ensemble as ens
from . import flow as fl
from . import mde

REAL_LIFT = 1e-7


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class DeformationSpec:
    """Generative deformation profile, materialized at any matrix size."""

    kind: str = "zero"            # zero | two_atom | equispaced | explicit
    amplitude: float = 0.0
    values: tuple = ()
    negate: bool = False

    def materialize(self, n: int) -> mde.Deformation:
        if self.kind == "zero":
            d = np.zeros(n)
        elif self.kind == "two_atom":
            if n % 2:
                raise ValueError("two_atom profiles need even n")
            d = np.concatenate([np.full(n // 2, -self.amplitude),
                                np.full(n - n // 2, self.amplitude)])
        elif self.kind == "equispaced":
            d = self.amplitude * (2.0 * np.arange(1, n + 1) - n - 1) / n
        elif self.kind == "explicit":
            if len(self.values) != n:
                raise ValueError("explicit profile has wrong length")
            d = np.asarray(self.values, dtype=float)
        else:
            raise ValueError(f"unknown deformation kind {self.kind!r}")
        if self.negate:
            d = -d
        return mde.Deformation(d)

    def key(self) -> tuple:
        return (self.kind, self.amplitude, tuple(self.values), self.negate)


@dataclass(frozen=True)
class ObservableSpec:
    """Deterministic observable profile; 1-D results are diagonal matrices."""

    kind: str = "alternating"     # identity | alternating | step | random_hermitian
    seed: int = 0

    def materialize(self, n: int) -> np.ndarray:
        if self.kind == "identity":
            return np.ones(n)
        if self.kind == "alternating":
            return np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
        if self.kind == "step":
            return np.concatenate([np.ones(n // 2), -np.ones(n - n // 2)])
        if self.kind == "random_hermitian":
            rng = ens.stream(self.seed, 0, "vectors")
            A = fl.gaussian_wigner(n, 2, rng)
            return A / np.linalg.norm(A, 2)
        raise ValueError(f"unknown observable kind {self.kind!r}")


def observable_norm(A: np.ndarray) -> float:
    A = np.asarray(A)
    return float(np.max(np.abs(A))) if A.ndim == 1 else float(np.linalg.norm(A, 2))


# Delta^2 = <(D1-D2)^2> = 4 a^2 = 0.5 for the default two-atom pair
_DEFAULT_AMP = 0.3535533905932738


@dataclass(frozen=True)
class ExperimentConfig:
    n_list: tuple = (256, 512, 1024)
    trials_per_n: int = 20
    kappa: float = 0.05
    bulk_margin: float = 0.02
    delta: float = 0.1
    eta_exponent: float = 0.6
    seed: int = 2024
    beta_sym: int = 2
    dist: str = "gaussian"
    d1: DeformationSpec = field(default_factory=lambda: DeformationSpec("two_atom", _DEFAULT_AMP))
    d2: DeformationSpec = field(
        default_factory=lambda: DeformationSpec("two_atom", _DEFAULT_AMP, negate=True))
    rigidity_d: DeformationSpec = field(default_factory=DeformationSpec)
    observables: tuple = (ObservableSpec("step"), ObservableSpec("alternating"))
    percentile_q: float = 0.99
    slope_ceiling: float = 0.15
    magnitude_ceiling: float = 50.0
    constant_ceiling: float = 20.0
    workers: int = 1
    grid: int = 4096
    zig_n: int = 512
    zig_trials: int = 10
    zig_time: float = 0.6
    zig_steps: int = 24
    zig_exponent_ceiling: float = 0.2

    def __post_init__(self):
        if list(self.n_list) != sorted(self.n_list):
            raise ValueError("n_list must be ascending")
        if self.trials_per_n < 5:
            raise ValueError("need at least 5 trials per N")
        if not 0 < self.eta_exponent < 1:
            raise ValueError("eta exponent must lie in (0, 1)")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        for key in ("d1", "d2", "rigidity_d"):
            if key in data and isinstance(data[key], dict):
                spec = dict(data[key])
                spec["values"] = tuple(spec.get("values", ()))
                data[key] = DeformationSpec(**spec)
        if "observables" in data:
            data["observables"] = tuple(
                ObservableSpec(**o) if isinstance(o, dict) else o
                for o in data["observables"])
        for key in ("n_list",):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)

    def content_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def default_config(**overrides) -> ExperimentConfig:
    return replace(ExperimentConfig(), **overrides) if overrides else ExperimentConfig()


def smoke_config(**overrides) -> ExperimentConfig:
    base = ExperimentConfig(n_list=(64, 128, 256), trials_per_n=6,
                            zig_n=128, zig_trials=3, zig_steps=10)
    return replace(base, **overrides) if overrides else base


# ---------------------------------------------------------------------------
# Scaling reports


@dataclass
class ScalingReport:
    test_name: str
    per_n: list
    slope: float | None
    slope_stderr: float | None
    passed: bool
    constants: dict
    ceilings: dict
    seed: int
    config_hash: str

    def to_json(self) -> dict:
        return {
            "test": self.test_name,
            "per_n": self.per_n,
            "slope": self.slope,
            "slope_stderr": self.slope_stderr,
            "pass": bool(self.passed),
            "constants": self.constants,
            "ceilings": self.ceilings,
            "seed": self.seed,
            "config_hash": self.config_hash,
        }


def scaling_regression(n_values, percentiles) -> tuple[float, float]:
    """Least-squares slope of log(percentile) against log(N), with stderr."""
    n_values = np.asarray(n_values, dtype=float)
    percentiles = np.asarray(percentiles, dtype=float)
    if n_values.size < 3:
        raise ValueError("scaling regression needs at least 3 sizes")
    if np.any(percentiles <= 0):
        raise ValueError("degenerate (zero) percentile in scaling regression")
    x = np.log(n_values)
    y = np.log(percentiles)
    xbar, ybar = x.mean(), y.mean()
    sxx = float(np.sum((x - xbar) ** 2))
    slope = float(np.sum((x - xbar) * (y - ybar)) / sxx)
    resid = y - (ybar + slope * (x - xbar))
    dof = x.size - 2
    stderr = float(np.sqrt(np.sum(resid**2) / dof / sxx)) if dof > 0 else float("nan")
    return slope, stderr


def _percentile_rows(samples_by_n: dict, q: float) -> list:
    rows = []
    for n in sorted(samples_by_n):
        s = np.asarray(samples_by_n[n], dtype=float)
        rows.append({
            "n": int(n),
            "samples": int(s.size),
            "percentile": float(np.percentile(s, 100.0 * q)),
            "median": float(np.median(s)),
            "max": float(np.max(s)),
        })
    return rows


def _finish_report(name: str, cfg: ExperimentConfig, samples_by_n: dict,
                   constants: dict | None = None,
                   extra_pass: dict | None = None,
                   magnitude_ceiling: float | None = None) -> ScalingReport:
    rows = _percentile_rows(samples_by_n, cfg.percentile_q)
    ceiling = cfg.magnitude_ceiling if magnitude_ceiling is None else magnitude_ceiling
    slope = stderr = None
    if len(rows) >= 3:
        slope, stderr = scaling_regression([r["n"] for r in rows],
                                           [max(r["percentile"], 1e-300) for r in rows])
    magnitude_ok = all(r["percentile"] <= ceiling for r in rows)
    slope_ok = slope is None or slope <= cfg.slope_ceiling
    extra = extra_pass or {}
    passed = magnitude_ok and slope_ok and all(extra.values())
    ceilings = {"magnitude": ceiling, "slope": cfg.slope_ceiling,
                "percentile_q": cfg.percentile_q}
    consts = dict(constants or {})
    consts.update({f"extra_pass_{k}": bool(v) for k, v in extra.items()})
    return ScalingReport(test_name=name, per_n=rows, slope=slope,
                         slope_stderr=stderr, passed=passed, constants=consts,
                         ceilings=ceilings, seed=cfg.seed,
                         config_hash=cfg.content_hash())


def _run_trials(worker, payloads, workers: int) -> list:
    if workers <= 1 or len(payloads) <= 1:
        return [worker(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, payloads))


# ---------------------------------------------------------------------------
# Bulk quantile scaffolding (deterministic, shared across trials)

_CUM_CACHE: dict = {}


def _cumulative(spec: DeformationSpec, n: int, grid: int) -> mde.CumulativeDensity:
    key = (spec.key(), n, grid)
    if key not in _CUM_CACHE:
        _CUM_CACHE[key] = mde.cumulative_density(spec.materialize(n), grid=grid)
    return _CUM_CACHE[key]


@dataclass(frozen=True)
class BulkData:
    deformation: mde.Deformation
    gammas: np.ndarray
    bulk_idx: np.ndarray
    intervals: list


_BULK_CACHE: dict = {}


def bulk_data(spec: DeformationSpec, n: int, kappa: float, margin: float,
              grid: int) -> BulkData:
    key = (spec.key(), n, kappa, margin, grid)
    if key in _BULK_CACHE:
        return _BULK_CACHE[key]
    D = spec.materialize(n)
    cum = _cumulative(spec, n, grid)
    gammas = mde.quantiles(D, n, cumulative=cum)
    intervals = mde.kappa_bulk(D, kappa, grid=grid)
    mask = np.zeros(n, dtype=bool)
    for a, b in intervals:
        mask |= (gammas >= a + margin) & (gammas <= b - margin)
    out = BulkData(deformation=D, gammas=gammas, bulk_idx=np.where(mask)[0],
                   intervals=intervals)
    _BULK_CACHE[key] = out
    return out


class PairGrid:
    """Deterministic pair data on the bulk quantile grid of two deformations.

    Carries, for every bulk pair (i, j): the linear term at
    (gamma_i + i*1e-7, gamma_j + i*1e-7), the decay weight
    Delta^2 + LT + |gamma_i - gamma_j|^2, the trace <V A> of each observable
    against the unstable direction, and both cutoff variants.
    """

    def __init__(self, cfg: ExperimentConfig, n: int,
                 spec1: DeformationSpec | None = None,
                 spec2: DeformationSpec | None = None):
        self.n = n
        spec1 = spec1 if spec1 is not None else cfg.d1
        spec2 = spec2 if spec2 is not None else cfg.d2
        self.b1 = bulk_data(spec1, n, cfg.kappa, cfg.bulk_margin, cfg.grid)
        self.b2 = bulk_data(spec2, n, cfg.kappa, cfg.bulk_margin, cfg.grid)
        D1, D2 = self.b1.deformation, self.b2.deformation
        self.delta2 = da.deformation_gap_sq(D1, D2)
        g1 = self.b1.gammas[self.b1.bulk_idx]
        g2 = self.b2.gammas[self.b2.bulk_idx]
        self.gamma1, self.gamma2 = g1, g2

        mat1 = mde.resolvent_diag_grid(D1, g1 + 1j * REAL_LIFT)
        mat2 = mde.resolvent_diag_grid(D2, g2 + 1j * REAL_LIFT)
        # both parameters sit in the upper half plane: the equal-sign branch
        # of LT applies, with the conjugated second factor
        S = mat1 @ mat2.conj().T / n                       # <M1 M2*>
        gap = D1.eigenvalues - D2.eigenvalues
        T = (mat1 * gap) @ mat2.conj().T / n                # <M1 (D1-D2) M2*>
        zdiff = (g1[:, None] + 1j * REAL_LIFT) - (g2[None, :] - 1j * REAL_LIFT)
        degenerate = np.abs(S) < 1e-14
        ratio = np.where(degenerate, 0.0, T / np.where(degenerate, 1.0, S))
        self.lt = np.where(degenerate, 1.0, np.minimum(np.abs(zdiff - ratio), 1.0))
        ediff = g1[:, None] - g2[None, :]
        self.weight = self.delta2 + self.lt + ediff**2

        # cutoffs: the eta factors are 1 at the 1e-7 lift
        chi_d2 = da.smoothstep_bump(self.delta2, cfg.delta)
        self.phi_smooth = da.smoothstep_bump(ediff, cfg.delta) * chi_d2
        self.phi_sharp = ((np.abs(ediff) <= cfg.delta) *
                          float(self.delta2 <= cfg.delta)).astype(float)

        # <V A> per pair for each observable; V uses the conjugated partner
        self.observables = []
        for spec in cfg.observables:
            A = spec.materialize(n)
            adiag = A if A.ndim == 1 else np.real(np.diag(A))
            vA = ((mat1 * adiag) @ mat2.conj().T / n) / np.where(degenerate, np.inf, S)
            norm_a = observable_norm(A)
            alpha = np.sort(A) if A.ndim == 1 else np.linalg.eigvalsh(
                (A + A.conj().T) / 2.0)
            shift = self.phi_smooth * vA
            lo, hi = alpha[0], alpha[-1]
            ring_norm = np.sqrt(np.maximum((lo - shift.real) ** 2,
                                           (hi - shift.real) ** 2) + shift.imag**2)
            self.observables.append({
                "spec": spec, "A": A, "vA": vA, "norm": norm_a,
                "ring_norm": ring_norm,
            })

        self.same_deformation = (D1.basis is None and D2.basis is None and
                                 np.array_equal(D1.eigenvalues, D2.eigenvalues))


def _grid_statistics(grid: "PairGrid", dec1, dec2, n: int) -> dict:
    U1b = dec1.eigenvectors[:, grid.b1.bulk_idx]
    U2b = dec2.eigenvectors[:, grid.b2.bulk_idx]
    O_I = U1b.conj().T @ U2b
    o_sq = np.abs(O_I) ** 2

    decay = np.minimum(n * grid.weight * o_sq, n * o_sq)
    if grid.same_deformation:
        ii = grid.b1.bulk_idx[:, None] == grid.b2.bulk_idx[None, :]
        decay = decay[~ii]
    out = {"decay": decay.ravel(), "overlap_sq": o_sq.ravel()}

    eth_ring, eth_decomp = [], []
    for obs in grid.observables:
        A = obs["A"]
        mid = A[:, None] * U2b if A.ndim == 1 else A @ U2b
        O_A = U1b.conj().T @ mid
        ring = np.abs(O_A - grid.phi_smooth * obs["vA"] * O_I)
        eth_ring.append((np.sqrt(n) * ring / obs["ring_norm"]).ravel())
        decomp = np.abs(O_A - grid.phi_sharp * obs["vA"] * O_I)
        eth_decomp.append((np.sqrt(n) * decomp / obs["norm"]).ravel())
    out["eth_ring"] = np.concatenate(eth_ring)
    out["eth_decomp"] = np.concatenate(eth_decomp)
    return out


def _eigenvector_trial(args) -> dict:
    cfg, n, trial, grid_cross, grid_same = args
    spec = ens.WignerSpec(n=n, beta_sym=cfg.beta_sym, dist=cfg.dist, seed=cfg.seed)
    W = ens.sample_wigner(spec, trial=trial)
    dec1 = ens.deform_and_solve(W, grid_cross.b1.deformation)
    dec2 = ens.deform_and_solve(W, grid_cross.b2.deformation)
    out = _grid_statistics(grid_cross, dec1, dec2, n)
    if grid_same is not None:
        # same-deformation ETH: phi = 1 near the diagonal, so the <V A>
        # subtraction is actually exercised; overlaps are exactly delta_ij
        same = _grid_statistics(grid_same, dec1, dec1, n)
        out["eth_ring"] = np.concatenate([out["eth_ring"], same["eth_ring"]])
        out["eth_decomp"] = np.concatenate([out["eth_decomp"], same["eth_decomp"]])
    return out


def run_eigenvector_stats(cfg: ExperimentConfig) -> dict:
    """One ensemble sweep feeding both the decay and the ETH statistics."""
    decay, eth = {}, {}
    constants = {}
    for n in cfg.n_list:
        grid_cross = PairGrid(cfg, n)
        grid_same = None
        if not grid_cross.same_deformation:
            grid_same = PairGrid(cfg, n, spec1=cfg.d1, spec2=cfg.d1)
        payloads = [(cfg, n, t, grid_cross, grid_same)
                    for t in range(cfg.trials_per_n)]
        results = _run_trials(_eigenvector_trial, payloads, cfg.workers)
        decay[n] = np.concatenate([r["decay"] for r in results])
        eth[n] = np.concatenate([np.concatenate([r["eth_ring"], r["eth_decomp"]])
                                 for r in results])
        constants[f"eth_ring_p99_n{n}"] = float(np.percentile(
            np.concatenate([r["eth_ring"] for r in results]), 100 * cfg.percentile_q))
        constants[f"eth_decomp_p99_n{n}"] = float(np.percentile(
            np.concatenate([r["eth_decomp"] for r in results]), 100 * cfg.percentile_q))
        constants[f"delta2_n{n}"] = float(grid_cross.delta2)
        constants[f"bulk_pairs_n{n}"] = int(grid_cross.gamma1.size * grid_cross.gamma2.size)
    return {
        "overlap_decay": _finish_report("overlap-decay", cfg, decay,
                                        constants={k: v for k, v in constants.items()
                                                   if "delta2" in k or "bulk" in k}),
        "eth": _finish_report("eth", cfg, eth, constants=constants),
    }


def verify_overlap_decay(cfg: ExperimentConfig) -> ScalingReport:
    """Decorrelation statistic N (Delta^2 + LT + |dE|^2)|O_ij|^2 ^ N|O_ij|^2."""
    return run_eigenvector_stats(cfg)["overlap_decay"]


def verify_eth(cfg: ExperimentConfig) -> ScalingReport:
    """sqrt(N)-normalized regular-observable statistics over bulk pairs."""
    return run_eigenvector_stats(cfg)["eth"]


# ---------------------------------------------------------------------------
# Rigidity


def _rigidity_trial(args) -> np.ndarray:
    cfg, n, trial, bulk = args
    spec = ens.WignerSpec(n=n, beta_sym=cfg.beta_sym, dist=cfg.dist, seed=cfg.seed)
    W = ens.sample_wigner(spec, trial=trial)
    dec = ens.deform_and_solve(W, bulk.deformation)
    lam_sorted = dec.eigenvalues
    idx = bulk.bulk_idx
    return n * np.abs(lam_sorted[idx] - bulk.gammas[idx])


def verify_rigidity(cfg: ExperimentConfig) -> ScalingReport:
    samples = {}
    for n in cfg.n_list:
        bulk = bulk_data(cfg.rigidity_d, n, cfg.kappa, cfg.bulk_margin, cfg.grid)
        payloads = [(cfg, n, t, bulk) for t in range(cfg.trials_per_n)]
        results = _run_trials(_rigidity_trial, payloads, cfg.workers)
        samples[n] = np.concatenate(results)
    return _finish_report("rigidity", cfg, samples)


# ---------------------------------------------------------------------------
# Local laws (averaged)


def _law_bound_general(n, eta1, eta2, params) -> float:
    return min(1.0 / (n * eta1 * eta2),
               1.0 / (np.sqrt(n * params.eta_star) * params.gamma_hat))


def _cross_transforms(U_left: np.ndarray, U_right: np.ndarray, obs: list) -> list:
    """U_left^H B U_right for each observable (1-D observables are diagonal)."""
    out = []
    for B in obs:
        mid = B[:, None] * U_right if np.asarray(B).ndim == 1 else B @ U_right
        out.append(U_left.conj().T @ mid)
    return out


def _avg_error_cases(cfg: ExperimentConfig, n: int) -> dict:
    """Deterministic setup for the averaged two-resolvent law.

    The general cases use the cross-deformation pair at two sign variants of
    Im z2; all (B1, B2) choices share the same eigenbases inside a trial, so
    the case list stores observable indices, bounds and det approximations.
    """
    eta = float(n) ** (-cfg.eta_exponent)
    b1 = bulk_data(cfg.d1, n, cfg.kappa, cfg.bulk_margin, cfg.grid)
    b2 = bulk_data(cfg.d2, n, cfg.kappa, cfg.bulk_margin, cfg.grid)
    e1 = float(b1.gammas[int(0.35 * n)])
    e2 = float(b2.gammas[int(0.65 * n)])
    obs = [spec.materialize(n) for spec in cfg.observables]
    norms = [observable_norm(B) for B in obs]
    variants = []
    for sign in (1, -1):
        nu1 = da.SpectralPair.solve(b1.deformation, complex(e1, eta))
        nu2 = da.SpectralPair.solve(b2.deformation, complex(e2, sign * eta))
        params = da.control_params(nu1, nu2)
        bound = _law_bound_general(n, eta, eta, params)
        dets = {(i, j): da.m2_avg(nu1, nu2, obs[i], obs[j])
                for i in range(len(obs)) for j in range(len(obs))}
        variants.append({"z1": nu1.z, "z2": nu2.z, "bound": bound, "dets": dets})
    return {"obs": obs, "norms": norms, "variants": variants,
            "D1": b1.deformation, "D2": b2.deformation}


def _ring(raw: np.ndarray, shift: complex, n: int) -> np.ndarray:
    """A - shift * I for diagonal (1-D) or dense observables."""
    if np.asarray(raw).ndim == 1:
        return raw - shift * np.ones(n)
    return raw - shift * np.eye(n)


def _regular_cases(cfg: ExperimentConfig, n: int) -> dict:
    """Same-deformation nearby-energy pairs where the cutoff phi equals 1."""
    eta = float(n) ** (-cfg.eta_exponent)
    b1 = bulk_data(cfg.d1, n, cfg.kappa, cfg.bulk_margin, cfg.grid)
    D = b1.deformation
    i0 = int(0.45 * n)
    e1 = float(b1.gammas[i0])
    # second energy within delta/4, so every cutoff factor sits at 1
    j0 = int(np.argmin(np.abs(b1.gammas - (e1 + cfg.delta / 4.0))))
    e2 = float(b1.gammas[j0])
    nu1 = da.SpectralPair.solve(D, complex(e1, eta))
    nu2 = da.SpectralPair.solve(D, complex(e2, eta))
    params = da.control_params(nu1, nu2)

    raw1 = cfg.observables[0].materialize(n)
    raw2 = cfg.observables[-1].materialize(n)
    ring1 = _ring(raw1, da.phi_cutoff(nu1, nu2, cfg.delta)
                  * da.v_trace_with(nu1, nu2, raw1), n)
    ring2 = _ring(raw2, da.phi_cutoff(nu2, nu1, cfg.delta)
                  * da.v_trace_with(nu2, nu1, raw2), n)
    det_reg = da.m2_avg(nu1, nu2, ring1, ring2)
    det_reg1 = da.m2_avg(nu1, nu2, ring1, raw2)
    det_gen = da.m2_avg(nu1, nu2, raw1, raw2)
    eta_star = params.eta_star
    return {
        "nu1": nu1, "nu2": nu2, "params": params,
        "ring1": ring1, "ring2": ring2, "raw1": raw1, "raw2": raw2,
        "det_reg": det_reg, "det_reg1": det_reg1, "det_gen": det_gen,
        "bound_reg1": min(1.0 / (n * eta * eta),
                          1.0 / np.sqrt(n * eta_star * params.gamma_hat)),
        "bound_reg2": min(1.0 / (n * eta * eta), 1.0 / np.sqrt(n * eta_star)),
        "bound_gen": _law_bound_general(n, eta, eta, params),
    }


def _avg_law_trial(args) -> dict:
    cfg, n, trial, cases, reg = args
    spec = ens.WignerSpec(n=n, beta_sym=cfg.beta_sym, dist=cfg.dist, seed=cfg.seed)
    W = ens.sample_wigner(spec, trial=trial)
    decs = {}

    def dec_for(D: mde.Deformation):
        key = D.eigenvalues.tobytes()
        if key not in decs:
            decs[key] = ens.deform_and_solve(W, D)
        return decs[key]

    out = {"general": [], "reg1": [], "reg2": [], "ratio": []}
    for case in cases:
        d1 = dec_for(case.nu1.deformation)
        d2 = dec_for(case.nu2.deformation)  # keyed by spectrum, reused
        kern = ens.ChainKernel(d1, d2, case.B1, case.B2)
        err = abs(kern.avg(case.nu1.z, case.nu2.z) - case.det)
        out["general"].append(err / (case.bound * case.norms))

    d1 = dec_for(reg["nu1"].deformation)
    kern_reg = ens.ChainKernel(d1, d1, reg["ring1"], reg["ring2"])
    kern_reg1 = ens.ChainKernel(d1, d1, reg["ring1"], reg["raw2"])
    kern_gen = ens.ChainKernel(d1, d1, reg["raw1"], reg["raw2"])
    z1, z2 = reg["nu1"].z, reg["nu2"].z
    err_reg = abs(kern_reg.avg(z1, z2) - reg["det_reg"])
    err_reg1 = abs(kern_reg1.avg(z1, z2) - reg["det_reg1"])
    err_gen = abs(kern_gen.avg(z1, z2) - reg["det_gen"])
    n_reg = observable_norm(reg["ring1"]) * observable_norm(reg["ring2"])
    n_reg1 = observable_norm(reg["ring1"]) * observable_norm(reg["raw2"])
    n_gen = observable_norm(reg["raw1"]) * observable_norm(reg["raw2"])
    out["reg1"].append(err_reg1 / (reg["bound_reg1"] * n_reg1))
    out["reg2"].append(err_reg / (reg["bound_reg2"] * n_reg))
    if err_gen > 0:
        out["ratio"].append((err_reg / n_reg) / (err_gen / n_gen))
    return out


def verify_local_law_avg(cfg: ExperimentConfig) -> ScalingReport:
    """Averaged two-resolvent law, general and regular normalizations."""
    samples = {}
    constants = {}
    ratios = []
    for n in cfg.n_list:
        cases = _avg_error_cases(cfg, n)
        reg = _regular_cases(cfg, n)
        payloads = [(cfg, n, t, cases, reg) for t in range(cfg.trials_per_n)]
        results = _run_trials(_avg_law_trial, payloads, cfg.workers)
        gen = np.concatenate([np.asarray(r["general"]) for r in results])
        r1 = np.concatenate([np.asarray(r["reg1"]) for r in results])
        r2 = np.concatenate([np.asarray(r["reg2"]) for r in results])
        samples[n] = np.concatenate([gen, r1, r2])
        ratios.extend(x for r in results for x in r["ratio"])
        q = 100 * cfg.percentile_q
        constants[f"general_p99_n{n}"] = float(np.percentile(gen, q))
        constants[f"reg1_p99_n{n}"] = float(np.percentile(r1, q))
        constants[f"reg2_p99_n{n}"] = float(np.percentile(r2, q))
        constants[f"gamma_hat_reg_n{n}"] = float(reg["params"].gamma_hat)
    median_ratio = float(np.median(ratios)) if ratios else float("nan")
    constants["median_ratio_regular_general"] = median_ratio
    return _finish_report("local-law-avg", cfg, samples, constants=constants,
                          extra_pass={"sqrt_gamma_improvement": median_ratio <= 1.0})


# ---------------------------------------------------------------------------
# Local laws (isotropic)


def _iso_vectors(cfg: ExperimentConfig, n: int) -> list:
    rng = ens.stream(cfg.seed, 0, "vectors")
    e0 = np.zeros(n); e0[0] = 1.0
    em = np.zeros(n); em[n // 2] = 1.0
    r1 = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    r2 = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    r1 /= np.linalg.norm(r1)
    r2 /= np.linalg.norm(r2)
    return [(e0, em), (r1, r2), (e0, r1)]


def _iso_law_trial(args) -> dict:
    cfg, n, trial, setup = args
    spec = ens.WignerSpec(n=n, beta_sym=cfg.beta_sym, dist=cfg.dist, seed=cfg.seed)
    W = ens.sample_wigner(spec, trial=trial)
    out = {"iso2": [], "iso3": [], "iso2_reg": [], "iso3_reg": [], "iso3_mixed": []}

    gen = setup["general"]
    d1 = ens.deform_and_solve(W, gen["nu1"].deformation)
    d2 = ens.deform_and_solve(W, gen["nu2"].deformation)
    z1, z2 = gen["nu1"].z, gen["nu2"].z
    p = gen["params"]
    norm2 = np.sqrt(n * p.ell * p.eta_star * p.gamma_hat)
    for B1, dets in zip(gen["obs"], gen["dets"]):
        kern = ens.ChainKernel(d1, d2, B1, gen["obs"][0])
        nb1 = observable_norm(B1)
        for (x, y), det in zip(setup["vectors"], dets):
            err = abs(kern.iso2(z1, z2, x, y) - det)
            out["iso2"].append(err * norm2 / nb1)
            chain3 = kern.iso3(z1, z2, np.conj(z1), x, y, star_last=True)
            out["iso3"].append(abs(chain3) * p.ell * p.gamma_hat
                               / (nb1 * observable_norm(gen["obs"][0])))

    reg = setup["regular"]
    dr = ens.deform_and_solve(W, reg["nu1"].deformation)
    z1, z2 = reg["nu1"].z, reg["nu2"].z
    pr = reg["params"]
    norm2r = np.sqrt(n * pr.ell * pr.eta_star)
    kern_r = ens.ChainKernel(dr, dr, reg["ring1"], reg["ring2"])
    kern_m = ens.ChainKernel(dr, dr, reg["ring1"], reg["raw2"])
    nr1 = observable_norm(reg["ring1"])
    nr2 = observable_norm(reg["ring2"])
    nraw2 = observable_norm(reg["raw2"])
    for (x, y), det in zip(setup["vectors"], reg["dets2"]):
        err = abs(kern_r.iso2(z1, z2, x, y) - det)
        out["iso2_reg"].append(err * norm2r / nr1)
        chain3 = kern_r.iso3(z1, z2, np.conj(z1), x, y, star_last=True)
        out["iso3_reg"].append(abs(chain3) * pr.ell / (nr1 * nr2))
        mixed = kern_m.iso3(z1, z2, np.conj(z1), x, y, star_last=True)
        out["iso3_mixed"].append(abs(mixed) * pr.ell * np.sqrt(pr.gamma_hat)
                                 / (nr1 * nraw2))
    return out


def _iso_setup(cfg: ExperimentConfig, n: int) -> dict:
    eta = float(n) ** (-cfg.eta_exponent)
    vectors = _iso_vectors(cfg, n)
    b1 = bulk_data(cfg.d1, n, cfg.kappa, cfg.bulk_margin, cfg.grid)
    b2 = bulk_data(cfg.d2, n, cfg.kappa, cfg.bulk_margin, cfg.grid)
    nu1 = da.SpectralPair.solve(b1.deformation, complex(float(b1.gammas[int(0.4 * n)]), eta))
    nu2 = da.SpectralPair.solve(b2.deformation, complex(float(b2.gammas[int(0.6 * n)]), -eta))
    obs = [spec.materialize(n) for spec in cfg.observables]
    dets = [[da.m2_bilinear(nu1, nu2, B, x, y) for (x, y) in vectors] for B in obs]
    general = {"nu1": nu1, "nu2": nu2, "params": da.control_params(nu1, nu2),
               "obs": obs, "dets": dets}
    regular = _regular_cases(cfg, n)
    regular["dets2"] = [da.m2_bilinear(regular["nu1"], regular["nu2"],
                                       regular["ring1"], x, y) for (x, y) in vectors]
    return {"vectors": vectors, "general": general, "regular": regular}


def verify_local_law_iso(cfg: ExperimentConfig) -> ScalingReport:
    """Isotropic two- and three-resolvent laws at eta = N^{-a}."""
    samples = {}
    constants = {}
    for n in cfg.n_list:
        setup = _iso_setup(cfg, n)
        payloads = [(cfg, n, t, setup) for t in range(cfg.trials_per_n)]
        results = _run_trials(_iso_law_trial, payloads, cfg.workers)
        merged = {k: np.concatenate([np.asarray(r[k]) for r in results])
                  for k in results[0]}
        samples[n] = np.concatenate(list(merged.values()))
        q = 100 * cfg.percentile_q
        for k, v in merged.items():
            constants[f"{k}_p99_n{n}"] = float(np.percentile(v, q))
    return _finish_report("local-law-iso", cfg, samples, constants=constants)


# ---------------------------------------------------------------------------
# Deterministic stability / admissibility grids


def verify_stability_relations(cfg: ExperimentConfig, n: int | None = None) -> dict:
    """Measured constants for the stability bounds on a bulk grid.

    Records min beta/(rho1+rho2)^2, the two-sided beta*/gamma_hat window, the
    quarter-power ceiling, and the real-axis ratio window.
    """
    n = n or min(cfg.n_list)
    b1 = bulk_data(cfg.d1, n, cfg.kappa, cfg.bulk_margin, cfg.grid)
    b2 = bulk_data(cfg.d2, n, cfg.kappa, cfg.bulk_margin, cfg.grid)
    fractions = np.linspace(0.2, 0.8, 5)
    e1s = np.asarray([float(b1.gammas[int(f * n)]) for f in fractions])
    e2s = np.asarray([float(b2.gammas[int(f * n)]) for f in fractions])
    etas = (1e-3, 1e-2, 1e-1, 0.5)
    dpairs = [(b1.deformation, b2.deformation), (b1.deformation, b1.deformation)]

    energies = np.concatenate([e1s, e2s])
    banks = {}
    for D in (b1.deformation, b2.deformation):
        zs = np.concatenate([energies + 1j * eta
                             for eta in list(etas) + [REAL_LIFT]])
        banks[id(D)] = {(round(p.energy, 12), p.eta): p
                        for p in da.solve_pairs(D, zs)}

    def pair_of(D, e, eta):
        return banks[id(D)][(round(float(e), 12), eta)]

    ratios_rho, ratios_lo, ratios_q = [], [], []
    count = 0
    for D1, D2 in dpairs:
        for eta1 in etas[:2]:
            for eta2 in etas[2:]:
                for e1 in e1s:
                    for e2 in e2s:
                        nu1 = pair_of(D1, e1, eta1)
                        nu2 = pair_of(D2, e2, eta2)
                        p = da.control_params(nu1, nu2)
                        ratios_rho.append(p.beta / (nu1.rho + nu2.rho) ** 2)
                        ratios_lo.append(p.beta_star / p.gamma_hat)
                        ratios_q.append(p.beta_star / p.gamma_hat**0.25)
                        count += 1

    real_ratios = []
    for D1, D2 in dpairs:
        for e1 in e1s:
            for e2 in e2s:
                p = da.control_params(pair_of(D1, e1, REAL_LIFT),
                                      pair_of(D2, e2, REAL_LIFT))
                real_ratios.append(p.beta_star / p.gamma_hat)
    real_ratios = np.asarray(real_ratios)

    report = {
        "test": "stability-relations",
        "grid_points": count,
        "min_beta_over_rho_sq": float(np.min(ratios_rho)),
        "min_beta_star_over_gamma": float(np.min(ratios_lo)),
        "max_beta_star_over_gamma": float(np.max(ratios_lo)),
        "max_beta_star_over_gamma_quarter": float(np.max(ratios_q)),
        "real_axis_min_ratio": float(np.min(real_ratios)),
        "real_axis_max_ratio": float(np.max(real_ratios)),
        "real_axis_spread": float(np.max(real_ratios) / np.min(real_ratios)),
        "seed": cfg.seed,
        "config_hash": cfg.content_hash(),
    }
    report["pass"] = bool(
        report["min_beta_star_over_gamma"] >= 0.02
        and report["max_beta_star_over_gamma_quarter"] <= 20.0
        and report["real_axis_spread"] <= 1e3)
    return report


def verify_admissibility(cfg: ExperimentConfig, n: int | None = None) -> dict:
    """Control-parameter admissibility along characteristic flows.

    Checks the stability sandwich (eta/rho sum capped vs gamma_hat vs beta*),
    two-sided time comparability of gamma_hat, and vague monotonicity in the
    imaginary shift.
    """
    n = n or min(cfg.n_list)
    b1 = bulk_data(cfg.d1, n, cfg.kappa, cfg.bulk_margin, cfg.grid)
    b2 = bulk_data(cfg.d2, n, cfg.kappa, cfg.bulk_margin, cfg.grid)
    class_1 = mde.deformation_class_check(b1.deformation.spectrum,
                                          max(2.0, b1.deformation.norm_bound))
    class_2 = mde.deformation_class_check(b2.deformation.spectrum,
                                          max(2.0, b2.deformation.norm_bound))

    e1 = float(b1.gammas[int(0.4 * n)])
    e2 = float(b2.gammas[int(0.6 * n)])
    nu1 = da.SpectralPair.solve(b1.deformation, complex(e1, 0.8))
    nu2 = da.SpectralPair.solve(b2.deformation, complex(e2, 0.6))

    T = 0.5
    t_grid = np.linspace(0.0, T, 11)
    gammas, betas, lower = [], [], []
    pairs = []
    for t in t_grid:
        p1 = fl.flow_map(nu1, float(t)).pair
        p2 = fl.flow_map(nu2, float(t)).pair
        p = da.control_params(p1, p2)
        gammas.append(p.gamma_hat)
        betas.append(p.beta_star)
        lower.append(min(p1.eta / p1.rho + p2.eta / p2.rho, 1.0))
        pairs.append((p1, p2))
    gammas = np.asarray(gammas)
    betas = np.asarray(betas)
    lower = np.asarray(lower)

    sandwich_lo = float(np.max(lower / gammas))
    sandwich_hi = float(np.max(gammas / betas))

    time_ratios = []
    for i in range(len(t_grid)):
        for j in range(i + 1, len(t_grid)):
            time_ratios.append(gammas[i] / (gammas[j] + (t_grid[j] - t_grid[i])))
    time_ratios = np.asarray(time_ratios)

    shift_ratios = [1.0]
    for x in (0.05, 0.2, 1.0):
        for p1, p2 in pairs[:: len(pairs) // 3 or 1]:
            g0 = da.gamma_hat(p1, p2)
            g_shift2 = da.gamma_hat(p1, da.SpectralPair.solve(p2.deformation, p2.z + 1j * x))
            g_shift1 = da.gamma_hat(da.SpectralPair.solve(p1.deformation, p1.z + 1j * x), p2)
            shift_ratios.append(g0 / min(g_shift1, g_shift2))
    shift_ratios = np.asarray(shift_ratios)

    report = {
        "test": "admissibility",
        "deformation_class_ok": bool(class_1.passed and class_2.passed),
        "sandwich_lower_constant": sandwich_lo,
        "sandwich_upper_constant": sandwich_hi,
        "time_ratio_min": float(np.min(time_ratios)),
        "time_ratio_max": float(np.max(time_ratios)),
        "shift_ratio_max": float(np.max(shift_ratios)),
        "seed": cfg.seed,
        "config_hash": cfg.content_hash(),
    }
    C = cfg.constant_ceiling
    report["pass"] = bool(
        report["deformation_class_ok"]
        and sandwich_lo <= C and sandwich_hi <= C
        and report["time_ratio_max"] <= C
        and report["time_ratio_min"] >= 1.0 / C
        and report["shift_ratio_max"] <= C)
    return report


# ---------------------------------------------------------------------------
# Zig flow (OU evolution along characteristics)


def _zig_trial(args) -> dict:
    cfg, plan, trial = args
    n = cfg.zig_n
    spec = ens.WignerSpec(n=n, beta_sym=cfg.beta_sym, dist=cfg.dist, seed=cfg.seed)
    rng = ens.stream(cfg.seed, trial, "ou")
    W = ens.sample_wigner(spec, trial=trial)
    B1, B2 = plan["B1"], plan["B2"]
    path = []
    t_prev = 0.0
    for step in plan["steps"]:
        t = step["t"]
        if t > t_prev:
            W = fl.ou_evolve(W, t_prev, t, dt=1e-2, rng=rng,
                             beta_sym=cfg.beta_sym, method="exact")
            t_prev = t
        dec1 = ens.deform_and_solve(W, step["D1"])
        dec2 = ens.deform_and_solve(W, step["D2"])
        kern = ens.ChainKernel(dec1, dec2, B1, B2)
        g = kern.avg(step["z1"], step["z2"]) - step["det"]
        path.append(abs(g) / step["alpha"])
    return {"max_ratio": float(np.max(path)), "path": path,
            "endpoint": float(path[-1])}


def zig_plan(cfg: ExperimentConfig) -> dict:
    """Deterministic characteristics data for the zig simulation."""
    n = cfg.zig_n
    T = cfg.zig_time
    eta_T = float(n) ** (-cfg.eta_exponent)
    b1 = bulk_data(cfg.d1, n, cfg.kappa, cfg.bulk_margin, cfg.grid)
    b2 = bulk_data(cfg.d2, n, cfg.kappa, cfg.bulk_margin, cfg.grid)
    z1_T = complex(float(b1.gammas[int(0.45 * n)]), eta_T)
    z2_T = complex(float(b2.gammas[int(0.55 * n)]), -eta_T)
    back1 = fl.flow_backward(z1_T, b1.deformation, T)
    back2 = fl.flow_backward(z2_T, b2.deformation, T)
    nu1_0 = da.SpectralPair.solve(back1.D0, back1.z0)
    nu2_0 = da.SpectralPair.solve(back2.D0, back2.z0)
    B1 = cfg.observables[0].materialize(n)
    B2 = cfg.observables[-1].materialize(n)
    nB = observable_norm(B1) * observable_norm(B2)

    steps = []
    for t in np.linspace(0.0, T, cfg.zig_steps + 1):
        s1 = fl.flow_map(nu1_0, float(t))
        s2 = fl.flow_map(nu2_0, float(t))
        p = da.control_params(s1.pair, s2.pair)
        alpha = min(1.0 / (n * s1.pair.eta * s2.pair.eta),
                    1.0 / (np.sqrt(n * p.ell) * p.gamma_hat)) * nB
        det = da.m2_avg(s1.pair, s2.pair, B1, B2)
        steps.append({"t": float(t), "z1": s1.z, "z2": s2.z,
                      "D1": s1.deformation, "D2": s2.deformation,
                      "alpha": float(alpha), "det": det,
                      "gamma_hat": p.gamma_hat})
    return {"steps": steps, "B1": B1, "B2": B2,
            "dist0": (back1.dist_to_support, back2.dist_to_support)}


def verify_zig_flow(cfg: ExperimentConfig) -> ScalingReport:
    """OU evolution along characteristics; max_t |g_t| / alpha_t per trial."""
    plan = zig_plan(cfg)
    payloads = [(cfg, plan, t) for t in range(cfg.zig_trials)]
    results = _run_trials(_zig_trial, payloads, cfg.workers)
    maxima = np.asarray([r["max_ratio"] for r in results])
    ceiling = float(cfg.zig_n) ** cfg.zig_exponent_ceiling
    samples = {cfg.zig_n: maxima}
    constants = {
        "ceiling_n_pow": ceiling,
        "endpoint_median": float(np.median([r["endpoint"] for r in results])),
        "dist0_1": float(plan["dist0"][0]),
        "dist0_2": float(plan["dist0"][1]),
        "max_over_trials": float(np.max(maxima)),
    }
    return _finish_report("zig-flow", cfg, samples, constants=constants,
                          magnitude_ceiling=ceiling,
                          extra_pass={"max_below_ceiling": float(np.max(maxima)) <= ceiling})


# ---------------------------------------------------------------------------
# Suites


def dump_overlap_samples(cfg: ExperimentConfig, path, n: int | None = None,
                         trial: int = 0, max_rows: int = 500_000) -> int:
    """CSV dump of per-pair overlap samples for one trial (behind a CLI flag).

    Columns: i, j, gamma_i, gamma_j, overlap_sq, statistic.  Row count is
    capped to keep the file desk-sized.
    """
    n = n or min(cfg.n_list)
    grid = PairGrid(cfg, n)
    spec = ens.WignerSpec(n=n, beta_sym=cfg.beta_sym, dist=cfg.dist, seed=cfg.seed)
    W = ens.sample_wigner(spec, trial=trial)
    dec1 = ens.deform_and_solve(W, grid.b1.deformation)
    dec2 = ens.deform_and_solve(W, grid.b2.deformation)
    U1b = dec1.eigenvectors[:, grid.b1.bulk_idx]
    U2b = dec2.eigenvectors[:, grid.b2.bulk_idx]
    o_sq = np.abs(U1b.conj().T @ U2b) ** 2
    stat = np.minimum(n * grid.weight * o_sq, n * o_sq)
    rows = 0
    with open(path, "w") as fh:
        fh.write("i,j,gamma_i,gamma_j,overlap_sq,statistic\n")
        for a, i in enumerate(grid.b1.bulk_idx):
            if rows >= max_rows:
                break
            for b, j in enumerate(grid.b2.bulk_idx):
                fh.write(f"{i},{j},{grid.gamma1[a]:.17g},{grid.gamma2[b]:.17g},"
                         f"{o_sq[a, b]:.17g},{stat[a, b]:.17g}\n")
                rows += 1
                if rows >= max_rows:
                    break
    return rows


TESTS = {
    "overlap-decay": verify_overlap_decay,
    "eth": verify_eth,
    "rigidity": verify_rigidity,
    "local-law-avg": verify_local_law_avg,
    "local-law-iso": verify_local_law_iso,
    "stability-relations": verify_stability_relations,
    "admissibility": verify_admissibility,
    "zig-flow": verify_zig_flow,
}

SUITES = {
    "smoke": ("stability-relations", "admissibility", "rigidity",
              "local-law-avg", "local-law-iso"),
    "full": tuple(TESTS),
}


def run_tests(cfg: ExperimentConfig, names) -> dict:
    """Run the named tests; eigenvector tests share one ensemble sweep."""
    reports = {}
    names = list(names)
    if "overlap-decay" in names and "eth" in names:
        shared = run_eigenvector_stats(cfg)
        reports["overlap-decay"] = shared["overlap_decay"].to_json()
        reports["eth"] = shared["eth"].to_json()
        names = [x for x in names if x not in ("overlap-decay", "eth")]
    for name in names:
        if name not in TESTS:
            raise KeyError(f"unknown test {name!r}")
        rep = TESTS[name](cfg)
        reports[name] = rep.to_json() if isinstance(rep, ScalingReport) else rep
    return reports

"""Numerical verification of the measure-theoretic building blocks:
bounce-map Jacobian laws, small-exit-time scaling, uniform boundedness of
chain-measure masses, resonance-band scaling, and Doeblin overlap of the
discretized bounce chain.

Every Monte-Carlo statistic carries a CLT standard error and comparisons
are made with 3-sigma bands; runs are bit-reproducible under fixed seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .boundary import bad_set_indicator, bounce_batch, cycle_ensemble, sample_emission
from .characteristics import bounce_jacobian
from .fields import FieldConfig, Regime, TemperatureField
from .stationary import BounceKernel
from .streams import stream


@dataclass
class VerificationConfig:
    samples: int = 1_000_000
    delta_grid: tuple = (1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2, 1e-1)
    eps_grid: tuple = (0.01, 0.02, 0.05, 0.1, 0.2)
    i_max: int = 50
    T0: float = 2.0
    horizons: tuple = (10.0, 40.0)
    chains: int = 100_000
    doeblin_grid: int = 16
    doeblin_samples_per_cell: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.samples < 1 or self.i_max < 1 or self.chains < 1:
            raise ValueError("all counts must be >= 1")
        for grid in (self.delta_grid, self.eps_grid):
            if not all(a < b for a, b in zip(grid, grid[1:])):
                raise ValueError("grids must be strictly increasing")


# ---------------------------------------------------------------------------
# Jacobian law
# ---------------------------------------------------------------------------

@dataclass
class JacobianReport:
    bin_edges: np.ndarray
    observed: np.ndarray
    expected: np.ndarray
    counts: np.ndarray
    max_rel_err: float
    populated: np.ndarray


def _flight_time_density(config, theta_value, t):
    """Predicted bounce-time density, assembled through the Jacobian
    factor: v3(t) * jac(t) * area(t) * mu_Theta mass over the plane of
    landing displacements."""
    t = np.asarray(t, dtype=float)
    g = config.g
    v3 = 0.5 * g * t
    jac = bounce_jacobian(config, t)
    if config.regime is Regime.MAGNETIC:
        area = (2.0 - 2.0 * np.cos(config.b3 * t)) / config.b3 ** 2
    else:
        area = t * t
    # integrating the wall Maxwellian over all landing displacements for
    # fixed flight time leaves exp(-v3^2/2T)/T
    plane_mass = np.exp(-0.5 * v3 * v3 / theta_value) / theta_value
    return v3 * jac * area * plane_mass


def verify_jacobian(config: FieldConfig, theta: TemperatureField, samples: int,
                    bins: int = 40, seed: int = 0, min_hits: int = 1000) -> JacobianReport:
    """Histogram the bounce times of flux-measure emissions against the
    change-of-variables prediction built from the Jacobian factor.

    The closed-form oracle requires a constant wall temperature and an
    exact regime.
    """
    if config.regime is Regime.GRAVITY_PERTURBED:
        raise ValueError("closed-form jacobian oracle needs an exact regime")
    if theta.b - theta.a > 1e-9 * theta.b:
        raise ValueError("jacobian oracle requires a constant temperature field")
    theta_value = 0.5 * (theta.a + theta.b)
    rng = stream(seed, 5)
    x = np.column_stack([rng.random(samples), rng.random(samples)])
    v = sample_emission(theta, x, rng)
    t_flight = 2.0 * v[:, 2] / config.g

    # bin between the 5% and 90% flight-time quantiles so every bin is
    # well populated; the time scale is Rayleigh with scale 2 sqrt(T)/g
    t_scale = 2.0 * np.sqrt(theta_value) / config.g
    lo = t_scale * np.sqrt(-2.0 * np.log(0.95))
    hi = t_scale * np.sqrt(-2.0 * np.log(0.10))
    if config.regime is Regime.MAGNETIC:
        # keep clear of the resonance times where the jacobian blows up
        hi = min(hi, 0.9 * 2.0 * np.pi / config.b3)
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(t_flight, bins=edges)

    nodes, weights = np.polynomial.legendre.leggauss(16)
    expected = np.empty(bins)
    for k in range(bins):
        a, b = edges[k], edges[k + 1]
        tt = 0.5 * (b - a) * nodes + 0.5 * (a + b)
        expected[k] = 0.5 * (b - a) * np.sum(weights * _flight_time_density(config, theta_value, tt))
    expected *= samples

    populated = counts >= min_hits
    rel = np.abs(counts[populated] - expected[populated]) / expected[populated]
    return JacobianReport(edges, counts.astype(float), expected, counts,
                          float(np.max(rel)) if np.any(populated) else float("nan"),
                          populated)


def jacobian_fd_consistency(config: FieldConfig, theta: TemperatureField,
                            samples: int = 200, seed: int = 0) -> float:
    """Perturbed-regime check: the finite-difference flow determinant stays
    a small correction of the pure-gravity bounce factor.

    Returns the worst relative deviation of the correction factor from one
    over flux-measure emissions."""
    from .characteristics import forward_exit, jacobian_d0_correction

    rng = stream(seed, 55)
    x = np.column_stack([rng.random(samples), rng.random(samples)])
    v = sample_emission(theta, x, rng)
    sol = forward_exit(np.column_stack([x, np.zeros(samples)]), v, config)
    worst = 0.0
    for k in range(samples):
        d0 = jacobian_d0_correction(config, float(sol.t[k]), x[k], v[k])
        worst = max(worst, abs(d0 - 1.0))
    return worst


# ---------------------------------------------------------------------------
# Scaling fits
# ---------------------------------------------------------------------------

@dataclass
class ScalingFit:
    grid: np.ndarray
    probs: np.ndarray
    ses: np.ndarray
    slope: float
    intercept: float

    def slope_in(self, lo, hi):
        return lo <= self.slope <= hi


def _loglog_fit(grid, probs, ses):
    ok = probs > 0
    lx, ly = np.log(grid[ok]), np.log(probs[ok])
    w = (probs[ok] / ses[ok]) ** 2  # weight by inverse relative variance
    coef = np.polyfit(lx, ly, 1, w=np.sqrt(w))
    return float(coef[0]), float(coef[1])


def exit_time_scaling(config: FieldConfig, theta: TemperatureField, delta_grid,
                      samples: int, seed: int = 0) -> ScalingFit:
    """P(bounce time < delta) under flux-measure emission; the short-time
    law is quadratic in delta because grazing emissions carry both a small
    normal velocity and the flux weight."""
    delta_grid = np.asarray(delta_grid, dtype=float)
    if np.any(delta_grid <= 0) or np.any(delta_grid > 0.2):
        raise ValueError("delta grid must lie in (0, 0.2]")
    rng = stream(seed, 6)
    probs = np.empty(len(delta_grid))
    ses = np.empty(len(delta_grid))
    x = np.column_stack([rng.random(samples), rng.random(samples)])
    v = sample_emission(theta, x, rng)
    if config.exact:
        t_flight = 2.0 * v[:, 2] / config.g
    else:
        from .characteristics import forward_exit
        t_flight = forward_exit(np.column_stack([x, np.zeros(samples)]), v, config).t
    for k, d in enumerate(delta_grid):
        hits = np.mean(t_flight < d)
        probs[k] = hits
        ses[k] = np.sqrt(max(hits * (1 - hits), 1e-30) / samples)
    slope, intercept = _loglog_fit(delta_grid, probs, ses)
    return ScalingFit(delta_grid, probs, ses, slope, intercept)


def bad_set_scaling(config: FieldConfig, theta: TemperatureField, eps_grid,
                    samples: int, seed: int = 0,
                    include_zero_band: bool = True) -> ScalingFit:
    """Flux-measure probability of the resonance bands versus the band
    half-width.  Linear scaling requires the Larmor period to sit inside
    the bulk of the flight-time distribution (B3 of order 10 for unit
    wall temperature); at B3 near 1 the k >= 1 bands are exponentially
    far in the tail and only the quadratic grazing band remains."""
    if config.regime is not Regime.MAGNETIC:
        raise ValueError("bad-set scaling is a magnetic-regime check")
    eps_grid = np.asarray(eps_grid, dtype=float)
    rng = stream(seed, 7)
    x = np.column_stack([rng.random(samples), rng.random(samples)])
    v = sample_emission(theta, x, rng)
    probs = np.empty(len(eps_grid))
    ses = np.empty(len(eps_grid))
    for k, eps in enumerate(eps_grid):
        bad = bad_set_indicator(x, v, eps, config, include_zero_band)
        p = np.mean(bad)
        probs[k] = p
        ses[k] = np.sqrt(max(p * (1 - p), 1e-30) / samples)
    slope, intercept = _loglog_fit(eps_grid, probs, ses)
    return ScalingFit(eps_grid, probs, ses, slope, intercept)


# ---------------------------------------------------------------------------
# Chain-measure masses
# ---------------------------------------------------------------------------

@dataclass
class ResidualCurve:
    depth: np.ndarray
    values: np.ndarray
    ses: np.ndarray
    horizon: float
    naive_bound: np.ndarray

    def uniformly_bounded(self, reference_depth: int = 10, factor: float = 2.0,
                          n_sigma: float = 3.0) -> bool:
        ref = np.max(self.values[:reference_depth])
        limit = factor * ref
        return bool(np.all(self.values - n_sigma * self.ses <= limit))


def residual_measure_curve(theta: TemperatureField, config: FieldConfig,
                           i_max: int, horizon: float, chains: int,
                           seed: int = 0) -> ResidualCurve:
    """Chain-measure mass of cycles still alive at depth i within the
    horizon, estimated from importance-weighted forward chains.

    The naive per-step bound compounds to (b^2/a^2)^i; the measured curve
    stays flat, which is the uniform-boundedness statement."""
    rng = stream(seed, 8)
    starts = rng.random((chains, 2))
    weights, times, _ = cycle_ensemble(starts, i_max, config, theta, rng)
    cum_w = np.cumprod(weights, axis=1)
    cum_t = np.cumsum(times, axis=1)
    vals = np.empty(i_max)
    ses = np.empty(i_max)
    for i in range(i_max):
        contrib = cum_w[:, i] * (cum_t[:, i] <= horizon)
        vals[i] = np.mean(contrib)
        ses[i] = np.std(contrib) / np.sqrt(chains)
    depth = np.arange(1, i_max + 1)
    naive = (theta.b ** 2 / theta.a ** 2) ** depth
    return ResidualCurve(depth, vals, ses, horizon, naive)


# ---------------------------------------------------------------------------
# Doeblin overlap of the discretized chain
# ---------------------------------------------------------------------------

@dataclass
class DoeblinResult:
    steps: int
    coupling: float
    common_component: np.ndarray
    matrix_kind: str

    @property
    def minorized(self) -> bool:
        return self.coupling > 0.0


def doeblin_minorization(kernel: BounceKernel | np.ndarray, steps: int,
                         matrix_kind: str = "physical") -> DoeblinResult:
    """Total-variation overlap of all rows of the N-step chain.

    c = sum_j min_i K^N[i, j] > 0 certifies a Doeblin minorization of the
    boundary bounce chain at N steps; c is non-decreasing in N for a
    stochastic kernel.
    """
    if steps < 1:
        raise ValueError("steps >= 1")
    if isinstance(kernel, BounceKernel):
        k = kernel.transition_matrix(matrix_kind)
    else:
        k = np.asarray(kernel, dtype=float)
        sums = k.sum(axis=1, keepdims=True)
        if np.any(sums <= 0):
            raise ValueError("kernel has empty rows; not row-normalizable")
        k = k / sums
    kn = np.linalg.matrix_power(k, steps)
    floor = kn.min(axis=0)
    c = float(floor.sum())
    nu = floor / c if c > 0 else floor
    return DoeblinResult(steps, c, nu, matrix_kind)


# ---------------------------------------------------------------------------
# Consolidated verdicts
# ---------------------------------------------------------------------------

@dataclass
class Verdict:
    test: str
    statistic: float
    band: tuple
    passed: bool
    detail: dict = dc_field(default_factory=dict)

    def to_json(self):
        return {"test": self.test, "statistic": self.statistic,
                "band": list(self.band), "pass": bool(self.passed),
                "detail": self.detail}

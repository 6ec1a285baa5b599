"""Weighted-ensemble dynamics of fluctuations around the stationary state.

A fluctuation is carried by signed-weight particles that follow the
characteristics between wall hits; a hit resamples the velocity from the
local flux Maxwellian and keeps the weight, which realizes the diffuse
boundary operator in expectation (the operator is rank one in velocity).
Norms of the represented signed density are estimated by aggregating
weights over a fixed phase-space binning: within-cell cancellation of
positive and negative weights is exactly the mixing being measured.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.stats import norm as _norm

from .boundary import sample_emission
from .characteristics import (_flow_to_times, _horizontal_flight, forward_exit,
                              forward_exit_time, wrap_torus)
from .fields import FieldConfig, TemperatureField, potential_energy
from .stationary import FluxField, reconstruct_density
from .streams import stream


# ---------------------------------------------------------------------------
# Phase-space binning
# ---------------------------------------------------------------------------

class PhaseBinning:
    """Fixed phase-space cells used to turn signed particle weights into
    norm estimates; equal-occupancy edges per dimension keep the
    cancellation floor uniform."""

    def __init__(self, edges):
        self.edges = [np.asarray(e, dtype=float) for e in edges]
        self.dims = tuple(len(e) - 1 for e in self.edges)
        self.n_spatial = int(np.prod(self.dims[:3]))
        self.n_velocity = int(np.prod(self.dims[3:]))
        self.n_cells = self.n_spatial * self.n_velocity
        dx = [np.diff(e) for e in self.edges[:3]]
        vol = dx[0][:, None, None] * dx[1][None, :, None] * dx[2][None, None, :]
        self.spatial_volumes = vol.reshape(-1)

    def _axis_index(self, k, vals):
        e = self.edges[k]
        return np.clip(np.searchsorted(e, vals, side="right") - 1, 0, self.dims[k] - 1)

    def index(self, x, v):
        idx_s = self._axis_index(0, x[:, 0])
        idx_s = idx_s * self.dims[1] + self._axis_index(1, x[:, 1])
        idx_s = idx_s * self.dims[2] + self._axis_index(2, x[:, 2])
        idx_v = self._axis_index(3, v[:, 0])
        idx_v = idx_v * self.dims[4] + self._axis_index(4, v[:, 1])
        idx_v = idx_v * self.dims[5] + self._axis_index(5, v[:, 2])
        return idx_s, idx_v

    def l1(self, full_idx, weights):
        sums = np.bincount(full_idx, weights=weights, minlength=self.n_cells)
        return float(np.sum(np.abs(sums)))


def default_binning(config: FieldConfig, theta: TemperatureField,
                    dims=(8, 1, 4, 4, 1, 4)) -> PhaseBinning:
    tbar = 0.5 * (theta.a + theta.b)
    h_scale = tbar / config.g
    v_scale = np.sqrt(tbar)

    def exp_edges(k):
        q = np.linspace(0.0, 1.0, k + 1)
        e = -h_scale * np.log1p(-q[:-1])
        return np.append(e, 15.0 * h_scale)

    def gauss_edges(k):
        q = np.linspace(0.0, 1.0, k + 1)
        e = v_scale * _norm.ppf(q)
        e[0], e[-1] = -10.0 * v_scale, 10.0 * v_scale
        return e

    def uniform_edges(k):
        return np.linspace(0.0, 1.0, k + 1)

    return PhaseBinning([uniform_edges(dims[0]), uniform_edges(dims[1]),
                         exp_edges(dims[2]), gauss_edges(dims[3]),
                         gauss_edges(dims[4]), gauss_edges(dims[5])])


# ---------------------------------------------------------------------------
# Ensemble
# ---------------------------------------------------------------------------

@dataclass
class WeightedEnsemble:
    x: np.ndarray
    v: np.ndarray
    w: np.ndarray
    time: float
    seed: int
    n_blocks: int = 16
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self._rngs = [stream(self.seed, 50_000 + b) for b in range(self.n_blocks)]

    @property
    def size(self):
        return len(self.w)

    def block_slices(self):
        bounds = np.linspace(0, self.size, self.n_blocks + 1).astype(int)
        return [slice(bounds[b], bounds[b + 1]) for b in range(self.n_blocks)]

    @property
    def total_weight(self):
        return float(np.sum(self.w))


def _density_at_temperature(x, v, temp, config):
    """Unit-mass phase density with Maxwellian velocities and the matching
    barometric height profile (exact normalization for a linear potential)."""
    phi = potential_energy(config, x)
    return (2.0 * np.pi * temp) ** -1.5 * np.exp(-0.5 * np.sum(v * v, axis=1) / temp) \
        * (config.g / temp) * np.exp(-phi / temp)


FLUCTUATION_KINDS = ("zero", "modulated", "tilted")


def init_fluctuation(kind: str, amplitude: float, config: FieldConfig,
                     theta: TemperatureField, samples: int, seed: int,
                     flux: FluxField | None = None, mass: float = 1.0,
                     tilt: float = 0.2, n_blocks: int = 16,
                     theta_prime: float | None = None,
                     delta: float = 1.0) -> WeightedEnsemble:
    """Build a zero-total-mass signed ensemble for one of the initial
    fluctuation families.

    "modulated": a horizontal sine modulation of the Maxwellian profile;
    "tilted": the difference of two temperature profiles.  Weights are
    recentered so their sum is exactly zero, and the construction is
    rejected when the implied total density goes negative on more than
    0.1% of the sample.
    """
    if kind not in FLUCTUATION_KINDS:
        raise ValueError(f"unknown fluctuation kind {kind!r}")
    rng = stream(seed, 777)
    tbar = 0.5 * (theta.a + theta.b)
    rate = config.g / tbar
    x = np.column_stack([rng.random(samples), rng.random(samples),
                         rng.exponential(1.0 / rate, samples)])
    v = np.sqrt(tbar) * rng.standard_normal((samples, 3))
    proposal = rate * np.exp(-rate * x[:, 2]) * (2.0 * np.pi * tbar) ** -1.5 \
        * np.exp(-0.5 * np.sum(v * v, axis=1) / tbar)

    if kind == "zero":
        f0 = np.zeros(samples)
    elif kind == "modulated":
        f0 = amplitude * mass * np.sin(2.0 * np.pi * x[:, 0]) \
            * _density_at_temperature(x, v, tbar, config)
    else:
        f0 = amplitude * mass * (_density_at_temperature(x, v, (1.0 + tilt) * tbar, config)
                                 - _density_at_temperature(x, v, tbar, config))

    w = f0 / proposal / samples
    w = w - np.sum(w) / samples  # exact zero total weight

    if flux is not None:
        fs = reconstruct_density(flux, x, v, config, theta)
    else:
        fs = mass * _density_at_temperature(x, v, tbar, config)
    negative = np.mean(fs + f0 < 0)
    if negative > 1e-3:
        raise ValueError(f"initial density negative on {negative:.2%} of samples; "
                         "reduce the amplitude")

    if theta_prime is None:
        theta_prime = 0.9 / (2.0 * theta.b)
    energy2 = np.sum(v * v, axis=1) + 2.0 * potential_energy(config, x)
    sup_wprime = float(np.max(np.exp(theta_prime * energy2) * np.abs(f0)))
    l1_delta = float(np.mean(np.exp(delta * np.sqrt(energy2)) * np.abs(f0) / proposal))
    ens = WeightedEnsemble(x, v, w, 0.0, seed, n_blocks,
                           meta={"kind": kind, "amplitude": amplitude,
                                 "negative_fraction": float(negative),
                                 "sup_wprime_f0": sup_wprime,
                                 "weighted_l1_f0": l1_delta})
    return ens


def sample_stationary_ensemble(config: FieldConfig, theta: TemperatureField,
                               samples: int, seed: int, flux: FluxField | None = None,
                               mass: float = 1.0, n_blocks: int = 16) -> WeightedEnsemble:
    """All-positive ensemble representing the stationary state itself."""
    rng = stream(seed, 777)
    tbar = 0.5 * (theta.a + theta.b)
    rate = config.g / tbar
    x = np.column_stack([rng.random(samples), rng.random(samples),
                         rng.exponential(1.0 / rate, samples)])
    v = np.sqrt(tbar) * rng.standard_normal((samples, 3))
    proposal = rate * np.exp(-rate * x[:, 2]) * (2.0 * np.pi * tbar) ** -1.5 \
        * np.exp(-0.5 * np.sum(v * v, axis=1) / tbar)
    if flux is not None:
        fs = reconstruct_density(flux, x, v, config, theta)
    else:
        fs = mass * _density_at_temperature(x, v, tbar, config)
    w = fs / proposal / samples
    return WeightedEnsemble(x, v, w, 0.0, seed, n_blocks, meta={"kind": "stationary"})


# ---------------------------------------------------------------------------
# Evolution
# ---------------------------------------------------------------------------

def _free_flight(x, v, tau, config):
    disp, vpar = _horizontal_flight(config, v[:, :2], tau)
    x3 = x[:, 2] + v[:, 2] * tau - 0.5 * config.g * tau * tau
    v3 = v[:, 2] - config.g * tau
    xn = np.column_stack([wrap_torus(x[:, :2] + disp), np.maximum(x3, 0.0)])
    return xn, np.column_stack([vpar, v3])


def _advance_block(x, v, dt, config, theta, rng):
    """March one particle block forward by dt with diffuse re-emission."""
    rem = np.full(len(x), float(dt))
    idx = np.flatnonzero(rem > 0)
    while idx.size:
        if config.exact:
            tf = forward_exit_time(x[idx], v[idx], config)
        else:
            tf = forward_exit(x[idx], v[idx], config).t
        hit = tf <= rem[idx]
        if np.any(~hit):
            i = idx[~hit]
            tau = rem[i]
            if config.exact:
                x[i], v[i] = _free_flight(x[i], v[i], tau, config)
            else:
                x[i], v[i] = _flow_to_times(x[i], v[i], tau, config)
            rem[i] = 0.0
        if np.any(hit):
            i = idx[hit]
            tau = tf[hit]
            if config.exact:
                xn, _ = _free_flight(x[i], v[i], tau, config)
                land = xn[:, :2]
            else:
                land = forward_exit(x[i], v[i], config).x_hit
            x[i, :2] = land
            x[i, 2] = 0.0
            v[i] = sample_emission(theta, land, rng)
            rem[i] = rem[i] - tau
        idx = np.flatnonzero(rem > 0)


@dataclass
class DecayParams:
    theta_moment: float          # theta in the exponential moment weight
    theta_prime: float
    delta: float = 1.0           # exit-time weight exponent
    T0: float = 2.0

    @classmethod
    def defaults(cls, theta_field: TemperatureField, T0: float = 2.0) -> "DecayParams":
        tp = 0.9 / (2.0 * theta_field.b)
        return cls(theta_moment=tp / 2.0, theta_prime=tp, delta=1.0, T0=T0)

    def admissible(self, theta_field: TemperatureField) -> bool:
        return (0 < self.theta_moment < self.theta_prime < 1.0 / (2.0 * theta_field.b)
                and self.delta * self.T0 > 1.0)


@dataclass
class DecaySeries:
    t: np.ndarray
    l1: np.ndarray
    weighted_l1: np.ndarray
    max_exp_moment: np.ndarray
    tail_l1: np.ndarray
    sum_w: np.ndarray
    window_index: np.ndarray
    block_l1: np.ndarray        # (n_times, n_blocks)
    block_weighted: np.ndarray  # (n_times, n_blocks)
    block_moment: np.ndarray    # (n_times, n_blocks)

    def to_csv(self, path, meta=None):
        with open(path, "w") as fh:
            for k, v in sorted((meta or {}).items()):
                fh.write(f"# {k}: {v}\n")
            fh.write("t,L1,weighted_L1,max_cell_exp_moment,window_index\n")
            for k in range(len(self.t)):
                fh.write(f"{self.t[k]:.6f},{self.l1[k]:.12e},{self.weighted_l1[k]:.12e},"
                         f"{self.max_exp_moment[k]:.12e},{self.window_index[k]:d}\n")


def observe(ens: WeightedEnsemble, binning: PhaseBinning, params: DecayParams,
            config: FieldConfig):
    idx_s, idx_v = binning.index(ens.x, ens.v)
    full = idx_s * binning.n_velocity + idx_v
    if config.exact:
        tf = forward_exit_time(ens.x, ens.v, config)
    else:
        tf = forward_exit(ens.x, ens.v, config).t
    energy2 = np.sum(ens.v ** 2, axis=1) + 2.0 * potential_energy(config, ens.x)
    w_phi = ens.w * np.exp(params.delta * tf)
    w_mom = ens.w * np.exp(params.theta_moment * energy2)

    def max_moment(idx, weights):
        mom = np.bincount(idx, weights=weights, minlength=binning.n_cells)
        mom = np.abs(mom.reshape(binning.n_spatial, binning.n_velocity)).sum(axis=1)
        return float(np.max(mom / binning.spatial_volumes))

    l1 = binning.l1(full, ens.w)
    weighted = binning.l1(full, w_phi)
    tail = binning.l1(full, ens.w * (tf >= params.T0 / 4.0))
    max_mom = max_moment(full, w_mom)

    blocks = ens.block_slices()
    nb = ens.n_blocks
    block_l1 = np.array([binning.l1(full[s], ens.w[s]) * nb for s in blocks])
    block_weighted = np.array([binning.l1(full[s], w_phi[s]) * nb for s in blocks])
    block_moment = np.array([max_moment(full[s], w_mom[s] * nb) for s in blocks])
    return l1, weighted, tail, max_mom, block_l1, block_weighted, block_moment


def evolve(ens: WeightedEnsemble, output_times, config: FieldConfig,
           theta: TemperatureField, params: DecayParams | None = None,
           binning: PhaseBinning | None = None) -> DecaySeries:
    """Evolve the ensemble through the output times, recording decay
    observables at each; the ensemble is mutated to the final time."""
    if params is None:
        params = DecayParams.defaults(theta)
    if binning is None:
        binning = default_binning(config, theta)
    output_times = np.sort(np.asarray(output_times, dtype=float))
    if output_times[0] < ens.time:
        raise ValueError("output times must not precede the ensemble time")

    rows = []
    for t_out in output_times:
        dt = t_out - ens.time
        if dt > 0:
            for b, sl in enumerate(ens.block_slices()):
                _advance_block(ens.x[sl], ens.v[sl], dt, config, theta, ens._rngs[b])
            ens.time = t_out
        obs = observe(ens, binning, params, config)
        rows.append((t_out, *obs, ens.total_weight))

    t = np.array([r[0] for r in rows])
    return DecaySeries(
        t=t,
        l1=np.array([r[1] for r in rows]),
        weighted_l1=np.array([r[2] for r in rows]),
        tail_l1=np.array([r[3] for r in rows]),
        max_exp_moment=np.array([r[4] for r in rows]),
        sum_w=np.array([r[8] for r in rows]),
        window_index=np.floor(t / params.T0 + 1e-9).astype(int),
        block_l1=np.stack([r[5] for r in rows]),
        block_weighted=np.stack([r[6] for r in rows]),
        block_moment=np.stack([r[7] for r in rows]),
    )


# ---------------------------------------------------------------------------
# Decay statistics
# ---------------------------------------------------------------------------

@dataclass
class DecayFit:
    rate: float
    amplitude: float
    r_squared: float
    n_points: int
    warning: str | None = None


def fit_decay(t, values, t_min: float, t_max: float) -> DecayFit:
    """Least squares on log values over [t_min, t_max]."""
    t = np.asarray(t, dtype=float)
    values = np.asarray(values, dtype=float)
    mask = (t >= t_min) & (t <= t_max)
    warning = None
    if np.any(values[mask] <= 0):
        # Monte-Carlo noise floor reached: truncate before the first
        # non-positive value and warn
        bad = np.flatnonzero(mask & (values <= 0))
        mask &= t < t[bad[0]]
        warning = "non-positive norms truncated from the fit range"
    ts, ys = t[mask], values[mask]
    if len(ts) < 8:
        raise ValueError("need at least 8 positive points in the fit range")
    slope, intercept = np.polyfit(ts, np.log(ys), 1)
    pred = slope * ts + intercept
    ss_res = float(np.sum((np.log(ys) - pred) ** 2))
    ss_tot = float(np.sum((np.log(ys) - np.mean(np.log(ys))) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    return DecayFit(rate=-float(slope), amplitude=float(np.exp(intercept)),
                    r_squared=r2, n_points=int(len(ts)), warning=warning)


@dataclass
class WindowRow:
    window: int
    t: float
    ratio: float
    ratio_se: float
    tail_l1_prev: float


def window_contraction(series: DecaySeries, T0: float) -> list[WindowRow]:
    """Per-window norm ratios at multiples of T0, with block-resampled
    standard errors and the previous window's slow-tail mass."""
    rows = []
    times = series.t
    for n_win in range(1, int(np.floor(times[-1] / T0 + 1e-9)) + 1):
        i_now = np.flatnonzero(np.isclose(times, n_win * T0, atol=1e-9))
        i_prev = np.flatnonzero(np.isclose(times, (n_win - 1) * T0, atol=1e-9))
        if not len(i_now) or not len(i_prev):
            continue
        i_now, i_prev = i_now[0], i_prev[0]
        if series.l1[i_prev] <= 0:
            continue
        ratio = series.l1[i_now] / series.l1[i_prev]
        b_now, b_prev = series.block_l1[i_now], series.block_l1[i_prev]
        ok = b_prev > 0
        if np.sum(ok) >= 2:
            block_ratios = b_now[ok] / b_prev[ok]
            se = float(np.std(block_ratios, ddof=1) / np.sqrt(np.sum(ok)))
        else:
            se = float("nan")
        rows.append(WindowRow(n_win, float(times[i_now]), float(ratio), se,
                              float(series.tail_l1[i_prev])))
    return rows


# ---------------------------------------------------------------------------
# Theoretical minorant mass
# ---------------------------------------------------------------------------

@dataclass
class DoeblinMass:
    value: float
    se: float
    cross_value: float
    cross_se: float
    prefactor: float
    T0: float


def theoretical_doeblin_mass(T0: float, config: FieldConfig, theta: TemperatureField,
                             samples: int = 400_000, seed: int = 0) -> DoeblinMass:
    """L1 mass of the pointwise minorant: the wall Maxwellian at the last
    emission point, cut to bounce age at most T0/4, times the
    squeezing prefactor exp(-25 T0^2 / b).

    Two independent estimators: direct phase-space importance sampling,
    and the boundary representation integrating the flux measure against
    min(flight time, T0/4).
    """
    if T0 <= 0:
        raise ValueError("T0 > 0")
    from .boundary import wall_maxwellian_speed
    from .characteristics import backward_exit
    from .stationary import _mu_proposal

    prefactor = float(np.exp(-25.0 * T0 ** 2 / theta.b))

    rng = stream(seed, 41)
    x, v, p = _mu_proposal(config, theta, samples, rng, temp=theta.b)
    backward = backward_exit(x, v, config)
    speed_b = np.sum(backward.v_hit ** 2, axis=1)
    mu_th = wall_maxwellian_speed(theta, backward.x_hit, speed_b)
    w = np.where(backward.t <= T0 / 4.0, mu_th, 0.0) / p
    value = float(np.mean(w)) * prefactor
    se = float(np.std(w) / np.sqrt(samples)) * prefactor

    rng2 = stream(seed, 42)
    xb = np.column_stack([rng2.random(samples), rng2.random(samples)])
    u = sample_emission(theta, xb, rng2)
    x0 = np.column_stack([xb, np.zeros(samples)])
    tf = forward_exit_time(x0, u, config) if config.exact else forward_exit(x0, u, config).t
    w2 = np.minimum(tf, T0 / 4.0)
    cross = float(np.mean(w2)) * prefactor
    cross_se = float(np.std(w2) / np.sqrt(samples)) * prefactor
    return DoeblinMass(value, se, cross, cross_se, prefactor, T0)

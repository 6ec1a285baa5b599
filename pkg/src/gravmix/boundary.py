"""Wall-Maxwellian boundary machinery: emission sampling, single bounces,
and bounce chains carrying importance weights.

The chain measure weights each hop by the wall Maxwellian evaluated at
the NEXT landing point, while a physical simulation must emit with the
current point's Maxwellian.  Emission is therefore done physically and
the temperature ratio between landing and emission point is carried as
a multiplicative importance weight, giving unbiased estimates of the
chain-measure integrals without inverting the chain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .characteristics import forward_exit
from .fields import FieldConfig, Regime, TemperatureField


def wall_maxwellian(theta: TemperatureField, x, v) -> np.ndarray:
    """Emission density (2 pi T(x)^2)^-1 exp(-|v|^2 / (2 T(x)))."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    t = theta(x)
    return np.exp(-0.5 * np.sum(v * v, axis=1) / t) / (2.0 * np.pi * t * t)


def wall_maxwellian_speed(theta: TemperatureField, x, speed_sq) -> np.ndarray:
    t = theta(np.atleast_2d(np.asarray(x, dtype=float)))
    return np.exp(-0.5 * np.asarray(speed_sq) / t) / (2.0 * np.pi * t * t)


def sample_emission(theta: TemperatureField, x, rng) -> np.ndarray:
    """Draw outgoing velocities from the normalized flux measure at x.

    Tangential components are centered Gaussians with variance T(x);
    the normal component is Rayleigh with scale sqrt(T(x)).  This is the
    exact factorization of mu_Theta(x, v) v3 dv on {v3 > 0}.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = len(x)
    s = np.sqrt(theta(x))
    vpar = s[:, None] * rng.standard_normal((n, 2))
    v3 = s * rng.rayleigh(1.0, n)
    return np.column_stack([vpar, v3])


@dataclass
class BounceRecord:
    emit_point: np.ndarray
    emit_velocity: np.ndarray
    flight_time: float
    land_point: np.ndarray
    land_velocity: np.ndarray
    sigma_weight: float
    winding: np.ndarray


@dataclass
class CycleTrace:
    records: list[BounceRecord] = field(default_factory=list)
    cumulative_time: float = 0.0
    cumulative_weight: float = 1.0
    truncated: bool = False

    def append(self, rec: BounceRecord):
        self.records.append(rec)
        self.cumulative_time += rec.flight_time
        self.cumulative_weight *= rec.sigma_weight


@dataclass
class BounceBatch:
    """Vectorized single bounce: emit at x with v3 > 0, land with v3 < 0."""
    emit_point: np.ndarray
    emit_velocity: np.ndarray
    flight_time: np.ndarray
    land_point: np.ndarray
    land_velocity: np.ndarray
    sigma_weight: np.ndarray
    winding: np.ndarray


def bounce_batch(x, v, config: FieldConfig, theta: TemperatureField) -> BounceBatch:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    if np.any(v[:, 2] <= 0):
        raise ValueError("emission requires v3 > 0")
    start = np.column_stack([x[:, :2], np.zeros(len(x))]) if x.shape[1] == 2 else x
    sol = forward_exit(start, v, config)
    speed_sq = np.sum(v * v, axis=1)  # |v_land| = |v| boundary-to-boundary
    w = wall_maxwellian_speed(theta, sol.x_hit, speed_sq) \
        / wall_maxwellian_speed(theta, start[:, :2], speed_sq)
    return BounceBatch(start[:, :2], v, sol.t, sol.x_hit, sol.v_hit, w, sol.winding)


def bounce(emit_point, emit_velocity, config: FieldConfig,
           theta: TemperatureField) -> BounceRecord:
    b = bounce_batch(np.asarray(emit_point)[None, :], np.asarray(emit_velocity)[None, :],
                     config, theta)
    return BounceRecord(b.emit_point[0], b.emit_velocity[0], float(b.flight_time[0]),
                        b.land_point[0], b.land_velocity[0], float(b.sigma_weight[0]),
                        b.winding[0])


def generate_cycle(start, steps: int, horizon: float, config: FieldConfig,
                   theta: TemperatureField, rng) -> CycleTrace:
    """Chain of diffuse bounces from a boundary point.

    Each hop resamples the outgoing velocity from the local flux measure
    and multiplies the trace weight by the landing/emission temperature
    ratio; the product is the importance-sampling contribution for the
    chain-measure mass.  Stops early (flagged) past the time horizon.
    """
    if steps < 1:
        raise ValueError("steps >= 1")
    trace = CycleTrace()
    point = np.asarray(start, dtype=float)[:2]
    for _ in range(steps):
        v = sample_emission(theta, point[None, :], rng)[0]
        rec = bounce(point, v, config, theta)
        trace.append(rec)
        point = rec.land_point
        if trace.cumulative_time > horizon:
            trace.truncated = True
            break
    return trace


def cycle_ensemble(starts, steps: int, config: FieldConfig,
                   theta: TemperatureField, rng):
    """Run many chains at once; returns per-step weights, times, landings.

    Output arrays have shape (n_chains, steps): sigma weights, flight
    times, and the landing points (n_chains, steps, 2).
    """
    pts = np.atleast_2d(np.asarray(starts, dtype=float))[:, :2].copy()
    n = len(pts)
    weights = np.empty((n, steps))
    times = np.empty((n, steps))
    landings = np.empty((n, steps, 2))
    for k in range(steps):
        v = sample_emission(theta, pts, rng)
        b = bounce_batch(pts, v, config, theta)
        weights[:, k] = b.sigma_weight
        times[:, k] = b.flight_time
        landings[:, k] = b.land_point
        pts = b.land_point.copy()
    return weights, times, landings


def bad_set_indicator(x, v, eps: float, config: FieldConfig,
                      include_zero_band: bool = True) -> np.ndarray:
    """True where the bounce time sits within eps/B3 of a full Larmor
    period 2 k pi / B3, i.e. where the magnetic bounce map degenerates.

    Whether k = 0 (grazing bounces) counts as degenerate is exposed as a
    flag; the default includes it.
    """
    if config.regime is not Regime.MAGNETIC:
        raise ValueError("bad set is defined for the magnetic regime")
    v = np.atleast_2d(np.asarray(v, dtype=float))
    t_b = np.abs(v[:, 2]) / (config.g / 2.0)
    phase = np.mod(config.b3 * t_b, 2.0 * np.pi)
    near = np.minimum(phase, 2.0 * np.pi - phase) <= eps
    if include_zero_band:
        return near
    return near & (config.b3 * t_b >= 2.0 * np.pi - eps)

"""Trajectory propagation and exit-time solves for the half-space flow.

Pure-gravity and magnetic regimes use closed forms (vertical parabola,
horizontal rotation at rate B3); the perturbed regime integrates the
Hamilton ODEs with a fixed-step RK4 and bisects boundary crossings.
All heavy entry points are vectorized over particle arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import FieldConfig, Regime, force, potential_energy

BOUNDARY_SNAP = 1e-12
DEFAULT_DT = 1e-3


class ExitSolveError(RuntimeError):
    pass


class DegenerateBounceError(ValueError):
    """Magnetic bounce map is singular at B3 * t in 2*pi*Z."""


@dataclass(frozen=True)
class PhaseState:
    x: np.ndarray  # (x1, x2) in [0,1), x3 >= 0
    v: np.ndarray

    def __post_init__(self):
        if self.x[2] < 0:
            raise ValueError("x3 must be nonnegative")


@dataclass
class ExitSolve:
    """Boundary hit of a characteristic, batched over particles.

    x_hit carries torus coordinates with x3 snapped to zero; winding is
    the integer horizontal displacement identifying the periodic image.
    """
    t: np.ndarray
    x_hit: np.ndarray   # (N, 2)
    v_hit: np.ndarray   # (N, 3)
    winding: np.ndarray  # (N, 2) integers
    direction: str      # "backward" | "forward"


def wrap_torus(xy):
    return xy - np.floor(xy)


def _split(x, v):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    return x, v


def _rotation(b3, tau):
    c = np.cos(b3 * tau)
    s = np.sin(b3 * tau)
    return c, s


def _horizontal_flight(config, vpar, tau):
    """Horizontal displacement and velocity after time tau (any sign)."""
    tau = np.asarray(tau, dtype=float)
    if config.regime is Regime.MAGNETIC:
        c, s = _rotation(config.b3, tau)
        one_c = 1.0 - c
        dx1 = (vpar[:, 0] * s + vpar[:, 1] * one_c) / config.b3
        dx2 = (vpar[:, 1] * s - vpar[:, 0] * one_c) / config.b3
        v1 = vpar[:, 0] * c + vpar[:, 1] * s
        v2 = vpar[:, 1] * c - vpar[:, 0] * s
        return np.column_stack([dx1, dx2]), np.column_stack([v1, v2])
    disp = vpar * tau[:, None] if tau.ndim else vpar * tau
    return disp, vpar.copy()


def advance(x, v, dt, config: FieldConfig, dt_max: float = DEFAULT_DT):
    """Propagate states by dt along the characteristics (dt may be < 0).

    The caller guarantees the trajectory stays in x3 >= 0 over the step;
    leaving the half-space raises with the bracketing interval.
    """
    x, v = _split(x, v)
    if config.exact:
        tau = np.full(len(x), float(dt))
        x3 = x[:, 2] + v[:, 2] * dt - 0.5 * config.g * dt * dt
        v3 = v[:, 2] - config.g * dt
        disp, vpar = _horizontal_flight(config, v[:, :2], tau)
        if np.any(x3 < -BOUNDARY_SNAP):
            raise ExitSolveError(f"step of {dt} exits the half-space within [0, {dt}]")
        x_new = np.column_stack([wrap_torus(x[:, :2] + disp), np.maximum(x3, 0.0)])
        return x_new, np.column_stack([vpar, v3])

    n_steps = max(1, int(np.ceil(abs(dt) / dt_max)))
    h = dt / n_steps
    for _ in range(n_steps):
        x, v = _rk4_step(x, v, h, config)
        if np.any(x[:, 2] < -BOUNDARY_SNAP):
            raise ExitSolveError(f"step of {dt} exits the half-space within [0, {dt}]")
    x = np.column_stack([wrap_torus(x[:, :2]), np.maximum(x[:, 2], 0.0)])
    return x, v


def _rk4_step(x, v, h, config):
    # h may be scalar or per-particle (N,) / (N,1)
    h = np.asarray(h, dtype=float)
    if h.ndim == 1:
        h = h[:, None]
    k1x = v
    k1v = force(config, x, v)
    k2x = v + 0.5 * h * k1v
    k2v = force(config, x + 0.5 * h * k1x, k2x)
    k3x = v + 0.5 * h * k2v
    k3v = force(config, x + 0.5 * h * k2x, k3x)
    k4x = v + h * k3v
    k4v = force(config, x + h * k3x, k4x)
    x_new = x + (h / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x)
    v_new = v + (h / 6.0) * (k1v + 2 * k2v + 2 * k3v + k4v)
    return x_new, v_new


def _exact_exit(x, v, config, sign):
    """Closed-form exit: sign=+1 forward, sign=-1 backward."""
    g = config.g
    v3 = sign * v[:, 2]
    x3 = x[:, 2]
    # exit time solves (g/2) t^2 - v3 t - x3 = 0 in the signed frame
    disc = np.sqrt(v3 * v3 + 2.0 * g * x3)
    denom = np.where(disc - v3 > 0, disc - v3, 1.0)
    t = np.where(v3 >= 0, (v3 + disc) / g, 2.0 * x3 / denom)
    tau = sign * t
    disp, vpar_hit = _horizontal_flight(config, v[:, :2], tau)
    v3_hit = v[:, 2] - g * tau
    unwrapped = x[:, :2] + disp
    winding = np.floor(unwrapped).astype(np.int64)
    x_hit = unwrapped - winding
    return t, x_hit, np.column_stack([vpar_hit, v3_hit]), winding


def _perturbed_exit(x, v, config, sign, dt_max, max_bisect=200):
    n = len(x)
    if n == 0:
        return (np.zeros(0), np.zeros((0, 2)), np.zeros((0, 3)),
                np.zeros((0, 2), dtype=np.int64))
    g, rho3 = config.g, config.rho3
    speed = np.linalg.norm(v, axis=1)
    # vertical acceleration stays in [-(g+rho3), -(g-rho3)]: bounded flight
    t_cap = 2.0 * (np.abs(v[:, 2]) + np.sqrt(v[:, 2] ** 2 + 2 * (g + rho3) * x[:, 2])) / (g - rho3) + 1.0

    xc = np.column_stack([x[:, :2].copy(), x[:, 2].copy()])
    vc = v.copy()
    elapsed = np.zeros(n)
    unwrapped = x[:, :2].copy()
    active = np.ones(n, dtype=bool)
    # bracketing states for bisection
    xa = np.zeros((n, 3)); va = np.zeros((n, 3)); ta = np.zeros(n); ha = np.zeros(n)
    crossed = np.zeros(n, dtype=bool)

    h0 = dt_max
    while np.any(active):
        idx = np.flatnonzero(active)
        h = np.minimum(h0, np.maximum(1e-6, 0.1 / (1.0 + speed[idx])))
        x_new, v_new = _rk4_step(xc[idx], sign * vc[idx], h[:, None], config)
        # integrate in a signed time frame: forward uses v, backward uses -v
        below = x_new[:, 2] < 0.0
        cross_idx = idx[below]
        if cross_idx.size:
            xa[cross_idx] = xc[cross_idx]
            va[cross_idx] = vc[cross_idx]
            ta[cross_idx] = elapsed[cross_idx]
            ha[cross_idx] = h[below]
            crossed[cross_idx] = True
            active[cross_idx] = False
        keep = idx[~below]
        if keep.size:
            kept_new_x = x_new[~below]
            unwrapped[keep] += kept_new_x[:, :2] - xc[keep, :2]
            xc[keep] = kept_new_x
            vc[keep] = sign * v_new[~below]
            elapsed[keep] += h[~below]
            overdue = keep[elapsed[keep] > t_cap[keep]]
            if overdue.size:
                raise ExitSolveError("perturbed exit solve exceeded its flight-time cap")

    # bisect tau in [0, h] from the stored bracket states
    lo = np.zeros(n)
    hi = ha.copy()
    for it in range(max_bisect):
        mid = 0.5 * (lo + hi)
        xm, _ = _rk4_step(xa, sign * va, mid[:, None], config)
        below = xm[:, 2] < 0.0
        hi = np.where(below, mid, hi)
        lo = np.where(below, lo, mid)
        if np.max(hi - lo) < 1e-14 * max(1.0, float(np.max(ha))):
            break
    else:
        xm, _ = _rk4_step(xa, sign * va, (0.5 * (lo + hi))[:, None], config)
        if np.max(np.abs(xm[:, 2])) > 1e-9:
            raise ExitSolveError("boundary-crossing bisection failed to converge")
    tau = 0.5 * (lo + hi)
    x_fin, v_fin = _rk4_step(xa, sign * va, tau[:, None], config)
    # one Newton polish on the crossing time removes the bisection residue
    v3 = v_fin[:, 2]
    safe = np.abs(v3) > 1e-12
    tau = np.where(safe, tau - x_fin[:, 2] / np.where(safe, v3, 1.0), tau)
    x_fin, v_fin = _rk4_step(xa, sign * va, tau[:, None], config)
    t = ta + tau
    unwrapped = unwrapped + (x_fin[:, :2] - xa[:, :2])
    winding = np.floor(unwrapped).astype(np.int64)
    x_hit = unwrapped - winding
    v_hit = sign * v_fin
    return t, x_hit, v_hit, winding


def forward_exit(x, v, config: FieldConfig, dt_max: float = DEFAULT_DT) -> ExitSolve:
    """Time, place and velocity of the next boundary hit (v3 < 0 there)."""
    x, v = _split(x, v)
    if config.exact:
        t, x_hit, v_hit, winding = _exact_exit(x, v, config, +1)
    else:
        t, x_hit, v_hit, winding = _perturbed_exit(x, v, config, +1, dt_max)
    return ExitSolve(t, x_hit, v_hit, winding, "forward")


def backward_exit(x, v, config: FieldConfig, dt_max: float = DEFAULT_DT) -> ExitSolve:
    """Time since emission, and the emission point/velocity (v3 > 0 there)."""
    x, v = _split(x, v)
    if config.exact:
        t, x_hit, v_hit, winding = _exact_exit(x, v, config, -1)
    else:
        t, x_hit, v_hit, winding = _perturbed_exit(x, v, config, -1, dt_max)
    return ExitSolve(t, x_hit, v_hit, winding, "backward")


def forward_exit_time(x, v, config: FieldConfig):
    """Fast path: just the flight time to the floor (exact regimes)."""
    x, v = _split(x, v)
    g = config.g
    disc = np.sqrt(v[:, 2] ** 2 + 2.0 * g * x[:, 2])
    denom = np.where(disc - v[:, 2] > 0, disc - v[:, 2], 1.0)
    return np.where(v[:, 2] >= 0, (v[:, 2] + disc) / g, 2.0 * x[:, 2] / denom)


def energy(x, v, config: FieldConfig):
    x, v = _split(x, v)
    return 0.5 * np.sum(v * v, axis=1) + potential_energy(config, x)


def bounce_jacobian(config: FieldConfig, t_b, emit_point=None, emit_velocity=None,
                    fd_step_scale: float = 1e-6):
    """Density factor converting dv to dt dS at the bounce map.

    Returns |det d(x_hit, t)/dv|^(-1).  Closed forms: (g/2)/t^2 for pure
    gravity, 5*B3^2/(2 - 2 cos(B3 t)) in the magnetic regime.  The
    perturbed regime differentiates the flow map by central differences,
    which requires the emission point and velocity.
    """
    t_b = np.asarray(t_b, dtype=float)
    if np.any(t_b <= 0):
        raise ValueError("t_b must be positive")
    if config.regime is Regime.GRAVITY_ONLY:
        return (config.g / 2.0) / t_b ** 2
    if config.regime is Regime.MAGNETIC:
        denom = 2.0 - 2.0 * np.cos(config.b3 * t_b)
        if np.any(denom < 1e-12):
            raise DegenerateBounceError("degenerate bounce map: B3*t within 2*pi*Z")
        return 5.0 * config.b3 ** 2 / denom
    if emit_point is None or emit_velocity is None:
        raise ValueError("perturbed regime needs emit_point and emit_velocity")
    x0 = np.array([emit_point[0], emit_point[1], 0.0])
    u0 = np.asarray(emit_velocity, dtype=float)
    h = fd_step_scale * max(1.0, float(np.linalg.norm(u0)))

    def flight(u):
        sol = forward_exit(x0[None, :], u[None, :], config)
        unwrapped = sol.x_hit[0] + sol.winding[0]
        return np.array([unwrapped[0], unwrapped[1], sol.t[0]])

    jac = np.zeros((3, 3))
    for k in range(3):
        du = np.zeros(3)
        du[k] = h
        jac[:, k] = (flight(u0 + du) - flight(u0 - du)) / (2.0 * h)
    det = np.linalg.det(jac)
    if abs(det) < 1e-14:
        raise DegenerateBounceError("degenerate bounce map (singular flow derivative)")
    return 1.0 / abs(det)


def jacobian_d0_correction(config: FieldConfig, t_b, emit_point, emit_velocity):
    """Ratio of the perturbed-flow jacobian factor to the pure-gravity one."""
    factor = bounce_jacobian(config, t_b, emit_point, emit_velocity)
    return factor * t_b ** 2 / (config.g / 2.0)


# ---------------------------------------------------------------------------
# Flux-tube change-of-variables identity
# ---------------------------------------------------------------------------

def _tf_mu(x, v, config):
    return np.exp(-0.5 * np.sum(v * v, axis=1) - potential_energy(config, x)) / (2.0 * np.pi)


def _tf_gauss_exp(x, v, config):
    # spatial decay at 0.8 g: slower than the trajectory envelope would
    # allow only for rates above g/2, below which both flux-tube and
    # phase-space estimators lose finite variance
    return np.exp(-0.5 * np.sum(v * v, axis=1) - 0.8 * config.g * x[:, 2])


def _tf_zero(x, v, config):
    return np.zeros(len(x))


TEST_FUNCTIONS = {"mu": _tf_mu, "gauss_exp": _tf_gauss_exp, "zero": _tf_zero}


@dataclass
class CovCheck:
    lhs: float
    lhs_se: float
    rhs: float
    rhs_se: float

    @property
    def rel_err(self) -> float:
        scale = max(abs(self.lhs), abs(self.rhs))
        return 0.0 if scale == 0 else abs(self.lhs - self.rhs) / scale


def _flow_to_times(x, v, s, config, dt_max=DEFAULT_DT):
    """Forward flow from boundary states to per-particle times s."""
    if config.exact:
        disp, vpar = _horizontal_flight(config, v[:, :2], s)
        x3 = x[:, 2] + v[:, 2] * s - 0.5 * config.g * s * s
        v3 = v[:, 2] - config.g * s
        xs = np.column_stack([wrap_torus(x[:, :2] + disp), np.maximum(x3, 0.0)])
        return xs, np.column_stack([vpar, v3])
    xs = x.copy()
    vs = v.copy()
    left = s.copy()
    while np.any(left > 0):
        h = np.minimum(left, dt_max)
        idx = h > 0
        xs[idx], vs[idx] = _rk4_step(xs[idx], vs[idx], h[idx][:, None], config)
        left = left - h
    xs[:, :2] = wrap_torus(xs[:, :2])
    xs[:, 2] = np.maximum(xs[:, 2], 0.0)
    return xs, vs


def cov_identity_check(config: FieldConfig, theta, test_function="mu",
                       samples: int = 200_000, rng=None) -> CovCheck:
    """Monte-Carlo check that the boundary flux-tube integral of a test
    function equals its plain phase-space integral.

    Left side: emissions from the floor weighted along the flight;
    right side: direct phase-space importance sampling.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    g_fn = TEST_FUNCTIONS[test_function] if isinstance(test_function, str) else test_function

    # boundary side
    x = np.column_stack([rng.random(samples), rng.random(samples), np.zeros(samples)])
    vpar = rng.standard_normal((samples, 2))
    v3 = rng.rayleigh(1.0, samples)
    v = np.column_stack([vpar, v3])
    t_plus = forward_exit_time(x, v, config) if config.exact else forward_exit(x, v, config).t
    s = rng.random(samples) * t_plus
    xs, vs = _flow_to_times(x, v, s, config)
    mu3 = np.exp(-0.5 * np.sum(v * v, axis=1)) / (2.0 * np.pi)
    lhs_w = g_fn(xs, vs, config) * t_plus / mu3
    lhs = float(np.mean(lhs_w))
    lhs_se = float(np.std(lhs_w) / np.sqrt(samples))

    # phase-space side
    kappa = config.g / 2.0
    y = np.column_stack([rng.random(samples), rng.random(samples),
                         rng.exponential(1.0 / kappa, samples)])
    w = rng.standard_normal((samples, 3))
    p = kappa * np.exp(-kappa * y[:, 2]) * (2.0 * np.pi) ** -1.5 * np.exp(-0.5 * np.sum(w * w, axis=1))
    rhs_w = g_fn(y, w, config) / p
    rhs = float(np.mean(rhs_w))
    rhs_se = float(np.std(rhs_w) / np.sqrt(samples))
    return CovCheck(lhs, lhs_se, rhs, rhs_se)

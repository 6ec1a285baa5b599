"""Stationary boundary flux and phase-space density reconstruction.

The stationary state is determined by its boundary flux J: along any
trajectory the density equals the wall Maxwellian at the last emission
point times J there.  J itself is the fixed point of the one-bounce
transition operator, computed here two ways: power iteration on a
Monte-Carlo estimate of the bounce kernel, and the damped, penalized
boundary iteration with per-flight attenuation exp(-eps * flight).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from .boundary import bounce_batch, sample_emission, wall_maxwellian_speed
from .characteristics import backward_exit, forward_exit_time
from .fields import FieldConfig, TemperatureField, potential_energy
from .streams import stream


class ConvergenceError(RuntimeError):
    pass


@dataclass
class FluxField:
    """Piecewise-constant boundary flux on an n x n torus grid."""
    grid_n: int
    values: np.ndarray          # (n, n), J >= 0
    total_mass: float | None = None
    meta: dict = dc_field(default_factory=dict)

    def cell_centers(self):
        c = (np.arange(self.grid_n) + 0.5) / self.grid_n
        return c

    @property
    def sup_inf_ratio(self) -> float:
        return float(np.max(self.values) / np.min(self.values))

    def scaled(self, c: float) -> "FluxField":
        return FluxField(self.grid_n, self.values * c,
                         None if self.total_mass is None else self.total_mass * c,
                         dict(self.meta))

    def interpolate(self, pts) -> np.ndarray:
        """Bilinear interpolation on the torus at boundary points (N, 2)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        n = self.grid_n
        u = pts * n - 0.5
        i0 = np.floor(u).astype(np.int64)
        frac = u - i0
        i1 = (i0 + 1) % n
        i0 = i0 % n
        v = self.values
        f00 = v[i0[:, 0], i0[:, 1]]
        f10 = v[i1[:, 0], i0[:, 1]]
        f01 = v[i0[:, 0], i1[:, 1]]
        f11 = v[i1[:, 0], i1[:, 1]]
        fx, fy = frac[:, 0], frac[:, 1]
        return (f00 * (1 - fx) * (1 - fy) + f10 * fx * (1 - fy)
                + f01 * (1 - fx) * fy + f11 * fx * fy)

    def to_csv(self, path):
        c = self.cell_centers()
        with open(path, "w") as fh:
            for k, v in sorted(self.meta.items()):
                fh.write(f"# {k}: {v}\n")
            if self.total_mass is not None:
                fh.write(f"# total_mass: {self.total_mass!r}\n")
            fh.write("x1,x2,J\n")
            for i in range(self.grid_n):
                for j in range(self.grid_n):
                    fh.write(f"{c[i]:.10f},{c[j]:.10f},{self.values[i, j]:.12e}\n")

    def l1_distance(self, other: "FluxField") -> float:
        if other.grid_n != self.grid_n:
            raise ValueError("grids differ")
        return float(np.mean(np.abs(self.values - other.values)))


@dataclass
class BounceKernel:
    """One-bounce transition data between boundary cells.

    ``sigma`` holds the chain-measure masses (wall Maxwellian at the
    landing point), ``counts`` the raw landing counts; the latter,
    normalized, is the physical Markov transition matrix of the bounce
    chain.  Both are row-indexed by emission cell.
    """
    grid_n: int
    sigma: np.ndarray         # (n^2, n^2) sigma-measure masses
    counts: np.ndarray        # (n^2, n^2) landing counts
    samples_per_cell: int
    seed: int

    def physical_matrix(self) -> np.ndarray:
        return self.counts / self.samples_per_cell

    def sigma_matrix(self) -> np.ndarray:
        return self.sigma.copy()

    def transition_matrix(self, kind: str = "physical") -> np.ndarray:
        m = self.physical_matrix() if kind == "physical" else self.sigma_matrix()
        sums = m.sum(axis=1, keepdims=True)
        if np.any(sums <= 0):
            raise ValueError("kernel has empty rows; not row-normalizable")
        return m / sums

    def row_sums(self, kind: str = "sigma") -> np.ndarray:
        m = self.physical_matrix() if kind == "physical" else self.sigma
        return m.sum(axis=1)

    def dump(self, bin_path, json_path):
        self.sigma.astype(np.float64).tofile(bin_path)
        counts_path = str(bin_path) + ".counts"
        self.counts.astype(np.int64).tofile(counts_path)
        with open(json_path, "w") as fh:
            json.dump({"grid_n": self.grid_n, "samples_per_cell": self.samples_per_cell,
                       "seed": self.seed, "dtype": "float64", "layout": "row-major",
                       "matrix": "sigma-measure masses", "counts_file": counts_path,
                       "counts_dtype": "int64"}, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _cell_index(pts, n):
    ij = np.floor(pts * n).astype(np.int64)
    ij = np.clip(ij, 0, n - 1)
    return ij[:, 0] * n + ij[:, 1]


def estimate_kernel(grid_n: int, samples_per_cell: int, config: FieldConfig,
                    theta: TemperatureField, seed: int = 0) -> BounceKernel:
    """Monte-Carlo bounce kernel: emissions uniform within each cell,
    velocities from the local flux measure.

    One shared block of base draws (within-cell offsets, unit normals,
    unit Rayleighs) is reused for every emission cell; each row is still
    an unbiased sample of its own transition law, but row-to-row noise is
    coupled, so an exactly translation-invariant bounce law yields an
    exactly circulant estimate instead of one polluted by independent
    multinomial noise.
    """
    if grid_n < 4:
        raise ValueError("grid_n >= 4")
    n2 = grid_n * grid_n
    counts = np.zeros((n2, n2), dtype=np.int64)
    sigma = np.zeros((n2, n2))
    inv_n = 1.0 / grid_n
    rng = stream(seed, 0)
    offsets = rng.random((samples_per_cell, 2)) * inv_n
    base_normal = rng.standard_normal((samples_per_cell, 2))
    base_rayleigh = rng.rayleigh(1.0, samples_per_cell)
    for cell in range(n2):
        base = np.array([cell // grid_n, cell % grid_n], dtype=float) * inv_n
        pts = base + offsets
        s = np.sqrt(theta(pts))
        v = np.column_stack([s[:, None] * base_normal, s * base_rayleigh])
        b = bounce_batch(pts, v, config, theta)
        land = _cell_index(b.land_point, grid_n)
        np.add.at(counts[cell], land, 1)
        np.add.at(sigma[cell], land, b.sigma_weight)
    sigma /= samples_per_cell
    return BounceKernel(grid_n, sigma, counts, samples_per_cell, seed)


def stationary_flux_power(kernel: BounceKernel, config: FieldConfig,
                          theta: TemperatureField, tol: float = 1e-11,
                          max_iter: int = 20000, mass_target: float | None = 1.0,
                          mass_samples: int = 200_000, seed: int = 1) -> FluxField:
    """Left fixed point of the physical bounce kernel, i.e. the flux J
    with J(x) = integral of mu_Theta(source) J(source) over arrivals.

    The iterate is normalized to mean one; if ``mass_target`` is given
    the result is rescaled so the reconstructed density has that total
    mass.
    """
    p = kernel.physical_matrix()
    n2 = p.shape[0]
    j = np.ones(n2)
    for it in range(max_iter):
        j_new = j @ p
        j_new /= np.mean(j_new)
        resid = float(np.max(np.abs(j_new - j)) / np.max(np.abs(j_new)))
        j = j_new
        if resid < tol:
            break
    else:
        raise ConvergenceError(f"power iteration stalled at residual {resid:.3e}")
    flux = FluxField(kernel.grid_n, j.reshape(kernel.grid_n, kernel.grid_n),
                     meta={"method": "power", "iterations": it + 1, "residual": resid})
    if mass_target is not None:
        mass, _ = reconstruct_mass(flux, config, theta, mass_samples, stream(seed, 900_001))
        flux = flux.scaled(mass_target / mass)
        flux.total_mass = mass_target
    return flux


def stationary_flux_dense(kernel: BounceKernel, config: FieldConfig,
                          theta: TemperatureField, mass_target: float | None = 1.0,
                          mass_samples: int = 200_000, seed: int = 1) -> FluxField:
    """Dense left-eigenvector oracle for small grids (n <= 32)."""
    import scipy.linalg

    p = kernel.physical_matrix()
    w, vl = scipy.linalg.eig(p.T)
    k = int(np.argmin(np.abs(w - 1.0)))
    j = np.real(vl[:, k])
    j = np.abs(j)
    j /= np.mean(j)
    flux = FluxField(kernel.grid_n, j.reshape(kernel.grid_n, kernel.grid_n),
                     meta={"method": "dense", "eigenvalue": float(np.real(w[k]))})
    if mass_target is not None:
        mass, _ = reconstruct_mass(flux, config, theta, mass_samples, stream(seed, 900_001))
        flux = flux.scaled(mass_target / mass)
        flux.total_mass = mass_target
    return flux


def apply_kernel(kernel: BounceKernel, values: np.ndarray) -> np.ndarray:
    return (values.ravel() @ kernel.physical_matrix()).reshape(values.shape)


# ---------------------------------------------------------------------------
# Penalized damped iteration
# ---------------------------------------------------------------------------

def _estimate_attenuated(grid_n, samples_per_cell, config, theta, seed, eps_list):
    """One MC pass estimating, for every eps, the flight-attenuated
    physical kernel and the attenuated flux of the boundary source
    r = mu_Theta - mu."""
    n2 = grid_n * grid_n
    mats = {eps: np.zeros((n2, n2)) for eps in eps_list}
    rvecs = {eps: np.zeros(n2) for eps in eps_list}
    inv_n = 1.0 / grid_n
    rng = stream(seed, 10_000_000)
    offsets = rng.random((samples_per_cell, 2)) * inv_n
    base_normal = rng.standard_normal((samples_per_cell, 2))
    base_rayleigh = rng.rayleigh(1.0, samples_per_cell)
    for cell in range(n2):
        base = np.array([cell // grid_n, cell % grid_n], dtype=float) * inv_n
        pts = base + offsets
        s = np.sqrt(theta(pts))
        v = np.column_stack([s[:, None] * base_normal, s * base_rayleigh])
        b = bounce_batch(pts, v, config, theta)
        land = _cell_index(b.land_point, grid_n)
        t = theta(pts)
        speed_sq = np.sum(v * v, axis=1)
        # mu / mu_Theta on the boundary, against the mu_Theta emission draw
        ratio = t * t * np.exp(-0.5 * speed_sq * (1.0 - 1.0 / t))
        for eps in eps_list:
            att = np.exp(-eps * b.flight_time)
            np.add.at(mats[eps][cell], land, att)
            np.add.at(rvecs[eps], land, att * (1.0 - ratio))
    for eps in eps_list:
        mats[eps] /= samples_per_cell
        rvecs[eps] /= samples_per_cell
    return mats, rvecs


@dataclass
class PenalizedResult:
    flux: FluxField
    fluctuation_flux: np.ndarray
    mass_defect: float
    iterations: int
    eps: float
    j_damping: int


def penalized_flux_iteration(grid_n: int, eps: float, j_damping: int,
                             config: FieldConfig, theta: TemperatureField,
                             samples_per_cell: int = 2000, seed: int = 0,
                             tol: float = 1e-12, max_iter: int = 100_000,
                             mass_samples: int = 100_000,
                             _estimated=None) -> PenalizedResult:
    """Damped boundary iteration with exp(-eps * flight) attenuation.

    Iterates g <- (1 - 1/j) g A_eps + r_eps on the flux grid until the
    L1 increments are Cauchy; returns the flux of mu + f together with
    the zero-mass defect of the fluctuation f.
    """
    if eps <= 0:
        raise ValueError("eps > 0 required")
    if j_damping < 2:
        raise ValueError("j_damping >= 2")
    if _estimated is None:
        mats, rvecs = _estimate_attenuated(grid_n, samples_per_cell, config, theta,
                                           seed, [eps])
    else:
        mats, rvecs = _estimated
    a = mats[eps]
    r = rvecs[eps]
    damp = 1.0 - 1.0 / j_damping
    g = np.zeros(grid_n * grid_n)
    for it in range(max_iter):
        g_new = damp * (g @ a) + r
        delta = float(np.mean(np.abs(g_new - g)))
        g = g_new
        if delta < tol * max(1.0, float(np.mean(np.abs(g)))):
            break
    else:
        raise ConvergenceError(f"penalized iteration stalled at increment {delta:.3e}")

    values = 1.0 + g.reshape(grid_n, grid_n)  # impinging flux of mu is exactly 1
    flux = FluxField(grid_n, values, meta={"method": "penalized", "eps": eps,
                                           "j_damping": j_damping, "iterations": it + 1})
    defect = _fluctuation_mass(flux, g, eps, damp, config, theta, mass_samples,
                               stream(seed, 30_000_000))
    return PenalizedResult(flux, g.reshape(grid_n, grid_n), defect, it + 1, eps, j_damping)


def _fluctuation_mass(flux, g, eps, damp, config, theta, samples, rng):
    """Monte-Carlo mass of the penalized fluctuation f, which the exact
    scheme would keep at zero."""
    x, v, p = _mu_proposal(config, theta, samples, rng)
    sol = backward_exit(x, v, config)
    gflux = FluxField(flux.grid_n, g.reshape(flux.grid_n, flux.grid_n))
    speed_b = np.sum(sol.v_hit ** 2, axis=1)
    mu_th = wall_maxwellian_speed(theta, sol.x_hit, speed_b)
    mu_iso = np.exp(-0.5 * speed_b) / (2.0 * np.pi)
    fval = np.exp(-eps * sol.t) * (damp * mu_th * gflux.interpolate(sol.x_hit)
                                   + (mu_th - mu_iso))
    w = fval / p
    return float(np.mean(w))


def penalized_flux_sweep(grid_n: int, eps_list, j_damping: int, config: FieldConfig,
                         theta: TemperatureField, samples_per_cell: int = 2000,
                         seed: int = 0, **kw):
    """Shared-sample penalized solves over an eps sequence plus the
    linear eps -> 0 extrapolation of the two smallest values."""
    eps_list = sorted(eps_list, reverse=True)
    estimated = _estimate_attenuated(grid_n, samples_per_cell, config, theta, seed,
                                     eps_list)
    results = [penalized_flux_iteration(grid_n, eps, j_damping, config, theta,
                                        samples_per_cell, seed, _estimated=estimated, **kw)
               for eps in eps_list]
    e1, e0 = eps_list[-2], eps_list[-1]
    j1, j0 = results[-2].flux.values, results[-1].flux.values
    extrap = j0 + (j0 - j1) * e0 / (e1 - e0)
    flux = FluxField(grid_n, extrap, meta={"method": "penalized-extrapolated",
                                           "eps_list": list(eps_list)})
    return results, flux


# ---------------------------------------------------------------------------
# Density reconstruction
# ---------------------------------------------------------------------------

def reconstruct_density(flux: FluxField, x, v, config: FieldConfig,
                        theta: TemperatureField) -> np.ndarray:
    """Pointwise stationary density: wall Maxwellian at the last emission
    point times the interpolated flux there."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    sol = backward_exit(x, v, config)
    speed_b = np.sum(sol.v_hit ** 2, axis=1)
    return wall_maxwellian_speed(theta, sol.x_hit, speed_b) * flux.interpolate(sol.x_hit)


def _mu_proposal(config: FieldConfig, theta: TemperatureField, samples: int, rng,
                 temp: float | None = None):
    """Phase-space proposal matched to the stationary scales: exponential
    height profile and Gaussian velocities at the mean wall temperature."""
    tbar = temp if temp is not None else 0.5 * (theta.a + theta.b)
    rate = config.g / tbar
    x = np.column_stack([rng.random(samples), rng.random(samples),
                         rng.exponential(1.0 / rate, samples)])
    v = np.sqrt(tbar) * rng.standard_normal((samples, 3))
    p = rate * np.exp(-rate * x[:, 2]) * (2.0 * np.pi * tbar) ** -1.5 \
        * np.exp(-0.5 * np.sum(v * v, axis=1) / tbar)
    return x, v, p


def reconstruct_mass(flux: FluxField, config: FieldConfig, theta: TemperatureField,
                     samples: int = 200_000, rng=None, return_linf: bool = False):
    """Monte-Carlo total mass of the reconstructed density (importance
    proposal matched to the Maxwellian scales); optionally also the
    empirical exponentially-weighted sup norm."""
    if rng is None:
        rng = stream(0, 900_001)
    x, v, p = _mu_proposal(config, theta, samples, rng)
    f = reconstruct_density(flux, x, v, config, theta)
    w = f / p
    mass = float(np.mean(w))
    se = float(np.std(w) / np.sqrt(samples))
    if not return_linf:
        return mass, se
    # e^{(|v|^2/2 + Phi)/(2b)} F_s, the stationary sup-norm observable
    weight = np.exp((0.5 * np.sum(v * v, axis=1) + potential_energy(config, x))
                    / (2.0 * theta.b))
    linf = float(np.max(weight * f))
    return mass, se, linf


# ---------------------------------------------------------------------------
# Continuity diagnostics
# ---------------------------------------------------------------------------

@dataclass
class ContinuityRow:
    grid_n: int
    modulus: float


@dataclass
class ContinuityReport:
    rows: list[ContinuityRow]
    theta_modulus: list[tuple[int, float]]
    theta_discontinuous: bool

    def __str__(self):
        out = [f"n={r.grid_n}: max adjacent jump {r.modulus:.4e}" for r in self.rows]
        if self.theta_discontinuous:
            out.append("WARNING: boundary temperature looks discontinuous "
                       "(outside the continuous-temperature hypothesis)")
        return "\n".join(out)


def flux_modulus(flux: FluxField) -> float:
    v = flux.values
    d1 = np.abs(np.roll(v, -1, axis=0) - v)
    d2 = np.abs(np.roll(v, -1, axis=1) - v)
    return float(max(d1.max(), d2.max()))


def continuity_report(fluxes, theta: TemperatureField | None = None) -> ContinuityReport:
    """Discrete modulus of continuity across a grid-refinement sequence.

    The flux of a continuous-temperature problem should show a
    non-increasing adjacent-cell jump beyond Monte-Carlo noise; the
    temperature field itself is probed the same way and flagged when its
    jumps fail to shrink under refinement.
    """
    rows = [ContinuityRow(f.grid_n, flux_modulus(f)) for f in fluxes]
    theta_mod = []
    flag = False
    if theta is not None:
        for n in (64, 256, 1024):
            gx = (np.arange(n) + 0.5) / n
            pts = np.column_stack([gx, np.full(n, 0.25)])
            vals = theta(pts)
            jump_x = np.max(np.abs(np.diff(vals)))
            pts_y = np.column_stack([np.full(n, 0.25), gx])
            jump_y = np.max(np.abs(np.diff(theta(pts_y))))
            theta_mod.append((n, float(max(jump_x, jump_y))))
        m0, m2 = theta_mod[0][1], theta_mod[-1][1]
        flag = m0 > 0 and m2 > 0.5 * m0
    return ContinuityReport(rows, theta_mod, flag)

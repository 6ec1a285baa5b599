"""Force-field configuration, total potential, boundary temperature.

Three regimes are supported: pure gravity, gravity plus a small
horizontal-periodic perturbation potential, and gravity with a vertical
magnetic field (where the gravitational constant is pinned to 10 so the
bounce-time law t = |v3|/5 is exact).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .expressions import ScalarField, ZERO_FIELD


class Regime(enum.Enum):
    GRAVITY_ONLY = "gravity"
    GRAVITY_PERTURBED = "perturbed"
    MAGNETIC = "magnetic"


MAGNETIC_G = 10.0


class FieldError(ValueError):
    pass


@dataclass(frozen=True)
class FieldConfig:
    regime: Regime
    g: float = 10.0
    b3: float | None = None
    phi: ScalarField | None = None
    rho1: float = 2.0
    rho2: float = 0.5
    rho3: float = 0.5

    def __post_init__(self):
        if self.g <= 0:
            raise FieldError("g must be positive")
        if self.regime is Regime.MAGNETIC:
            if self.g != MAGNETIC_G:
                raise FieldError("g must equal 10 in magnetic regime")
            if self.b3 is None or self.b3 < 1.0:
                raise FieldError("b3 >= 1 required in magnetic regime")
            if self.phi is not None:
                raise FieldError("perturbation potential not allowed in magnetic regime")
        elif self.regime is Regime.GRAVITY_PERTURBED:
            if self.phi is None:
                raise FieldError("perturbed regime needs a potential expression")
            if self.rho1 <= 1.0:
                raise FieldError("rho1 > 1 required")
            if not self.phi.vanishes_on_floor():
                raise FieldError("phi must vanish at x3 = 0")
            if not self.phi.is_horizontally_periodic():
                raise FieldError("phi must be 1-periodic in x1, x2")
        else:
            if self.phi is not None:
                raise FieldError("gravity-only regime has phi = 0")

    @property
    def exact(self) -> bool:
        """True when the characteristics have closed-form propagation."""
        return self.regime is not Regime.GRAVITY_PERTURBED

    @property
    def phi_or_zero(self) -> ScalarField:
        return self.phi if self.phi is not None else ZERO_FIELD


def gravity_field(g: float = 10.0) -> FieldConfig:
    return FieldConfig(Regime.GRAVITY_ONLY, g=g)


def magnetic_field(b3: float) -> FieldConfig:
    return FieldConfig(Regime.MAGNETIC, g=MAGNETIC_G, b3=b3)


def perturbed_field(g: float, phi_expr: str, rho1: float = 2.0,
                    rho2: float = 0.5, rho3: float | None = None) -> FieldConfig:
    if rho3 is None:
        rho3 = g / 2.0
    return FieldConfig(Regime.GRAVITY_PERTURBED, g=g, phi=ScalarField(phi_expr),
                       rho1=rho1, rho2=rho2, rho3=rho3)


def potential_energy(config: FieldConfig, x) -> np.ndarray:
    """Total potential g*x3 + phi(x); zero on the floor by construction."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out = config.g * x[:, 2]
    if config.phi is not None:
        out = out + config.phi(x)
    return out


def potential_gradient(config: FieldConfig, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    grad = np.zeros_like(x)
    grad[:, 2] = config.g
    if config.phi is not None:
        grad += config.phi.gradient(x)
    return grad


def force(config: FieldConfig, x, v) -> np.ndarray:
    """v x B - grad(phi) - g e3, per regime."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    out = -potential_gradient(config, x)
    if config.regime is Regime.MAGNETIC:
        out[:, 0] += config.b3 * v[:, 1]
        out[:, 1] -= config.b3 * v[:, 0]
    return out


class Potential:
    """Total potential g*x3 + phi(x) as a value object: zero on the floor,
    nonnegative whenever the field hypotheses hold."""

    def __init__(self, config: FieldConfig):
        self.config = config

    def __call__(self, x):
        return potential_energy(self.config, x)

    def gradient(self, x):
        return potential_gradient(self.config, x)


class TemperatureField:
    """Boundary temperature on T^2 with lattice-certified bounds.

    The bounds a = inf Theta and b = sup Theta are obtained by dense
    sampling plus a user-supplied relative margin; every evaluation is
    checked to stay positive.
    """

    def __init__(self, expr: str | None = None, func=None, lattice: int = 256,
                 margin: float = 0.01):
        if (expr is None) == (func is None):
            raise FieldError("give exactly one of expr or func")
        self.expr_str = expr
        if expr is not None:
            self._field = ScalarField(expr)
            if not self._field.is_horizontally_periodic():
                raise FieldError("Theta must be 1-periodic in x1, x2")
            self._func = None
        else:
            self._field = None
            self._func = func
        g1 = (np.arange(lattice) + 0.5) / lattice
        xx, yy = np.meshgrid(g1, g1, indexing="ij")
        vals = self(np.column_stack([xx.ravel(), yy.ravel()]))
        if np.min(vals) <= 0:
            raise FieldError("Theta must be strictly positive")
        span = np.max(vals) - np.min(vals)
        self.a = float(np.min(vals) - margin * span)
        self.b = float(np.max(vals) + margin * span)
        if self.a <= 0:
            self.a = float(np.min(vals)) * (1.0 - margin)
        self.margin = margin

    @classmethod
    def constant(cls, value: float) -> "TemperatureField":
        return cls(expr=repr(float(value)))

    @classmethod
    def from_callable(cls, func, **kw) -> "TemperatureField":
        return cls(func=func, **kw)

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self._field is not None:
            if x.shape[1] == 2:
                x = np.column_stack([x, np.zeros(len(x))])
            return self._field(x)
        return np.asarray(self._func(x[:, 0], x[:, 1]), dtype=float) * np.ones(len(x))

    @property
    def ratio(self) -> float:
        """b^2 / a^2, reported rather than normalized away."""
        return self.b ** 2 / self.a ** 2

    def __repr__(self):
        src = self.expr_str if self.expr_str is not None else "<callable>"
        return f"TemperatureField({src!r}, a={self.a:.4g}, b={self.b:.4g})"


@dataclass
class HypothesisCheck:
    name: str
    passed: bool
    observed: float
    bound: float

    @property
    def margin(self) -> float:
        return self.bound - self.observed


@dataclass
class ValidationReport:
    checks: list[HypothesisCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name, observed, bound, safety=1.0):
        self.checks.append(HypothesisCheck(name, observed * safety <= bound,
                                           float(observed), float(bound)))

    def __str__(self):
        lines = []
        for c in self.checks:
            lines.append(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: "
                         f"observed {c.observed:.6g} vs bound {c.bound:.6g}")
        return "\n".join(lines)


def _validation_lattice(rho1: float, n_xy: int = 128, n_z: int = 64) -> np.ndarray:
    z_max = 10.0 / rho1
    gx = (np.arange(n_xy) + 0.5) / n_xy
    gz = np.linspace(0.0, z_max, n_z)
    xx, yy, zz = np.meshgrid(gx, gx, gz, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel(), zz.ravel()])


def validate_field(config: FieldConfig, n_xy: int = 128, n_z: int = 64,
                   safety: float = 1.01) -> ValidationReport:
    """Check the standing hypotheses on the force field by lattice sampling.

    The perturbation bounds are sup-norm statements; they are verified on
    a dense lattice (default 128x128x64 up to x3 = 10/rho1) with a 1%
    safety factor on the observed suprema.
    """
    report = ValidationReport()
    report.add("g > 0", 0.0, config.g)
    if config.regime is Regime.MAGNETIC:
        report.add("b3 >= 1", 1.0, config.b3)
        report.add("g == 10", abs(config.g - MAGNETIC_G), 0.0)
        return report
    if config.regime is Regime.GRAVITY_ONLY:
        return report

    phi = config.phi
    lattice = _validation_lattice(config.rho1, n_xy, n_z)
    grad = phi.gradient(lattice)
    gnorm = np.linalg.norm(grad, axis=1)
    hess = phi.hessian(lattice)
    hnorm = np.abs(np.linalg.eigvalsh(hess)).max(axis=1)
    weighted = np.exp(config.rho1 * lattice[:, 2]) * hnorm

    report.add("|grad phi| <= g/2", np.max(gnorm), config.g / 2.0, safety)
    report.add("|grad phi| <= rho3", np.max(gnorm), config.rho3, safety)
    report.add("exp(rho1 x3) |hess phi| <= rho2", np.max(weighted), config.rho2, safety)
    floor = lattice[lattice[:, 2] == 0.0]
    report.add("phi(x1, x2, 0) == 0", np.max(np.abs(phi(floor))), 1e-10)
    report.add("Phi >= 0 on lattice", -np.min(potential_energy(config, lattice)), 0.0)
    return report

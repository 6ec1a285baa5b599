import numpy as np
import pytest

from gravmix.expressions import ExpressionError, ScalarField
from gravmix.fields import (FieldError, Regime, TemperatureField, force,
                            gravity_field, magnetic_field, perturbed_field,
                            potential_energy, validate_field)

PHI = "0.01*(exp(-2*x3) - exp(-4*x3))*sin(2*pi*x1)"


def test_scalar_field_exact_derivatives():
    f = ScalarField("0.3*exp(-x3)*sin(2*pi*x1)*cos(2*pi*x2)")
    x = np.array([[0.1, 0.2, 0.5], [0.7, 0.9, 1.3]])
    g = f.gradient(x)
    h = 1e-6
    for k in range(3):
        xp = x.copy(); xp[:, k] += h
        xm = x.copy(); xm[:, k] -= h
        fd = (f(xp) - f(xm)) / (2 * h)
        assert np.allclose(g[:, k], fd, atol=1e-8)
    hess = f.hessian(x)
    assert hess.shape == (2, 3, 3)
    assert np.allclose(hess, np.swapaxes(hess, 1, 2))  # symmetry


def test_grammar_rejects_unknown_functions():
    with pytest.raises(ExpressionError):
        ScalarField("tan(x1)")
    with pytest.raises(ExpressionError):
        ScalarField("x1 + y")


def test_periodicity_check():
    assert ScalarField("sin(2*pi*x1)").is_horizontally_periodic()
    assert not ScalarField("sin(x1)").is_horizontally_periodic()


def test_gravity_force_is_constant():
    cfg = gravity_field(10.0)
    f = force(cfg, [[0.1, 0.2, 0.3]], [[1.0, 2.0, 3.0]])
    assert np.allclose(f, [[0.0, 0.0, -10.0]])
    assert potential_energy(cfg, [[0.0, 0.0, 0.45]])[0] == pytest.approx(4.5)


def test_magnetic_force_cross_product():
    cfg = magnetic_field(1.0)
    f = force(cfg, [[0.0, 0.0, 1.0]], [[1.0, 2.0, 3.0]])
    # v x B = (v2 B3, -v1 B3, 0)
    assert np.allclose(f, [[2.0, -1.0, -10.0]])


def test_magnetic_regime_constraints():
    with pytest.raises(FieldError, match="g must equal 10"):
        from gravmix.fields import FieldConfig
        FieldConfig(Regime.MAGNETIC, g=9.0, b3=1.0)
    with pytest.raises(FieldError):
        magnetic_field(0.5)


def test_phi_must_vanish_on_floor():
    with pytest.raises(FieldError, match="vanish"):
        perturbed_field(10.0, "0.01*exp(-2*x3)*sin(2*pi*x1)")


def test_validate_gravity_only_vacuous():
    rep = validate_field(gravity_field(10.0))
    assert rep.passed
    assert len(rep.checks) == 1


def test_validate_perturbed_hessian_margin():
    cfg = perturbed_field(10.0, PHI, rho1=2.0, rho2=0.5)
    rep = validate_field(cfg, n_xy=64, n_z=48)
    assert rep.passed
    check = {c.name: c for c in rep.checks}["exp(rho1 x3) |hess phi| <= rho2"]
    # weighted Hessian supremum is the x1-curvature amplitude 0.01 (2 pi)^2
    assert check.observed == pytest.approx(0.01 * (2 * np.pi) ** 2, rel=0.02)


def test_validate_flags_violated_bound():
    cfg = perturbed_field(10.0, PHI, rho1=2.0, rho2=0.1)
    rep = validate_field(cfg, n_xy=32, n_z=32)
    assert not rep.passed


def test_force_divergence_free_in_v():
    # finite differences of the force field in v at random states
    rng = np.random.default_rng(0)
    x = np.column_stack([rng.random(50), rng.random(50), rng.random(50)])
    v = rng.standard_normal((50, 3))
    h = 1e-5
    for cfg in (gravity_field(10.0), magnetic_field(3.0),
                perturbed_field(10.0, PHI)):
        div = np.zeros(50)
        for k in range(3):
            vp = v.copy(); vp[:, k] += h
            vm = v.copy(); vm[:, k] -= h
            div += (force(cfg, x, vp)[:, k] - force(cfg, x, vm)[:, k]) / (2 * h)
        assert np.max(np.abs(div)) < 1e-8


def test_potential_positive_when_hypotheses_pass():
    cfg = perturbed_field(10.0, PHI)
    rng = np.random.default_rng(1)
    x = np.column_stack([rng.random(500), rng.random(500), 5 * rng.random(500)])
    assert np.all(potential_energy(cfg, x) >= 0)


def test_temperature_bounds_certified():
    th = TemperatureField(expr="1 + (1/9)*sin(2*pi*x1)")
    assert th.a < 8 / 9 + 1e-6 and th.b > 10 / 9 - 1e-6
    assert th.ratio == pytest.approx((th.b / th.a) ** 2)
    with pytest.raises(FieldError):
        TemperatureField(expr="sin(2*pi*x1)")  # not strictly positive


def test_temperature_from_callable():
    th = TemperatureField.from_callable(lambda x1, x2: 2.0 + 0 * x1)
    assert th(np.array([[0.3, 0.4]]))[0] == pytest.approx(2.0)

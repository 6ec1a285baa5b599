import numpy as np
import pytest

from gravmix.fields import TemperatureField, gravity_field, magnetic_field
from gravmix.stationary import estimate_kernel
from gravmix.verification import (VerificationConfig, bad_set_scaling,
                                  doeblin_minorization, exit_time_scaling,
                                  residual_measure_curve, verify_jacobian)

G10 = gravity_field(10.0)
MAG = magnetic_field(1.0)
MAG25 = magnetic_field(25.0)
TH1 = TemperatureField.constant(1.0)
TH_VAR = TemperatureField(expr="1 + (1/9)*sin(2*pi*x1)")


def test_config_validation():
    with pytest.raises(ValueError):
        VerificationConfig(samples=0)
    with pytest.raises(ValueError):
        VerificationConfig(delta_grid=(0.1, 0.01))


def test_verify_jacobian_magnetic():
    rep = verify_jacobian(MAG, TH1, 400_000, bins=20, seed=1)
    assert rep.max_rel_err < 0.03
    assert np.all(rep.counts[rep.populated] >= 1000)


def test_verify_jacobian_gravity():
    rep = verify_jacobian(G10, TH1, 400_000, bins=20, seed=1)
    assert rep.max_rel_err < 0.03


def test_verify_jacobian_rejects_varying_theta():
    with pytest.raises(ValueError):
        verify_jacobian(G10, TH_VAR, 1000)


def test_sparse_bins_excluded():
    rep = verify_jacobian(G10, TH1, 5_000, bins=20, seed=2, min_hits=10**9)
    assert not np.any(rep.populated)
    assert np.isnan(rep.max_rel_err)


@pytest.mark.parametrize("cfg", [G10, MAG])
def test_exit_time_scaling_quadratic(cfg):
    fit = exit_time_scaling(cfg, TH1, (1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2, 1e-1),
                            1_000_000, seed=3)
    assert 1.8 <= fit.slope <= 2.2
    assert np.all(np.diff(fit.probs) > 0)


def test_exit_time_scaling_rejects_large_delta():
    with pytest.raises(ValueError):
        exit_time_scaling(G10, TH1, (0.1, 0.5), 1000)


def test_bad_set_scaling_linear_at_reachable_period():
    fit = bad_set_scaling(MAG25, TH1, (0.01, 0.02, 0.05, 0.1, 0.2), 400_000, seed=4)
    assert 0.8 <= fit.slope <= 1.2


def test_bad_set_scaling_b3_invariance():
    # doubling B3 keeps the linear law as long as the bands stay reachable
    f1 = bad_set_scaling(MAG25, TH1, (0.02, 0.05, 0.1, 0.2), 400_000, seed=5)
    f2 = bad_set_scaling(magnetic_field(50.0), TH1, (0.02, 0.05, 0.1, 0.2),
                         400_000, seed=5)
    assert abs(f1.slope - f2.slope) < 0.2


def test_bad_set_wrong_regime():
    with pytest.raises(ValueError):
        bad_set_scaling(G10, TH1, (0.01, 0.1), 1000)


def test_residual_curve_isothermal_probability():
    rc = residual_measure_curve(TH1, G10, 20, 5.0, 20_000, seed=6)
    assert np.all(rc.values <= 1.0 + 1e-12)
    assert np.all(np.diff(rc.values) <= 1e-12)  # monotone in depth


def test_residual_curve_short_horizon_vanishes():
    rc = residual_measure_curve(TH1, G10, 10, 1e-4, 20_000, seed=7)
    assert np.all(rc.values[1:] <= 1e-4)


def test_residual_uniform_bound_vs_naive():
    rc = residual_measure_curve(TH_VAR, G10, 50, 10.0, 50_000, seed=8)
    assert rc.uniformly_bounded()
    assert rc.naive_bound[-1] > 1e6  # the compounding bound explodes
    assert np.max(rc.values) < 2.0


def test_doeblin_single_cell_is_one():
    k = np.ones((1, 1))
    res = doeblin_minorization(k, 1)
    assert res.coupling == pytest.approx(1.0)


def test_doeblin_monotone_and_positive():
    kernel = estimate_kernel(8, 20_000, G10, TH_VAR, seed=9)
    res = [doeblin_minorization(kernel, n) for n in (1, 2, 3)]
    assert res[0].coupling > 0
    assert res[0].coupling <= res[1].coupling <= res[2].coupling
    assert res[2].common_component.sum() == pytest.approx(1.0)


def test_doeblin_detects_no_overlap():
    k = np.eye(4)
    res = doeblin_minorization(k, 1)
    assert res.coupling == 0.0
    assert not res.minorized


def test_doeblin_sigma_matrix_variant():
    kernel = estimate_kernel(8, 10_000, G10, TH_VAR, seed=10)
    res = doeblin_minorization(kernel, 3, matrix_kind="sigma")
    assert res.coupling > 0

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from mfjump.model import semi_linear_spec, solve_mean_ode
from mfjump.payoffs import Payoff
from mfjump.simulate import NoiseBatch, malliavin_derivative, sample_noise, simulate_paths
from mfjump.weights import (ConstantWeight, WeightError, WeightField, barrier_do_weight,
                            barrier_uo_weight, d_max, d_min, european_weight, inf_shift,
                            skorokhod_integral, sup_shift, weight_value)


@pytest.fixture
def bundle(example2, example2_mean, coarse_grid):
    return simulate_paths(example2, example2_mean, sample_noise(example2, coarse_grid, 13, range(300)))


def test_shift_extrema():
    assert sup_shift([1.0, 2.0, 1.0], [0.0, 0.0, 2.0])[0] == 3.0
    assert sup_shift([1.0, 2.0, 1.0], [0.0, 0.0, 0.5])[0] == 2.0
    assert inf_shift([2.0, 1.6, 1.8], [0.0, -0.2, -0.2])[0] == pytest.approx(1.4)


def test_d_max_and_d_min_match_the_shifted_path(bundle):
    D = malliavin_derivative(bundle, 7, 0.1)
    assert_allclose(d_max(bundle, 7, 0.1), np.max(bundle.X + D, axis=1) - bundle.X.max(axis=1))
    assert_allclose(d_min(bundle, 7, 0.1), np.min(bundle.X + D, axis=1) - bundle.X.min(axis=1))
    # F = 1 > 0: shifting can only raise the maximum
    assert np.all(d_max(bundle, 7, 0.1) >= 0.0)


# ----------------------------
# Single weight values
# ----------------------------

def test_european_weight_above_strike():
    omega, guarded = weight_value(Payoff("european_call", 0.5), 1.0, 2.0, 5.0, 0.1)
    assert omega == pytest.approx(5.0)
    assert not guarded


def test_european_weight_when_the_shift_ends_below_strike():
    # X_T = 1.5, K = 1.2, D = -0.5: the shifted path finishes at 1.0 < K
    omega, _ = weight_value(Payoff("european_call", 1.2), 1.5, 2.0, 1.0, 0.1)
    assert omega == pytest.approx(2.0 / (0.1 * (0.0 - 0.3)))
    assert omega == pytest.approx(-66.6667, rel=1e-5)


def test_up_and_out_weight():
    # max X = 1.2 rises to 1.4 < B = 1.5
    omega, _ = weight_value(Payoff("up_and_out_call", 1.0, 1.5), 1.2, 1.0, 1.4, 0.1)
    assert omega == pytest.approx(50.0)


def test_down_and_out_weight():
    X = np.array([[2.0, 1.6, 1.8]])
    shifted = inf_shift(X, np.array([[0.0, -0.2, -0.2]]))
    omega, _ = weight_value(Payoff("down_and_out_call", 1.0, 0.5), 1.6, 1.0, shifted, 0.1)
    assert omega[0] == pytest.approx(-50.0)


def test_knocked_out_path_has_no_weight():
    omega, guarded = weight_value(Payoff("up_and_out_call", 1.0, 1.5), 1.6, 1.0, 1.8, 0.1)
    assert omega == 0.0 and not guarded


def test_jump_that_leaves_the_barrier_payoff_unchanged_is_not_guarded():
    omega, guarded = weight_value(Payoff("up_and_out_call", 1.0, 1.5), 1.2, 1.0, 1.2, 0.1)
    assert omega == 0.0 and not guarded
    omega, guarded = weight_value(Payoff("up_and_out_call", 1.0, 1.5), 1.2, 1.0, 1.4, 0.0)
    assert omega == 0.0 and guarded


def test_digital_weight_scales_with_the_add_one_cost():
    # ramp'(1.0) = 5, cost = ramp(1.05) - ramp(1.0) = 0.25
    digital = Payoff("digital", 1.0, ramp=0.1)
    omega, guarded = weight_value(digital, 1.0, 2.0, 1.05, 0.5)
    assert omega == pytest.approx(5.0 * 2.0 * 0.25 / 0.5)
    assert not guarded
    # a vanishing shift gives a vanishing weight
    omega, _ = weight_value(digital, 1.0, 2.0, 1.0 + 1e-13, 0.5)
    assert abs(omega) < 1e-10
    omega, guarded = weight_value(digital, 1.0, 2.0, 1.05, 0.0)
    assert omega == 0.0 and guarded


def test_vanishing_denominator_is_guarded():
    omega, guarded = weight_value(Payoff("european_call", 0.5), np.array([1.0, 0.2]),
                                  np.array([1.0, 1.0]), np.array([1.0, 0.2]), 0.1)
    assert_array_equal(omega, [0.0, 0.0])
    # only the in-the-money entry has a live numerator
    assert_array_equal(guarded, [True, False])


# ----------------------------
# Fields
# ----------------------------

def test_field_is_zero_out_of_the_money(bundle):
    field = european_weight(bundle, 100.0)
    assert_array_equal(field(4, 0.0), 0.0)
    assert_array_equal(field.compensator(), 0.0)
    assert_array_equal(skorokhod_integral(field).value, 0.0)


def test_example2_weight_is_flow_over_jump_mass_times_state(bundle):
    field = european_weight(bundle, 0.5)
    itm = bundle.X[:, -1] > 0.5
    assert itm.any()
    expected = bundle.flow[:, -1] / (0.1 * bundle.X[:, -1])
    assert_allclose(field(11, 0.3)[itm], expected[itm], rtol=1e-10)
    assert_array_equal(field(11, 0.3)[~itm], 0.0)


def test_jump_free_model_has_no_weight(coarse_grid):
    spec = semi_linear_spec(drift_b1=-1.0, diffusion_c=1.0)
    quiet = simulate_paths(spec, solve_mean_ode(spec, coarse_grid), sample_noise(spec, coarse_grid, 0, range(4)))
    with pytest.raises(WeightError, match="Malliavin weight undefined for jump-free model"):
        european_weight(quiet, 0.5)


def test_constant_weight_counts_compensated_jumps(example2, example2_mean, coarse_grid):
    noise = NoiseBatch.build(coarse_grid, np.zeros((2, 32)), [(0, 1, 0.0), (0, 9, 0.2), (0, 30, -0.4)])
    quiet = simulate_paths(example2, example2_mean, noise)
    for evaluator in ("exact", "adapted"):
        result = skorokhod_integral(ConstantWeight(quiet, 1.0), evaluator=evaluator)
        assert_allclose(result.value, [2.9, -0.1])
        assert_array_equal(result.guard_hits, 0)


def test_constant_payoff_integrates_to_zero(bundle):
    result = skorokhod_integral(WeightField(bundle, Payoff("constant", 2.0)))
    assert_array_equal(result.value, 0.0)


def test_integral_decomposes(bundle):
    result = skorokhod_integral(european_weight(bundle, 0.5))
    assert_allclose(result.value, result.jump_sum - result.compensator)


@pytest.mark.parametrize("payoff", [Payoff("digital", 0.5, ramp=0.2),
                                    Payoff("up_and_out_call", 0.5, 1.5),
                                    Payoff("down_and_out_call", 0.3, 0.2)])
def test_weight_paired_with_the_add_one_cost_gives_the_pathwise_derivative(bundle, payoff):
    field = WeightField(bundle, payoff)
    rows = field.live_rows
    assert rows.size
    paired = field.quadrature(lambda r, k, z: field.evaluate(r, k, z)[0] * field.add_one_cost(r, k, z),
                              rows)
    target = payoff.weighted_derivative(field.G[rows]) * field.dG_dx[rows]
    assert_allclose(paired, target, rtol=1e-9)
    assert np.all(field.scale[rows] > 0.0)


def test_barrier_scale_is_the_jump_mass_that_moves_the_payoff(bundle):
    field = barrier_uo_weight(bundle, 0.5, 1.5)
    assert field.rule == "support"
    rows = field.live_rows
    # no path can carry more jump mass than nu T
    assert np.all(field.scale[rows] <= 0.1 * (1 + 1e-12))
    assert_array_equal(np.delete(field.scale, rows), 0.0)
    assert european_weight(bundle, 0.5).scale == pytest.approx(np.full(bundle.n_paths, 0.1))


def test_foreign_bundle_and_unknown_evaluator_are_rejected(bundle):
    field = european_weight(bundle, 0.5)
    with pytest.raises(WeightError, match="different bundle"):
        skorokhod_integral(field, bundle[0])
    with pytest.raises(WeightError, match="unknown Skorokhod evaluator"):
        skorokhod_integral(field, evaluator="midpoint")


def test_skorokhod_integral_has_zero_mean(example2, example2_mean, coarse_grid):
    values = []
    for start in range(0, 4000, 1000):
        chunk = simulate_paths(example2, example2_mean,
                               sample_noise(example2, coarse_grid, 77, range(start, start + 1000)))
        values.append(skorokhod_integral(european_weight(chunk, 0.5)).value)
    values = np.concatenate(values)
    stderr = values.std(ddof=1) / np.sqrt(len(values))
    assert abs(values.mean()) <= 4 * stderr


# ----------------------------
# Shifted barrier drivers
# ----------------------------

def _brute_force(bundle, payoff, k, z):
    D = malliavin_derivative(bundle, k, z)
    if payoff.kind == "up_and_out_call":
        return sup_shift(bundle.X, D)
    return inf_shift(bundle.X, D)


@pytest.mark.parametrize("homogeneous", [True, False])
@pytest.mark.parametrize("make", [lambda b: barrier_uo_weight(b, 0.5, 1.5),
                                  lambda b: barrier_do_weight(b, 0.5, 0.4)])
def test_shifted_barrier_driver_matches_brute_force(homogeneous, make, coarse_grid):
    params = dict(drift_b1=-1.0, diffusion_c=0.8, jump_f=0.5, jump_fz=1.0, nu=2.0)
    if not homogeneous:
        params.update(sigma0_c=0.3, lambda0_c=-0.2)
    spec = semi_linear_spec(**params)
    bundle = simulate_paths(spec, solve_mean_ode(spec, coarse_grid),
                            sample_noise(spec, coarse_grid, 31, range(50)))
    field = make(bundle)
    assert spec.is_homogeneous == homogeneous
    rows = np.arange(bundle.n_paths)
    for k in (0, 5, 31):
        for z in (-0.5, 0.1):
            D = malliavin_derivative(bundle, k, z)
            c = D[:, k] / bundle.Y[:, k]
            assert_allclose(field.shifted_driver(rows, k, c), _brute_force(bundle, field.payoff, k, z),
                            rtol=1e-12, atol=1e-12)

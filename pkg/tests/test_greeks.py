import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfjump import config
from mfjump.greeks import (EstimatorError, Moments, convergence_study, delta_fd_central,
                           delta_flow_pathwise, delta_malliavin, fd_independent, merge_all,
                           variance_report)
from mfjump.model import semi_linear_spec, solve_mean_ode, uniform_grid
from mfjump.payoffs import Payoff

SEED = 2024


@settings(max_examples=40)
@given(st.lists(st.lists(st.floats(-1e3, 1e3), min_size=0, max_size=20), min_size=1, max_size=6))
def test_moments_merge_like_one_sample(pieces):
    merged = merge_all([Moments.of(p) for p in pieces])
    flat = np.array([x for p in pieces for x in p])
    assert merged.n == len(flat)
    if len(flat):
        assert merged.mean == pytest.approx(flat.mean(), abs=1e-9)
    if len(flat) > 1:
        assert merged.variance == pytest.approx(flat.var(ddof=1), rel=1e-7, abs=1e-7)


def test_estimate_carries_its_standard_error(example2, example2_mean, coarse_grid):
    est = delta_flow_pathwise(example2, example2_mean, Payoff("identity"), 300, coarse_grid, SEED)
    assert est.stderr == pytest.approx(math.sqrt(est.variance / 300))
    assert (est.method, est.n_paths, est.seed, est.x0, est.nu) == ("flow_pathwise", 300, SEED, 1.0, 0.1)
    assert est.dt == 2.0 ** -5


# ----------------------------
# Estimators
# ----------------------------

def test_identity_delta_is_the_mean_sensitivity(example2, example2_mean, coarse_grid):
    # d f(1) / d x0 = 1 / (1 + x0)^2 = 0.25
    flow = delta_flow_pathwise(example2, example2_mean, Payoff("identity"), 3000, coarse_grid, SEED)
    fd = delta_fd_central(example2, None, Payoff("identity"), 3000, coarse_grid, SEED)
    for est in (flow, fd):
        assert abs(est.mean - 0.25) <= 0.01 + 4 * est.stderr
    assert fd.method == "fd_central" and fd.h == config.DEFAULT_H_FD


def test_constant_payoff_has_zero_delta(example2, example2_mean, coarse_grid):
    payoff = Payoff("constant", 3.0)
    assert delta_malliavin(example2, example2_mean, payoff, 200, coarse_grid, SEED).mean == 0.0
    assert delta_flow_pathwise(example2, example2_mean, payoff, 200, coarse_grid, SEED).mean == 0.0
    assert delta_fd_central(example2, None, payoff, 200, coarse_grid, SEED).mean == 0.0


def test_deep_in_the_money_call_is_the_identity(example2, example2_mean, coarse_grid):
    # paths of a homogeneous model stay positive, so a tiny strike is never hit
    call = delta_flow_pathwise(example2, example2_mean, Payoff("european_call", 1e-9), 400,
                               coarse_grid, SEED)
    ident = delta_flow_pathwise(example2, example2_mean, Payoff("identity"), 400, coarse_grid, SEED)
    assert call.mean == pytest.approx(ident.mean, rel=1e-12)


def test_pathwise_refuses_the_digital(example2, example2_mean, coarse_grid):
    with pytest.raises(EstimatorError, match="pathwise method invalid for discontinuous payoff"):
        delta_flow_pathwise(example2, example2_mean, Payoff("digital", 0.5), 100, coarse_grid, SEED)


def test_estimators_reject_bad_inputs(example2, example2_mean, coarse_grid):
    call = Payoff("european_call", 0.5)
    no_jumps = semi_linear_spec(drift_b1=-1.0, diffusion_c=1.0)
    with pytest.raises(EstimatorError, match="jump-free"):
        delta_malliavin(no_jumps, None, call, 100, coarse_grid, SEED)
    with pytest.raises(EstimatorError, match="cannot estimate a variance from 1 path"):
        delta_malliavin(example2, example2_mean, call, 1, coarse_grid, SEED)
    with pytest.raises(EstimatorError, match="must be positive"):
        delta_fd_central(example2, None, call, 100, coarse_grid, SEED, h=0.0)
    with pytest.raises(EstimatorError, match="unknown finite-difference mode"):
        delta_fd_central(example2, None, call, 100, coarse_grid, SEED, mode="backward")


def test_tiny_bump_is_noted(example2, coarse_grid):
    est = delta_fd_central(example2, None, Payoff("identity"), 50, coarse_grid, SEED, h=1e-9)
    assert est.notes and "amplified noise" in est.notes[0]


def test_forward_mode(example2, coarse_grid):
    est = delta_fd_central(example2, None, Payoff("identity"), 500, coarse_grid, SEED, mode="forward")
    assert est.method == "fd_forward"
    assert abs(est.mean - 0.25) <= 0.01 + 4 * est.stderr


def test_estimates_are_reproducible(example2, example2_mean, coarse_grid, monkeypatch):
    call = Payoff("european_call", 0.5)
    first = delta_malliavin(example2, example2_mean, call, 300, coarse_grid, SEED)
    again = delta_malliavin(example2, example2_mean, call, 300, coarse_grid, SEED)
    assert first == again
    assert first != delta_malliavin(example2, example2_mean, call, 300, coarse_grid, SEED + 1)

    monkeypatch.setattr(config, "CHUNK_CELLS", 32 * 64)
    serial = delta_malliavin(example2, example2_mean, call, 300, coarse_grid, SEED, threads=1)
    threaded = delta_malliavin(example2, example2_mean, call, 300, coarse_grid, SEED, threads=3)
    assert serial == threaded
    assert serial.mean == pytest.approx(first.mean, rel=1e-12)


def test_common_random_numbers_reduce_variance(example2, coarse_grid):
    call = Payoff("european_call", 0.5)
    crn = delta_fd_central(example2, None, call, 500, coarse_grid, SEED, h=1e-2)
    independent = fd_independent(example2, call, 500, coarse_grid, SEED, h=1e-2)
    assert independent.method == "fd_independent"
    assert crn.variance < independent.variance / 10


def test_three_estimators_agree_on_the_smoothed_call(example2):
    grid = uniform_grid(1.0, 2.0 ** -6)
    mf = solve_mean_ode(example2, grid)
    payoff = Payoff("smoothed_call", 0.5, smoothing=1e-2)
    mall = delta_malliavin(example2, mf, payoff, 4000, grid, SEED)
    flow = delta_flow_pathwise(example2, mf, payoff, 4000, grid, SEED)
    fd = delta_fd_central(example2, None, payoff, 4000, grid, SEED)
    for a, b in ((mall, flow), (mall, fd), (flow, fd)):
        assert abs(a.mean - b.mean) <= 4 * math.hypot(a.stderr, b.stderr), (a.method, b.method)


@pytest.mark.parametrize("payoff", [Payoff("up_and_out_call", 0.5, 1.5), Payoff("digital", 0.5)])
def test_weight_guard_is_rarely_hit(example2, payoff):
    grid = uniform_grid(1.0, 2.0 ** -6)
    est = delta_malliavin(example2, solve_mean_ode(example2, grid), payoff, 2000, grid, SEED)
    assert est.guard_hits / est.n_paths <= 1e-3


# ----------------------------
# Reports
# ----------------------------

def test_variance_report_against_itself(example2, coarse_grid):
    est = delta_fd_central(example2, None, Payoff("european_call", 0.5), 100, coarse_grid, SEED)
    rows = variance_report([est, est])
    assert rows[1].variance_ratio == 1.0
    assert rows[1].stderr_ratio == 1.0
    assert rows[0].method == "fd_central"


def test_variance_report_refuses_mismatched_runs(example2, coarse_grid):
    call = Payoff("european_call", 0.5)
    a = delta_fd_central(example2, None, call, 100, coarse_grid, SEED)
    b = delta_fd_central(example2, None, call, 100, coarse_grid, SEED + 1)
    with pytest.raises(EstimatorError, match="configurations differ"):
        variance_report([a, b])
    with pytest.raises(EstimatorError, match="at least two"):
        variance_report([a])


# ----------------------------
# Convergence
# ----------------------------

def test_deterministic_euler_converges_with_order_one():
    spec = semi_linear_spec(drift_b0=1.0)
    result = convergence_study(spec, None, "state", [2.0 ** -4, 2.0 ** -5, 2.0 ** -6], 2, SEED)
    assert result.slope == pytest.approx(1.0, abs=0.1)
    assert result.reference_dt == 2.0 ** -12
    assert [row.dt for row in result.rows] == [2.0 ** -4, 2.0 ** -5, 2.0 ** -6]


def test_convergence_needs_three_levels(example2):
    with pytest.raises(EstimatorError, match="convergence study needs at least three step sizes"):
        convergence_study(example2, None, "state", [2.0 ** -4], 10, SEED)
    with pytest.raises(EstimatorError, match="unknown convergence quantity"):
        convergence_study(example2, None, "gamma", [2.0 ** -4, 2.0 ** -5, 2.0 ** -6], 10, SEED)


def test_example2_state_has_strong_order_one_half(example2):
    levels = [2.0 ** -k for k in range(4, 8)]
    result = convergence_study(example2, None, "state", levels, 400, SEED)
    assert 0.35 <= result.slope <= 0.65
    errors = [row.error for row in result.rows]
    assert errors[-1] < errors[0]


def test_jump_derivative_has_strong_order_one_half(example2):
    levels = [2.0 ** -k for k in range(4, 8)]
    result = convergence_study(example2, None, "malliavin_derivative", levels, 400, SEED,
                               r_time=0.5, z=0.0)
    assert result.quantity == "malliavin_derivative"
    assert 0.35 <= result.slope <= 0.65


def test_variation_approaches_its_stochastic_exponential(example2):
    levels = [2.0 ** -4, 2.0 ** -5, 2.0 ** -6]
    result = convergence_study(example2, None, "variation", levels, 400, SEED)
    errors = [row.error for row in result.rows]
    assert errors[0] > errors[1] > errors[2] > 0.0
    assert 0.3 <= result.slope <= 0.8


def test_european_delta_error_shrinks_with_the_step(example2):
    levels = [2.0 ** -3, 2.0 ** -4, 2.0 ** -5]
    result = convergence_study(example2, None, "delta_euro", levels, 2000, SEED)
    errors = [row.error for row in result.rows]
    assert [row.quantity for row in result.rows] == ["delta_euro"] * 3
    assert errors[-1] < errors[0]
    assert math.isfinite(result.slope)

"""
Delta estimators and the studies built on them.

Three estimators share one noise layout (per-path counter-based streams,
chunked in path order), so any two of them run on the same seed see the same
Brownian increments and jump events:

- delta_malliavin:      E[Phi * delta(omega)]
- delta_flow_pathwise:  E[Phi'(G) * dG/dx0]
- delta_fd_central:     (E Phi(x0 + h) - E Phi(x0 - h)) / 2h on common random numbers

Sample moments are computed per chunk and merged in chunk order, so an
estimate does not depend on the worker count.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import stats

from . import config
from .model import MeanFieldError, MeanFunction, ModelSpec, solve_mean_ode, uniform_grid
from .path_worker import path_chunks, run_chunks
from .payoffs import Payoff
from .simulate import (euler_path, malliavin_derivative, sample_noise, simulate_paths,
                       stochastic_exponential)
from .weights import WeightField, skorokhod_integral

logger = logging.getLogger(__name__)

METHODS = ("malliavin", "flow_pathwise", "fd_central", "fd_forward", "fd_independent")
FD_MODES = ("central", "forward")
QUANTITIES = ("state", "malliavin_derivative", "delta_euro", "delta_barrier", "variation")


class EstimatorError(MeanFieldError):
    """Raised when an estimator or study cannot run as requested."""


# ----------------------------
# Moments
# ----------------------------

@dataclass(frozen=True)
class Moments:
    """
    Count, mean and sum of squared deviations of a sample.

    >>> a = Moments.of(np.array([1.0, 2.0]))
    >>> b = Moments.of(np.array([3.0, 4.0, 5.0]))
    >>> m = a.merge(b)
    >>> m.n, m.mean, m.variance
    (5, 3.0, 2.5)
    """
    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @classmethod
    def of(cls, samples) -> "Moments":
        samples = np.asarray(samples, dtype=float).ravel()
        if samples.size == 0:
            return cls()
        mean = float(samples.mean())
        return cls(int(samples.size), mean, float(np.sum((samples - mean) ** 2)))

    def merge(self, other: "Moments") -> "Moments":
        """Pairwise (Chan et al.) combination; exact up to rounding."""
        if other.n == 0:
            return self
        if self.n == 0:
            return other
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * other.n / n
        m2 = self.m2 + other.m2 + delta * delta * self.n * other.n / n
        return Moments(n, mean, m2)

    @property
    def variance(self) -> float:
        return self.m2 / (self.n - 1) if self.n > 1 else 0.0


def merge_all(parts: Sequence[Moments]) -> Moments:
    total = Moments()
    for part in parts:
        total = total.merge(part)
    return total


# ----------------------------
# Estimates
# ----------------------------

@dataclass(frozen=True)
class DeltaEstimate:
    """
    One Delta estimate with its sampling error.

    runtime_ms does not take part in equality: two runs with the same seed
    and configuration compare equal.
    """
    method: str
    payoff: Payoff
    mean: float
    stderr: float
    variance: float
    n_paths: int
    dt: float
    seed: int
    x0: float
    nu: float
    guard_hits: int = 0
    h: Optional[float] = None
    notes: tuple = ()
    runtime_ms: int = field(default=0, compare=False)

    @property
    def priced(self) -> str:
        """Label of the function this estimate differentiates."""
        return self.payoff.label(weighted=self.method == "malliavin")

    def config_key(self) -> tuple:
        p = self.payoff
        return (p.label(), p.strike, p.barrier, self.n_paths, self.dt, self.seed)


def _estimate(method, payoff, moments: Moments, spec, grid, seed, started, guard_hits=0,
              h=None, notes=()) -> DeltaEstimate:
    variance = moments.variance
    est = DeltaEstimate(
        method=method, payoff=payoff, mean=moments.mean,
        stderr=math.sqrt(variance / moments.n), variance=variance,
        n_paths=moments.n, dt=float(grid[1] - grid[0]), seed=seed,
        x0=spec.x0, nu=spec.jump_intensity, guard_hits=guard_hits, h=h, notes=tuple(notes),
        runtime_ms=int(round((time.perf_counter() - started) * 1000)),
    )
    logger.info("%s delta of %s: %.6g +/- %.2g (%d paths, %d guard hits)",
                method, payoff.label(), est.mean, est.stderr, est.n_paths, guard_hits)
    return est


def _check_paths(n_paths: int) -> None:
    if n_paths < 2:
        raise EstimatorError(f"cannot estimate a variance from {n_paths} path(s)")


def _mean_on(spec: ModelSpec, mf: Optional[MeanFunction], grid) -> MeanFunction:
    if mf is None:
        return solve_mean_ode(spec, grid)
    return mf


def delta_malliavin(spec: ModelSpec, mf: Optional[MeanFunction], payoff: Payoff, n_paths: int,
                    grid, seed: int, compensated: bool = True, evaluator: str = "exact",
                    threads: int = None) -> DeltaEstimate:
    """
    Delta = E[Phi * delta(omega)] with the weight of `payoff`.

    The digital is priced through its ramp (Payoff.weighted), the function the
    weight is built for.

    Raises:
        EstimatorError: nu = 0, or fewer than two paths.
    """
    _check_paths(n_paths)
    if spec.total_jump_mass <= 0.0:
        raise EstimatorError("Malliavin weight undefined for jump-free model")
    grid = np.asarray(grid, dtype=float)
    mf = _mean_on(spec, mf, grid)
    started = time.perf_counter()

    def job(start, stop):
        noise = sample_noise(spec, grid, seed, np.arange(start, stop))
        bundle = simulate_paths(spec, mf, noise, compensated)
        weight = WeightField(bundle, payoff)
        result = skorokhod_integral(weight, bundle, evaluator)
        samples = payoff.weighted(weight.G) * result.value
        return Moments.of(samples), int(result.guard_hits.sum())

    parts = run_chunks(job, path_chunks(n_paths, len(grid) - 1), threads)
    hits = sum(p[1] for p in parts)
    if hits:
        logger.info("%d jump terms hit the weight guard", hits)
    return _estimate("malliavin", payoff, merge_all([p[0] for p in parts]), spec, grid, seed,
                     started, guard_hits=hits)


def delta_flow_pathwise(spec: ModelSpec, mf: Optional[MeanFunction], payoff: Payoff, n_paths: int,
                        grid, seed: int, compensated: bool = True,
                        threads: int = None) -> DeltaEstimate:
    """
    Delta = E[Phi'(G) dG/dx0], dG/dx0 read from the flow at G's grid index.

    Raises:
        EstimatorError: "pathwise method invalid for discontinuous payoff" for the digital.
    """
    if payoff.discontinuous:
        raise EstimatorError("pathwise method invalid for discontinuous payoff")
    _check_paths(n_paths)
    grid = np.asarray(grid, dtype=float)
    mf = _mean_on(spec, mf, grid)
    started = time.perf_counter()

    def job(start, stop):
        noise = sample_noise(spec, grid, seed, np.arange(start, stop))
        bundle = simulate_paths(spec, mf, noise, compensated)
        G, idx = payoff.driver(bundle.X)
        flow = bundle.flow[np.arange(bundle.n_paths), idx]
        return Moments.of(payoff.derivative(G) * flow)

    parts = run_chunks(job, path_chunks(n_paths, len(grid) - 1), threads)
    return _estimate("flow_pathwise", payoff, merge_all(parts), spec, grid, seed, started)


def _bumped_legs(spec: ModelSpec, grid, h: float, mode: str, mf_pair):
    up = spec.with_x0(spec.x0 + h)
    down = spec.with_x0(spec.x0 - h) if mode == "central" else spec
    if mf_pair is None:
        mf_pair = (solve_mean_ode(up, grid), solve_mean_ode(down, grid))
    return (up, mf_pair[0]), (down, mf_pair[1])


def delta_fd_central(spec: ModelSpec, mf_pair, payoff: Payoff, n_paths: int, grid, seed: int,
                     h: float = config.DEFAULT_H_FD, mode: str = "central",
                     independent: bool = False, compensated: bool = True,
                     threads: int = None) -> DeltaEstimate:
    """
    Finite-difference Delta on common random numbers.

    Both legs replay the same per-path noise; each leg uses the mean function
    re-solved at its own initial value.

    Args:
        mf_pair: (mean at x0 + h, mean at x0 - h), or at (x0 + h, x0) for the
            forward mode; None re-solves both.
        h: bump of x0.
        mode: "central" (default) or "forward".
        independent: draw the second leg from disjoint streams (no common
            random numbers); only meant to show what the coupling buys.

    Raises:
        EstimatorError: h <= 0, a bumped x0 of zero, fewer than two paths.
    """
    if mode not in FD_MODES:
        raise EstimatorError(f"unknown finite-difference mode '{mode}'")
    if not h > 0:
        raise EstimatorError(f"finite-difference bump must be positive, got {h}")
    lo = spec.x0 - h if mode == "central" else spec.x0
    if spec.x0 + h == 0.0 or lo == 0.0:
        raise EstimatorError("bumped initial value hits zero")
    _check_paths(n_paths)
    grid = np.asarray(grid, dtype=float)
    notes = []
    if h < config.FD_WARN_BELOW:
        notes.append(f"amplified noise: h = {h:g} below {config.FD_WARN_BELOW:g}")
        logger.warning("finite-difference bump %g is below %g; expect amplified noise",
                       h, config.FD_WARN_BELOW)
    up, down = _bumped_legs(spec, grid, h, mode, mf_pair)
    span = 2.0 * h if mode == "central" else h
    offset = n_paths if independent else 0
    started = time.perf_counter()

    def job(start, stop):
        noise = sample_noise(spec, grid, seed, np.arange(start, stop))
        other = sample_noise(spec, grid, seed, np.arange(start, stop) + offset) if offset else noise
        x_up = euler_path(up[0], up[1], grid, noise, compensated).X
        x_down = euler_path(down[0], down[1], grid, other, compensated).X
        return Moments.of((payoff.on_paths(x_up) - payoff.on_paths(x_down)) / span)

    method = "fd_independent" if independent else ("fd_central" if mode == "central" else "fd_forward")
    parts = run_chunks(job, path_chunks(n_paths, len(grid) - 1), threads)
    return _estimate(method, payoff, merge_all(parts), spec, grid, seed, started, h=h, notes=notes)


def fd_independent(spec: ModelSpec, payoff: Payoff, n_paths: int, grid, seed: int,
                   h: float = config.DEFAULT_H_FD, **kwargs) -> DeltaEstimate:
    """Central finite differences with independent noise on the two legs."""
    return delta_fd_central(spec, None, payoff, n_paths, grid, seed, h, independent=True, **kwargs)


# ----------------------------
# Variance comparison
# ----------------------------

class ComparisonRow(NamedTuple):
    method: str
    payoff: str
    mean: float
    variance: float
    stderr: float
    runtime_ms: int
    variance_ratio: float
    stderr_ratio: float
    runtime_ratio: float


def _ratio(a: float, b: float) -> float:
    return a / b if b != 0 else math.nan


def variance_report(estimates: Sequence[DeltaEstimate]) -> list:
    """
    Per-method variance, stderr and runtime, with ratios against the first estimate.

    Raises:
        EstimatorError: fewer than two estimates, or estimates that differ in
            payoff, path count, step size or seed.
    """
    if len(estimates) < 2:
        raise EstimatorError("variance report needs at least two estimates")
    base = estimates[0]
    for est in estimates[1:]:
        if est.config_key() != base.config_key():
            raise EstimatorError(
                f"refusing to compare {est.method} {est.config_key()} with "
                f"{base.method} {base.config_key()}: configurations differ")
    return [ComparisonRow(e.method, e.priced, e.mean, e.variance, e.stderr, e.runtime_ms,
                          _ratio(e.variance, base.variance), _ratio(e.stderr, base.stderr),
                          _ratio(e.runtime_ms, base.runtime_ms))
            for e in estimates]


# ----------------------------
# Convergence
# ----------------------------

class ConvergenceRow(NamedTuple):
    quantity: str
    dt: float
    error: float
    n_paths: int


@dataclass(frozen=True)
class ConvergenceResult:
    quantity: str
    rows: list
    slope: float
    slope_stderr: float
    reference_dt: float


def _sub_mean(mf: MeanFunction, factor: int) -> MeanFunction:
    return MeanFunction(grid=mf.grid[::factor], values=mf.values[::factor],
                        integral_b=mf.integral_b[::factor], dfdx=mf.dfdx[::factor])


def _default_payoff(quantity: str, mf: MeanFunction, spec: ModelSpec) -> Payoff:
    strike = float(mf.values[-1])
    if quantity == "delta_barrier":
        return Payoff("up_and_out_call", strike, config.DEFAULT_BARRIER_FACTOR * spec.x0)
    return Payoff("european_call", strike)


def convergence_study(spec: ModelSpec, mf: Optional[MeanFunction], quantity: str, dt_list,
                      n_paths: int, seed: int, payoff: Payoff = None, r_time: float = None,
                      z: float = None, compensated: bool = True, evaluator: str = "exact",
                      threads: int = None) -> ConvergenceResult:
    """
    Error of the Euler quantity against a reference run at min(dt_list) / 64.

    Every level replays the reference noise: increments are summed over
    blocks and jumps keep their times (step // factor). `state`,
    `malliavin_derivative` and `variation` report RMS pathwise errors at T
    (`variation` against the closed-form stochastic exponential on the
    level's own noise); the delta quantities report |Delta_dt - Delta_ref|
    for the Malliavin estimator.

    Args:
        mf: mean function on the reference grid, or None to solve it there.
        payoff: payoff of the delta quantities (default: at-the-mean call,
            up-and-out with B = 1.5 x0 for delta_barrier).
        r_time, z: jump time and mark of the malliavin_derivative quantity
            (default T/2 and the mean mark).

    Returns:
        ConvergenceResult: one row per level (coarsest first) and the
        least-squares slope of log(error) against log(dt).

    Raises:
        EstimatorError: fewer than three levels, a level not on the reference
            grid, or a zero error that leaves the slope undefined.
    """
    if quantity not in QUANTITIES:
        raise EstimatorError(f"unknown convergence quantity '{quantity}'")
    levels = sorted({float(dt) for dt in dt_list}, reverse=True)
    if len(levels) < 3:
        raise EstimatorError("convergence study needs at least three step sizes")
    dt_ref = levels[-1] / 2 ** 6
    ref_grid = uniform_grid(spec.horizon, dt_ref)
    factors = []
    for dt in levels:
        factor = int(round(dt / dt_ref))
        if abs(factor * dt_ref - dt) > 1e-12 * dt:
            raise EstimatorError(f"dt = {dt} is not a multiple of the reference step {dt_ref}")
        uniform_grid(spec.horizon, dt)
        factors.append(factor)
    if mf is None or len(mf.grid) != len(ref_grid):
        mf = solve_mean_ode(spec, ref_grid)

    delta_kind = quantity.startswith("delta")
    if delta_kind:
        _check_paths(n_paths)
        if spec.total_jump_mass <= 0.0:
            raise EstimatorError("Malliavin weight undefined for jump-free model")
        payoff = payoff or _default_payoff(quantity, mf, spec)
    r_time = spec.horizon / 2 if r_time is None else r_time
    z = spec.jump_size_law.mean() if z is None else z
    means = [_sub_mean(mf, f) for f in factors] + [mf]

    def level_value(noise, mean, factor):
        bundle = simulate_paths(spec, mean, noise.coarsen(factor), compensated)
        if quantity == "state":
            return bundle.X[:, -1]
        if quantity == "variation":
            return bundle.Y[:, -1]
        if quantity == "malliavin_derivative":
            r_index = int(round(r_time / (factor * dt_ref)))
            return malliavin_derivative(bundle, r_index, z)[:, -1]
        weight = WeightField(bundle, payoff)
        return payoff.weighted(weight.G) * skorokhod_integral(weight, bundle, evaluator).value

    def job(start, stop):
        noise = sample_noise(spec, ref_grid, seed, np.arange(start, stop))
        if quantity == "variation":
            out = []
            for mean, factor in zip(means[:-1], factors):
                coarse = simulate_paths(spec, mean, noise.coarsen(factor), compensated)
                out.append(Moments.of((coarse.Y[:, -1] - stochastic_exponential(coarse)[:, -1]) ** 2))
            return out
        reference = level_value(noise, mf, 1)
        out = []
        for mean, factor in zip(means[:-1], factors):
            value = level_value(noise, mean, factor)
            out.append(Moments.of(value if delta_kind else (value - reference) ** 2))
        if delta_kind:
            out.append(Moments.of(reference))
        return out

    parts = run_chunks(job, path_chunks(n_paths, len(ref_grid) - 1), threads)
    merged = [merge_all([p[i] for p in parts]) for i in range(len(parts[0]))]
    if delta_kind:
        errors = [abs(m.mean - merged[-1].mean) for m in merged[:-1]]
    else:
        errors = [math.sqrt(m.mean) for m in merged]

    rows = [ConvergenceRow(quantity, dt, err, n_paths) for dt, err in zip(levels, errors)]
    if min(errors) <= 0.0:
        raise EstimatorError(f"zero error at some level of {quantity}; slope undefined")
    fit = stats.linregress(np.log(levels), np.log(errors))
    logger.info("%s convergence slope %.3f over %d levels", quantity, fit.slope, len(levels))
    return ConvergenceResult(quantity, rows, float(fit.slope), float(fit.stderr), dt_ref)

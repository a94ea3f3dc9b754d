"""
Euler simulation of the state, its first variation and the auxiliary process.

All paths of a batch share one grid and are advanced together: every process
is a 2-D array of shape (n_paths, n_steps + 1). The noise of a batch (Brownian
increments and jump events) lives in a NoiseBatch so the same draws can be
replayed for a bumped initial value, coarsened onto a sparser grid, or
replayed with a single jump removed.

Jump events are applied at the left endpoint of the step that owns them,
with coefficients frozen at t_k. The compensator of N~ is subtracted unless
the batch is simulated with compensated=False.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional, Union

import numpy as np

from . import config
from .model import MeanFieldError, MeanFunction, ModelSpec
from .rng import BROWNIAN, MARKS, POISSON_COUNT, RngConfig, path_generator

logger = logging.getLogger(__name__)


class SimulationError(MeanFieldError):
    """Raised when a simulated path leaves the assumptions of the scheme."""

    def __init__(self, message: str, step: Optional[int] = None, path: Optional[int] = None):
        detail = message
        if step is not None:
            detail += f" at step {step}"
        if path is not None:
            detail += f" (path {path})"
        super().__init__(detail)
        self.step = step
        self.path = path


@dataclass(frozen=True)
class JumpEvent:
    time: float
    mark: float
    step_index: int


# ----------------------------
# Noise
# ----------------------------

@dataclass(frozen=True)
class NoiseBatch:
    """
    Brownian increments and jump events for a batch of paths.

    Attributes:
        grid: time grid, n_steps + 1 points.
        dW: Brownian increments, shape (n_paths, n_steps).
        event_row / event_step / event_mark: one entry per jump, sorted by (row, step).
        path_index: global index of each row (provenance only).
    """
    grid: np.ndarray
    dW: np.ndarray
    event_row: np.ndarray
    event_step: np.ndarray
    event_mark: np.ndarray
    path_index: np.ndarray

    @classmethod
    def build(cls, grid, dW, events: Iterable = (), path_index=None) -> "NoiseBatch":
        """
        Assemble a batch from explicit draws.

        Args:
            grid: time grid.
            dW: increments, shape (n_paths, n_steps) or (n_steps,) for one path.
            events: iterable of (row, step, mark) triples, in any order.
            path_index: global indices; defaults to 0..n_paths-1.
        """
        grid = np.asarray(grid, dtype=float)
        dW = np.atleast_2d(np.asarray(dW, dtype=float))
        if dW.shape[1] != len(grid) - 1:
            raise ValueError(f"dW has {dW.shape[1]} steps, grid has {len(grid) - 1}")
        triples = list(events)
        rows = np.array([int(e[0]) for e in triples], dtype=np.int64)
        steps = np.array([int(e[1]) for e in triples], dtype=np.int64)
        marks = np.array([float(e[2]) for e in triples], dtype=float)
        if len(triples) and (rows.min() < 0 or rows.max() >= dW.shape[0]
                             or steps.min() < 0 or steps.max() >= dW.shape[1]):
            raise ValueError("jump event outside the batch or the grid")
        order = np.lexsort((steps, rows))
        if path_index is None:
            path_index = np.arange(dW.shape[0])
        return cls(grid, dW, rows[order], steps[order], marks[order],
                   np.asarray(path_index, dtype=np.int64))

    @classmethod
    def quiet(cls, grid, n_paths: int = 1) -> "NoiseBatch":
        """Batch with no Brownian motion and no jumps."""
        grid = np.asarray(grid, dtype=float)
        return cls.build(grid, np.zeros((n_paths, len(grid) - 1)))

    @property
    def n_paths(self) -> int:
        return self.dW.shape[0]

    @property
    def n_steps(self) -> int:
        return self.dW.shape[1]

    @property
    def n_events(self) -> int:
        return len(self.event_row)

    def counts(self) -> np.ndarray:
        """Number of events per (row, step)."""
        out = np.zeros(self.dW.shape, dtype=np.int64)
        np.add.at(out, (self.event_row, self.event_step), 1)
        return out

    def events_for(self, row: int) -> list:
        sel = self.event_row == row
        return [JumpEvent(float(self.grid[k]), float(z), int(k))
                for k, z in zip(self.event_step[sel], self.event_mark[sel])]

    def select(self, rows) -> "NoiseBatch":
        """Sub-batch holding `rows`, in the given order."""
        rows = np.asarray(rows, dtype=np.int64)
        position = np.full(self.n_paths, -1, dtype=np.int64)
        position[rows] = np.arange(len(rows))
        keep = position[self.event_row] >= 0
        new_rows = position[self.event_row[keep]]
        steps = self.event_step[keep]
        order = np.lexsort((steps, new_rows))
        return NoiseBatch(self.grid, self.dW[rows], new_rows[order], steps[order],
                          self.event_mark[keep][order], self.path_index[rows])

    def coarsen(self, factor: int) -> "NoiseBatch":
        """
        The same noise seen on every `factor`-th grid point.

        Increments are summed over each block; an event at fine step s moves to
        coarse step s // factor.
        """
        if factor < 1 or self.n_steps % factor:
            raise ValueError(f"cannot coarsen {self.n_steps} steps by {factor}")
        if factor == 1:
            return self
        dW = self.dW.reshape(self.n_paths, self.n_steps // factor, factor).sum(axis=2)
        return NoiseBatch(self.grid[::factor], dW, self.event_row, self.event_step // factor,
                          self.event_mark, self.path_index)

    def leave_one_out(self) -> "NoiseBatch":
        """
        One row per event: the event's path with that event removed.

        Row j of the result replays the Brownian increments and every other
        jump of the path owning event j.
        """
        rows, steps, marks = [], [], []
        starts = np.searchsorted(self.event_row, np.arange(self.n_paths + 1))
        for j in range(self.n_events):
            owner = self.event_row[j]
            for other in range(starts[owner], starts[owner + 1]):
                if other != j:
                    rows.append(j)
                    steps.append(self.event_step[other])
                    marks.append(self.event_mark[other])
        return NoiseBatch(self.grid, self.dW[self.event_row],
                          np.asarray(rows, dtype=np.int64), np.asarray(steps, dtype=np.int64),
                          np.asarray(marks, dtype=float), self.path_index[self.event_row])


def _path_draws(spec: ModelSpec, dt: np.ndarray, seed: int, path_index: int):
    """Brownian increments and (steps, marks) of one path from its own streams."""
    dW = np.sqrt(dt) * path_generator(seed, path_index, BROWNIAN).standard_normal(len(dt))
    if spec.jump_intensity == 0.0:
        return dW, np.empty(0, dtype=np.int64), np.empty(0)
    counts = path_generator(seed, path_index, POISSON_COUNT).poisson(spec.jump_intensity * dt)
    total = int(counts.sum())
    if total == 0:
        return dW, np.empty(0, dtype=np.int64), np.empty(0)
    steps = np.repeat(np.arange(len(dt)), counts)
    marks = spec.jump_size_law.sample(path_generator(seed, path_index, MARKS), total)
    return dW, steps, marks


def sample_noise(spec: ModelSpec, grid, seed: int, path_indices) -> NoiseBatch:
    """
    Draw the noise of the given global paths.

    Each path reads only its own counter-based streams, so a path's noise is
    the same whatever batch it is drawn in.
    """
    grid = np.asarray(grid, dtype=float)
    dt = np.diff(grid)
    path_indices = np.asarray(path_indices, dtype=np.int64)
    dW = np.empty((len(path_indices), len(dt)))
    rows, steps, marks = [], [], []
    for row, index in enumerate(path_indices):
        dW[row], s, z = _path_draws(spec, dt, seed, int(index))
        if len(s):
            rows.append(np.full(len(s), row, dtype=np.int64))
            steps.append(s)
            marks.append(z)
    if rows:
        return NoiseBatch(grid, dW, np.concatenate(rows), np.concatenate(steps),
                          np.concatenate(marks), path_indices)
    empty = np.empty(0, dtype=np.int64)
    return NoiseBatch(grid, dW, empty, empty, np.empty(0), path_indices)


def sample_jumps(spec: ModelSpec, grid, rng: RngConfig) -> list:
    """Jump events of one path, time-ordered, each placed at its step's left endpoint."""
    return sample_noise(spec, grid, rng.master_seed, [rng.path_index]).events_for(0)


# ----------------------------
# Deterministic per-step coefficients
# ----------------------------

def mark_nodes(spec: ModelSpec):
    """Quadrature for E_z over the jump-size law; one node when nothing depends on z."""
    if spec.mark_dependent:
        return spec.jump_size_law.quadrature()
    return np.array([spec.jump_size_law.mean()]), np.array([1.0])


def _on_steps(fn, *args) -> np.ndarray:
    shape = np.broadcast_shapes(*(np.shape(a) for a in args))
    return np.broadcast_to(np.asarray(fn(*args), dtype=float), shape).copy()


@dataclass(frozen=True)
class StepCoefficients:
    """
    Everything the recursions need at t_k that does not depend on the path.

    comp_* hold nu * E_z[...] and are zero for an uncompensated scheme.
    """
    t: np.ndarray
    dt: np.ndarray
    A: np.ndarray
    B: np.ndarray
    sigma0: np.ndarray
    eta: np.ndarray
    alpha_scale: np.ndarray   # d_rho b * d_x rho; alpha_k = alpha_scale_k * X_k
    beta: np.ndarray
    deta: np.ndarray          # d_x eta
    comp_F: np.ndarray
    comp_lambda0: np.ndarray
    comp_M_star: np.ndarray
    comp_M_gamma: np.ndarray


def step_coefficients(spec: ModelSpec, mf: MeanFunction, compensated: bool = True) -> StepCoefficients:
    t = mf.grid[:-1]
    f = mf.values[:-1]
    g = mf.dfdx[:-1]
    dt = np.diff(mf.grid)
    pi = _on_steps(spec.psi, f)
    eta = _on_steps(spec.xi, f)
    dpi = _on_steps(spec.dpsi, f) * g
    deta = _on_steps(spec.dxi, f) * g

    A = _on_steps(spec.b, t, f)
    B = _on_steps(spec.diffusion_linear, t)
    sigma0 = _on_steps(spec.sigma0, t, pi)
    beta = _on_steps(spec.dsigma0_dpi, t, pi) * dpi
    alpha_scale = _on_steps(spec.db_drho, t, f) * g

    nu = spec.jump_intensity if compensated else 0.0
    z, w = mark_nodes(spec)
    M = spec.F(t[:, None], z[None, :])
    lam0 = spec.lambda0(t[:, None], z[None, :], eta[:, None])
    gamma = spec.dlambda0_deta(t[:, None], z[None, :], eta[:, None]) * deta[:, None]
    if nu > 0.0 and np.any(gamma != 0.0) and np.any(1.0 + M <= 0.0):
        raise SimulationError("variation process lost positivity")
    with np.errstate(divide="ignore", invalid="ignore"):
        m_star = np.where(gamma != 0.0, gamma / (1.0 + M), 0.0)

    return StepCoefficients(
        t=t, dt=dt, A=A, B=B, sigma0=sigma0, eta=eta, alpha_scale=alpha_scale,
        beta=beta, deta=deta,
        comp_F=nu * (M @ w), comp_lambda0=nu * (lam0 @ w),
        comp_M_star=nu * (m_star @ w), comp_M_gamma=nu * ((M * m_star) @ w),
    )


# ----------------------------
# Path bundle
# ----------------------------

@dataclass
class PathBundle:
    """
    Simulated processes of a batch, all shaped (n_paths, n_steps + 1).

    X is filled by euler_path, Y by variation_path, u and flow by
    auxiliary_path. Indexing with an int gives the one-path bundle of that row.
    """
    spec: ModelSpec
    mean: MeanFunction
    noise: NoiseBatch
    compensated: bool = True
    X: Optional[np.ndarray] = None
    Y: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None
    flow: Optional[np.ndarray] = None
    _sums: Optional[tuple] = field(default=None, repr=False)

    @property
    def grid(self) -> np.ndarray:
        return self.noise.grid

    @property
    def dW(self) -> np.ndarray:
        return self.noise.dW

    @property
    def n_paths(self) -> int:
        return self.noise.n_paths

    @property
    def n_steps(self) -> int:
        return self.noise.n_steps

    @property
    def jumps(self) -> list:
        """Events of every row, one list per path."""
        return [self.noise.events_for(r) for r in range(self.n_paths)]

    def __len__(self):
        return self.n_paths

    def __getitem__(self, row: int) -> "PathBundle":
        rows = [row]
        pick = (lambda a: None if a is None else a[rows])
        return PathBundle(self.spec, self.mean, self.noise.select(rows), self.compensated,
                          pick(self.X), pick(self.Y), pick(self.u), pick(self.flow))

    @cached_property
    def coefficients(self) -> StepCoefficients:
        return step_coefficients(self.spec, self.mean, self.compensated)

    @cached_property
    def extrema(self):
        return path_extrema(self.X)

    @property
    def run_max(self):
        return self.extrema[0]

    @property
    def argmax_index(self):
        return self.extrema[1]

    @property
    def run_min(self):
        return self.extrema[2]

    @property
    def argmin_index(self):
        return self.extrema[3]

    def event_sums(self):
        """
        Dense per-(row, step) sums over that step's events:
        (sum F, sum lambda0, sum gamma / (1 + F)).

        Raises:
            SimulationError: if 1 + F <= 0 at any event.
        """
        if self._sums is None:
            self._sums = _event_sums(self.spec, self.coefficients, self.noise)
        return self._sums


def _event_sums(spec: ModelSpec, coef: StepCoefficients, noise: NoiseBatch):
    shape = noise.dW.shape
    S1, S0, G = np.zeros(shape), np.zeros(shape), np.zeros(shape)
    if noise.n_events == 0:
        return S1, S0, G
    rows, steps, z = noise.event_row, noise.event_step, noise.event_mark
    t = coef.t[steps]
    M = spec.F(t, z)
    bad = np.flatnonzero(1.0 + M <= 0.0)
    if len(bad):
        j = bad[0]
        raise SimulationError("variation process lost positivity",
                              step=int(steps[j]), path=int(noise.path_index[rows[j]]))
    eta = coef.eta[steps]
    gamma = spec.dlambda0_deta(t, z, eta) * coef.deta[steps]
    np.add.at(S1, (rows, steps), M)
    np.add.at(S0, (rows, steps), spec.lambda0(t, z, eta))
    np.add.at(G, (rows, steps), gamma / (1.0 + M))
    return S1, S0, G


def _check_mean(mf: MeanFunction, grid) -> None:
    grid = np.asarray(grid, dtype=float)
    if len(grid) != len(mf.grid) or not np.allclose(grid, mf.grid, rtol=0.0, atol=1e-12):
        raise ValueError("mean function was solved on a different grid")


def _as_noise(spec: ModelSpec, grid, rng) -> NoiseBatch:
    if isinstance(rng, NoiseBatch):
        return rng
    if isinstance(rng, RngConfig):
        return sample_noise(spec, grid, rng.master_seed, [rng.path_index])
    raise TypeError(f"expected RngConfig or NoiseBatch, got {type(rng).__name__}")


def _first_bad_step(ok: np.ndarray):
    cols = np.flatnonzero(~ok.all(axis=0))
    row = int(np.flatnonzero(~ok[:, cols[0]])[0])
    return int(cols[0]), row


# ----------------------------
# Recursions
# ----------------------------

def euler_path(spec: ModelSpec, mf: MeanFunction, grid, rng: Union[RngConfig, NoiseBatch],
               compensated: bool = True) -> PathBundle:
    """
    Euler scheme for X on the grid.

        X_{k+1} = X_k + b X_k dt + (C X_k + sigma0) dW
                  + sum_j (F_j X_k + lambda0_j) - dt nu E_z[F X_k + lambda0]

    Args:
        spec: the model.
        mf: mean function solved on `grid`.
        grid: time grid.
        rng: an RngConfig (one path) or a NoiseBatch (many paths).
        compensated: subtract the compensator of the jump measure.

    Returns:
        PathBundle: with X filled.

    Raises:
        SimulationError: "path diverged" with the first non-finite step.
    """
    _check_mean(mf, grid)
    noise = _as_noise(spec, grid, rng)
    bundle = PathBundle(spec, mf, noise, compensated)
    c = bundle.coefficients
    S1, S0, _ = bundle.event_sums()

    X = np.empty((noise.n_paths, noise.n_steps + 1))
    X[:, 0] = spec.x0
    dW = noise.dW
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(noise.n_steps):
            x = X[:, k]
            X[:, k + 1] = (x + c.A[k] * x * c.dt[k] + (c.B[k] * x + c.sigma0[k]) * dW[:, k]
                           + S1[:, k] * x + S0[:, k]
                           - c.dt[k] * (c.comp_F[k] * x + c.comp_lambda0[k]))
    ok = np.isfinite(X)
    if not ok.all():
        step, row = _first_bad_step(ok)
        raise SimulationError("path diverged", step=step, path=int(noise.path_index[row]))
    bundle.X = X
    return bundle


def variation_path(bundle: PathBundle) -> PathBundle:
    """
    First-variation process Y on the bundle's noise, Y_0 = 1.

        Y_{k+1} = Y_k (1 + A dt + B dW + sum_j M_j - dt nu E_z[M])

    with A = b(t, f), B = C, M = F.

    Raises:
        SimulationError: "variation process lost positivity" if 1 + M <= 0 at an event.
    """
    c = bundle.coefficients
    S1, _, _ = bundle.event_sums()
    noise = bundle.noise
    multiplier = 1.0 + c.A * c.dt + c.B * noise.dW + S1 - c.dt * c.comp_F
    Y = np.empty((noise.n_paths, noise.n_steps + 1))
    Y[:, 0] = 1.0
    np.cumprod(multiplier, axis=1, out=Y[:, 1:])
    bundle.Y = Y
    return bundle


def auxiliary_path(bundle: PathBundle) -> PathBundle:
    """
    Auxiliary process u and the flow dX/dx0 = Y u.

        u_{k+1} = u_k + (A* dt + beta dW + sum_j M*_j - dt nu E_z[M*]) / Y_k
        A* = alpha - beta B - nu E_z[M gamma / (1 + M)],   M* = gamma / (1 + M)

    where alpha = d_rho b X d_x f, beta = d_pi sigma0 d_x pi, gamma = d_eta lambda0 d_x eta.

    Raises:
        SimulationError: "variation process numerically singular" when |Y_k| < 1e-14.
    """
    if bundle.X is None or bundle.Y is None:
        raise ValueError("auxiliary_path needs X and Y")
    c = bundle.coefficients
    _, _, G = bundle.event_sums()
    noise = bundle.noise
    Y = bundle.Y
    small = np.abs(Y[:, :-1]) < config.Y_SINGULAR_GUARD
    if small.any():
        step, row = _first_bad_step(~small)
        raise SimulationError("variation process numerically singular",
                              step=step, path=int(noise.path_index[row]))

    a_star = (c.alpha_scale * bundle.X[:, :-1] - c.beta * c.B - c.comp_M_gamma) * c.dt
    du = (a_star + c.beta * noise.dW + G - c.dt * c.comp_M_star) / Y[:, :-1]
    u = np.empty_like(Y)
    u[:, 0] = 1.0
    np.cumsum(du, axis=1, out=u[:, 1:])
    u[:, 1:] += 1.0
    bundle.u = u
    bundle.flow = Y * u
    return bundle


def simulate_paths(spec: ModelSpec, mf: MeanFunction, noise: NoiseBatch,
                   compensated: bool = True) -> PathBundle:
    """X, Y, u and the flow on one batch of noise."""
    bundle = euler_path(spec, mf, noise.grid, noise, compensated)
    variation_path(bundle)
    auxiliary_path(bundle)
    logger.debug("simulated %d paths x %d steps (%d jumps)",
                 noise.n_paths, noise.n_steps, noise.n_events)
    return bundle


# ----------------------------
# Path functionals
# ----------------------------

def malliavin_derivative(bundle: PathBundle, r_index: int, z) -> np.ndarray:
    """
    D_{r,z} X_t = Y_t / Y_r * (F_{r,z} X_r + lambda0(r, z, eta_r)) for t >= r, 0 before r.

    Args:
        bundle: bundle with X and Y.
        r_index: grid index of the jump time.
        z: mark, scalar or one per path.

    Returns:
        np.ndarray: shape (n_paths, n_steps + 1).
    """
    if not 0 <= r_index <= bundle.n_steps:
        raise IndexError(f"r_index {r_index} outside the grid")
    Y_r = bundle.Y[:, r_index]
    if np.any(np.abs(Y_r) < config.Y_SINGULAR_GUARD):
        raise SimulationError("variation process numerically singular", step=r_index)
    t_r = bundle.grid[r_index]
    f_r = bundle.mean.values[r_index]
    eta_r = float(np.asarray(bundle.spec.xi(f_r)))
    z = np.asarray(z, dtype=float)
    jump = bundle.spec.F(t_r, z) * bundle.X[:, r_index] + bundle.spec.lambda0(t_r, z, eta_r)
    D = bundle.Y / Y_r[:, None] * np.broadcast_to(jump, Y_r.shape)[:, None]
    D[:, :r_index] = 0.0
    return D


def path_extrema(paths):
    """
    Running extrema over the grid, ties resolved to the first index.

    Args:
        paths: a PathBundle or an array of shape (n_paths, n_points) / (n_points,).

    Returns:
        tuple: (run_max, argmax_index, run_min, argmin_index), one entry per path.

    >>> m, i, n, j = path_extrema([1.0, 3.0, 3.0, 2.0])
    >>> float(m[0]), int(i[0]), float(n[0]), int(j[0])
    (3.0, 1, 1.0, 0)
    """
    X = paths.X if isinstance(paths, PathBundle) else np.atleast_2d(np.asarray(paths, dtype=float))
    rows = np.arange(X.shape[0])
    i_max = np.argmax(X, axis=1)
    i_min = np.argmin(X, axis=1)
    return X[rows, i_max], i_max, X[rows, i_min], i_min


def stochastic_exponential(bundle: PathBundle) -> np.ndarray:
    """
    Closed-form first variation on the bundle's own noise:

        Y_t = exp(sum (A - B^2/2 - nu E[M]) dt + sum B dW + sum_events log(1 + M)).
    """
    c = bundle.coefficients
    noise = bundle.noise
    log_jump = np.zeros(noise.dW.shape)
    if noise.n_events:
        M = bundle.spec.F(c.t[noise.event_step], noise.event_mark)
        np.add.at(log_jump, (noise.event_row, noise.event_step), np.log1p(M))
    increments = (c.A - 0.5 * c.B ** 2 - c.comp_F) * c.dt + c.B * noise.dW + log_jump
    out = np.zeros((noise.n_paths, noise.n_steps + 1))
    np.cumsum(increments, axis=1, out=out[:, 1:])
    return np.exp(out)


def flow_from_derivative(bundle: PathBundle, r_index: int, z) -> np.ndarray:
    """
    dX_t/dx0 recovered from the Malliavin derivative,
    D_{r,z} X_t / lambda(r) * Y_r * u_t for t >= r (zero before r).

    Raises:
        SimulationError: when the jump coefficient lambda(r) vanishes.
    """
    D = malliavin_derivative(bundle, r_index, z)
    lam = D[:, r_index]
    if np.any(lam == 0.0):
        raise SimulationError("jump coefficient vanishes", step=r_index)
    out = D / lam[:, None] * bundle.Y[:, [r_index]] * bundle.u
    out[:, :r_index] = 0.0
    return out


def s_path(bundle: PathBundle) -> np.ndarray:
    """The bundle's X mapped to S_t = exp(-int_0^t b) X_t."""
    return np.exp(-bundle.mean.integral_b)[None, :] * bundle.X

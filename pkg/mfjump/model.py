"""
Model specifications and the deterministic mean function.

A model is the semi-linear mean-field SDE with jumps

    dX = b(t, rho) X dt + (C_t X + sigma0(t, pi)) dW
         + int (F_{t,z} X + lambda0(t, z, eta)) N~(dz, dt),   X_0 = x0,

with rho = E X, pi = E psi(X), eta = E xi(X), and a finite Levy measure
mu(dz) = nu * density(z) dz. Since E X_t = f(t) where f' = b(t, f) f, the
mean-field arguments are deterministic curves; solving for f is the first
step of every simulation.

Notes:
- State is scalar. Coefficient evaluators must accept numpy arrays for the
  mark argument z and broadcast.
- Missing partial derivatives are taken by central differences.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, NamedTuple, Optional

import numpy as np

from . import config

logger = logging.getLogger(__name__)


class MeanFieldError(Exception):
    """Root of every error raised by mfjump."""


class ModelError(MeanFieldError):
    """Raised for invalid model specifications or a mean ODE leaving its assumptions."""


# ----------------------------
# Jump-size law
# ----------------------------

@dataclass(frozen=True)
class JumpSizeLaw:
    """
    Uniform density of jump marks on [low, high].

    A degenerate law (low == high) puts every mark at one point; it is handy
    for hand-built models and tests.
    """
    low: float = -0.5
    high: float = 0.5

    def __post_init__(self):
        if not (math.isfinite(self.low) and math.isfinite(self.high)) or self.high < self.low:
            raise ModelError(f"invalid jump-size support [{self.low}, {self.high}]")

    @property
    def is_point(self) -> bool:
        return self.high == self.low

    def density(self, z):
        """Density of the marks; integrates to 1 over [low, high]."""
        z = np.asarray(z, dtype=float)
        if self.is_point:
            raise ModelError("point mark law has no density")
        inside = (z >= self.low) & (z <= self.high)
        return np.where(inside, 1.0 / (self.high - self.low), 0.0)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.is_point:
            return np.full(n, self.low)
        return rng.uniform(self.low, self.high, size=n)

    def quadrature(self, nodes: int = None):
        """
        Gauss-Legendre nodes and probability weights for E[g(Z)].

        Returns:
            tuple[np.ndarray, np.ndarray]: (marks, weights), weights sum to 1.
        """
        if self.is_point:
            return np.array([self.low]), np.array([1.0])
        n = nodes or config.GAUSS_LEGENDRE_NODES
        x, w = np.polynomial.legendre.leggauss(n)
        half = 0.5 * (self.high - self.low)
        return self.low + half * (x + 1.0), 0.5 * w

    def mean(self) -> float:
        return 0.5 * (self.low + self.high)


# ----------------------------
# Model specification
# ----------------------------

def _partial(fn: Callable, index: int, args: tuple):
    """Central-difference partial derivative of fn in argument `index`."""
    x = args[index]
    step = 1e-6 * (1.0 + np.abs(x))
    up = list(args)
    down = list(args)
    up[index] = x + step
    down[index] = x - step
    return (np.asarray(fn(*up), dtype=float) - np.asarray(fn(*down), dtype=float)) / (2.0 * step)


@dataclass(frozen=True)
class ModelSpec:
    """
    Coefficient set of a semi-linear mean-field SDE with jumps.

    Attributes:
        drift_b: b(t, rho), multiplies X in the drift.
        diffusion_linear: C(t), loading of C_t X on dW.
        jump_linear: F(t, z), loading of F_{t,z} X on N~.
        diffusion_affine: sigma0(t, pi), X-free diffusion term (None = 0).
        jump_affine: lambda0(t, z, eta), X-free jump term (None = 0).
        coupling_psi / coupling_xi: maps defining pi and eta (None = identity).
        jump_intensity: nu, total mass of mu per unit time.
        jump_size_law: density of the marks.
        x0: nonzero initial state.
        horizon: T > 0.
        mark_dependent: False when F and lambda0 ignore z; mark expectations are then exact.
        params: constants of a serializable semi-linear family (None for hand-written callables).
    """
    drift_b: Callable
    diffusion_linear: Callable
    jump_linear: Callable
    jump_intensity: float
    x0: float
    horizon: float
    jump_size_law: JumpSizeLaw = field(default_factory=JumpSizeLaw)
    diffusion_affine: Optional[Callable] = None
    jump_affine: Optional[Callable] = None
    coupling_psi: Optional[Callable] = None
    coupling_xi: Optional[Callable] = None
    drift_b_drho: Optional[Callable] = None
    diffusion_affine_dpi: Optional[Callable] = None
    jump_affine_deta: Optional[Callable] = None
    coupling_psi_prime: Optional[Callable] = None
    coupling_xi_prime: Optional[Callable] = None
    mark_dependent: bool = True
    name: str = "custom"
    params: Optional[Mapping] = None

    def __post_init__(self):
        if not math.isfinite(self.jump_intensity) or self.jump_intensity < 0:
            raise ModelError(f"jump intensity must be >= 0, got {self.jump_intensity}")
        if not math.isfinite(self.x0) or self.x0 == 0:
            raise ModelError("initial state x0 must be a nonzero real")
        if not math.isfinite(self.horizon) or self.horizon <= 0:
            raise ModelError(f"horizon must be positive, got {self.horizon}")

    # --- derived quantities ---

    @property
    def total_jump_mass(self) -> float:
        """Q = nu * T, the mu(dz)dt mass of [0, T] x marks."""
        return self.jump_intensity * self.horizon

    @property
    def is_homogeneous(self) -> bool:
        """True when both X-free terms vanish, so X = x0 * Y pathwise."""
        return self.diffusion_affine is None and self.jump_affine is None

    def with_x0(self, x0: float) -> "ModelSpec":
        params = dict(self.params, x0=x0) if self.params is not None else None
        return replace(self, x0=x0, params=params)

    # --- coefficient evaluation (all broadcast over z) ---

    def b(self, t, rho):
        return self.drift_b(t, rho)

    def db_drho(self, t, rho):
        if self.drift_b_drho is not None:
            return self.drift_b_drho(t, rho)
        return _partial(self.drift_b, 1, (t, rho))

    def sigma0(self, t, pi):
        return 0.0 if self.diffusion_affine is None else self.diffusion_affine(t, pi)

    def dsigma0_dpi(self, t, pi):
        if self.diffusion_affine is None:
            return 0.0
        if self.diffusion_affine_dpi is not None:
            return self.diffusion_affine_dpi(t, pi)
        return _partial(self.diffusion_affine, 1, (t, pi))

    def F(self, t, z):
        z = np.asarray(z, dtype=float)
        shape = np.broadcast_shapes(np.shape(t), z.shape)
        return np.broadcast_to(np.asarray(self.jump_linear(t, z), dtype=float), shape)

    def lambda0(self, t, z, eta):
        z = np.asarray(z, dtype=float)
        shape = np.broadcast_shapes(np.shape(t), z.shape, np.shape(eta))
        if self.jump_affine is None:
            return np.zeros(shape)
        return np.broadcast_to(np.asarray(self.jump_affine(t, z, eta), dtype=float), shape)

    def dlambda0_deta(self, t, z, eta):
        z = np.asarray(z, dtype=float)
        shape = np.broadcast_shapes(np.shape(t), z.shape, np.shape(eta))
        if self.jump_affine is None:
            return np.zeros(shape)
        if self.jump_affine_deta is not None:
            out = self.jump_affine_deta(t, z, eta)
        else:
            out = _partial(lambda e: self.jump_affine(t, z, e), 0, (eta,))
        return np.broadcast_to(np.asarray(out, dtype=float), shape)

    def psi(self, v):
        return v if self.coupling_psi is None else self.coupling_psi(v)

    def dpsi(self, v):
        if self.coupling_psi is None:
            return 1.0
        if self.coupling_psi_prime is not None:
            return self.coupling_psi_prime(v)
        return _partial(self.coupling_psi, 0, (v,))

    def xi(self, v):
        return v if self.coupling_xi is None else self.coupling_xi(v)

    def dxi(self, v):
        if self.coupling_xi is None:
            return 1.0
        if self.coupling_xi_prime is not None:
            return self.coupling_xi_prime(v)
        return _partial(self.coupling_xi, 0, (v,))


# ----------------------------
# Serializable semi-linear family
# ----------------------------

SEMI_LINEAR_KEYS = (
    "drift_b0", "drift_b1", "drift_b2",
    "diffusion_c", "sigma0_c", "sigma0_pi",
    "jump_f", "jump_fz", "lambda0_c", "lambda0_eta",
    "nu", "mark_low", "mark_high", "x0", "T",
)


def semi_linear_spec(name: str = "inline", **params) -> ModelSpec:
    """
    Build a ModelSpec from constant coefficients.

        b(t, rho)        = drift_b0 + drift_b1 * rho + drift_b2 / rho
        C_t              = diffusion_c
        sigma0(t, pi)    = sigma0_c + sigma0_pi * pi
        F_{t,z}          = jump_f + jump_fz * z
        lambda0(t,z,eta) = lambda0_c + lambda0_eta * eta

    Unspecified constants default to zero, nu to 0, marks to [-1/2, 1/2],
    x0 to 1 and T to 1.

    Raises:
        ModelError: For unknown keys or invalid values.
    """
    unknown = set(params) - set(SEMI_LINEAR_KEYS)
    if unknown:
        raise ModelError(f"unknown model parameters: {sorted(unknown)}")
    p = {k: 0.0 for k in SEMI_LINEAR_KEYS}
    p.update(mark_low=-0.5, mark_high=0.5, x0=1.0, T=1.0)
    p.update({k: float(v) for k, v in params.items()})

    b0, b1, b2 = p["drift_b0"], p["drift_b1"], p["drift_b2"]
    c = p["diffusion_c"]
    s0, s1 = p["sigma0_c"], p["sigma0_pi"]
    f0, fz = p["jump_f"], p["jump_fz"]
    l0, l1 = p["lambda0_c"], p["lambda0_eta"]

    has_sigma0 = s0 != 0.0 or s1 != 0.0
    has_lambda0 = l0 != 0.0 or l1 != 0.0

    return ModelSpec(
        drift_b=lambda t, rho: b0 + b1 * rho + (b2 / rho if b2 != 0.0 else 0.0),
        drift_b_drho=lambda t, rho: b1 - (b2 / (rho * rho) if b2 != 0.0 else 0.0),
        diffusion_linear=lambda t: c,
        diffusion_affine=(lambda t, pi: s0 + s1 * pi) if has_sigma0 else None,
        diffusion_affine_dpi=(lambda t, pi: s1) if has_sigma0 else None,
        jump_linear=lambda t, z: f0 + fz * z,
        jump_affine=(lambda t, z, eta: l0 + l1 * eta) if has_lambda0 else None,
        jump_affine_deta=(lambda t, z, eta: l1) if has_lambda0 else None,
        jump_intensity=p["nu"],
        jump_size_law=JumpSizeLaw(p["mark_low"], p["mark_high"]),
        x0=p["x0"],
        horizon=p["T"],
        mark_dependent=fz != 0.0,
        name=name,
        params=p,
    )


def spec_to_params(spec: ModelSpec) -> dict:
    """
    Flat key/value form of a serializable spec.

    Raises:
        ModelError: If the model was built from arbitrary callables.
    """
    if spec.params is None:
        raise ModelError(f"model '{spec.name}' is not serializable (hand-written coefficients)")
    return dict(spec.params)


# ----------------------------
# Time grid & mean function
# ----------------------------

def uniform_grid(horizon: float, dt: float) -> np.ndarray:
    """
    Uniform grid 0 = t_0 < ... < t_N = horizon.

    Raises:
        ModelError: If dt is not positive or does not divide the horizon.
    """
    if not (dt > 0 and math.isfinite(dt)):
        raise ModelError(f"step size must be positive, got {dt}")
    n = int(round(horizon / dt))
    if n < 1 or abs(n * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ModelError(f"dt = {dt} does not divide T = {horizon}")
    return np.linspace(0.0, horizon, n + 1)


@dataclass(frozen=True)
class MeanFunction:
    """
    f(t) = E X_t sampled on the simulation grid.

    Attributes:
        grid: strictly increasing time points, grid[0] = 0, grid[-1] = T.
        values: f(t_i).
        integral_b: cumulative int_0^{t_i} b(s, f(s)) ds.
        dfdx: d f(t_i) / d x0, the sensitivity of the mean curve to the initial value.
    """
    grid: np.ndarray
    values: np.ndarray
    integral_b: np.ndarray
    dfdx: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.grid) - 1

    @property
    def x0(self) -> float:
        return float(self.values[0])


def solve_mean_ode(spec: ModelSpec, grid: np.ndarray) -> MeanFunction:
    """
    Solve f' = b(t, f) f, f(0) = x0 on the grid with classical RK4.

    The cumulative drift integral I' = b(t, f) and the sensitivity
    g' = (d_rho b(t, f) f + b(t, f)) g, g(0) = 1, ride along in the same
    stages, so I is Simpson-consistent and exp(I) x0 / f = 1 to solver accuracy.

    Raises:
        ModelError: "mean function unbounded on [0,T]" when |f| passes the
            overflow guard, "mean function hits zero" when f changes sign or vanishes.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) < 2 or np.any(np.diff(grid) <= 0):
        raise ModelError("time grid must be strictly increasing with at least two points")
    if grid[0] != 0.0:
        raise ModelError("time grid must start at 0")

    def rhs(t, state):
        f, _, g = state
        if f == 0.0 or (f > 0) != (spec.x0 > 0):
            raise ModelError("mean function hits zero")
        b = float(spec.b(t, f))
        return np.array([b * f, b, (float(spec.db_drho(t, f)) * f + b) * g])

    n = len(grid)
    out = np.empty((n, 3))
    out[0] = (spec.x0, 0.0, 1.0)
    for i in range(n - 1):
        t, h = grid[i], grid[i + 1] - grid[i]
        y = out[i]
        k1 = rhs(t, y)
        k2 = rhs(t + h / 2, y + h / 2 * k1)
        k3 = rhs(t + h / 2, y + h / 2 * k2)
        k4 = rhs(t + h, y + h * k3)
        nxt = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        f_next = nxt[0]
        if not np.all(np.isfinite(nxt)) or abs(f_next) > config.MEAN_OVERFLOW_GUARD:
            raise ModelError("mean function unbounded on [0,T]")
        if f_next == 0.0 or np.sign(f_next) != np.sign(spec.x0):
            raise ModelError("mean function hits zero")
        out[i + 1] = nxt

    logger.debug("mean ODE solved on %d points, f(T) = %.17g", n, out[-1, 0])
    return MeanFunction(grid=grid, values=out[:, 0].copy(),
                        integral_b=out[:, 1].copy(), dfdx=out[:, 2].copy())


def mean_ode_residual(spec: ModelSpec, mf: MeanFunction) -> float:
    """
    Largest relative midpoint residual of the mean ODE over the grid.

    max_i |f_{i+1} - f_i - dt b(t_mid, f_mid) f_mid| / (1 + |f_i|), with f_mid
    the average of the two endpoints.
    """
    f = mf.values
    h = np.diff(mf.grid)
    t_mid = mf.grid[:-1] + h / 2
    f_mid = 0.5 * (f[:-1] + f[1:])
    b_mid = np.array([float(spec.b(t, v)) for t, v in zip(t_mid, f_mid)])
    res = np.abs(f[1:] - f[:-1] - h * b_mid * f_mid) / (1.0 + np.abs(f[:-1]))
    return float(res.max())


# ----------------------------
# X <-> S transform
# ----------------------------

def transform_S_to_X(s_value, t_index, mf: MeanFunction):
    """X_t = exp(int_0^t b(s, f(s)) ds) S_t."""
    return np.exp(mf.integral_b[t_index]) * s_value


def transform_X_to_S(x_value, t_index, mf: MeanFunction):
    """S_t = exp(-int_0^t b(s, f(s)) ds) X_t; inverse of transform_S_to_X."""
    return np.exp(-mf.integral_b[t_index]) * x_value


# ----------------------------
# Built-in experiment models
# ----------------------------

class BuiltinModel(NamedTuple):
    spec: ModelSpec
    closed_form: Callable  # t -> (f, int_0^t b, df/dx0), used as a test oracle only

    def closed_form_mean(self, grid) -> MeanFunction:
        grid = np.asarray(grid, dtype=float)
        f, integral, dfdx = self.closed_form(grid)
        return MeanFunction(grid=grid, values=f, integral_b=integral, dfdx=dfdx)


BUILTIN_MODELS = ("example1", "example2")


def builtin_example(which: str, a: float = None, b: float = 1.0, c: float = 1.0,
                    x0: float = 1.0, nu: float = 0.1, horizon: float = 1.0) -> BuiltinModel:
    """
    The two built-in reference models.

    example1: b(t, rho) = a (rho + 1) / rho, a = 1 by default (a = 0.2 gives the
              drift 0.2 (1 + f) / f); mean f = (1 + x0) e^{a t} - 1.
    example2: b(t, rho) = a rho, a = -1 by default; mean f = x0 / (x0 t + 1) for a = -1.

    Both use diffusion b X dW and jumps c X on uniform marks [-1/2, 1/2] with
    intensity nu, no X-free terms.

    Raises:
        ModelError: For an unknown name.
    """
    common = dict(diffusion_c=b, jump_f=c, nu=nu, mark_low=-0.5, mark_high=0.5,
                  x0=x0, T=horizon)
    if which == "example1":
        a = 1.0 if a is None else a
        spec = semi_linear_spec(name="example1", drift_b0=a, drift_b2=a, **common)

        def closed(t):
            f = (1.0 + x0) * np.exp(a * t) - 1.0
            return f, np.log(f / x0), np.exp(a * t)
        return BuiltinModel(spec, closed)

    if which == "example2":
        a = -1.0 if a is None else a
        spec = semi_linear_spec(name="example2", drift_b1=a, **common)

        def closed(t):
            # f' = a f^2  =>  f = x0 / (1 - a x0 t)
            denom = 1.0 - a * x0 * t
            return x0 / denom, -np.log(denom), 1.0 / denom ** 2
        return BuiltinModel(spec, closed)

    raise ModelError(f"unknown built-in model '{which}' (expected one of {BUILTIN_MODELS})")

"""
Malliavin weight fields and their Skorokhod integrals.

For a payoff driven by G (X_T, or the running extremum of a barrier option)
a Delta weight omega(t, z) has to satisfy, path by path,

    nu int int omega(t, z) D_{t,z}Phi rho(dz) dt = Phi'(G) d_x G,

where rho is the mark law and D_{t,z}Phi = Phi(G shifted by a jump at (t, z)) - Phi(G).
Three normalizations are used:

- jump_mass (calls, smoothed call): omega = Phi'(G) d_x G / (Q D_{t,z}Phi),
  Q = nu T. For the call this is the piecewise weight that equals
  flow_T / (Q D_{t,z}X_T) when the shifted path stays above the strike and
  flow_T / (Q (K - X_T)) otherwise.
- support (barriers): the same ratio with Q replaced by the per-path jump
  mass of {D_{t,z}Phi != 0}; cells where a jump leaves the payoff unchanged
  carry no weight.
- min_norm (digital ramp): omega = Phi'(G) d_x G D_{t,z}Phi / nu int int (D Phi)^2,
  bounded wherever the ramp can move.

A vanishing denominator contributes zero; guarded jump terms are counted in
SkorokhodResult.guard_hits.
"""

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import config
from .model import MeanFieldError
from .payoffs import Payoff
from .simulate import PathBundle, malliavin_derivative, mark_nodes, simulate_paths

logger = logging.getLogger(__name__)

SKOROKHOD_EVALUATORS = ("exact", "adapted")


class WeightError(MeanFieldError):
    """Raised when a Malliavin weight cannot be built."""


@dataclass(frozen=True)
class SkorokhodResult:
    """Per-path decomposition value = jump_sum - compensator."""
    value: np.ndarray
    jump_sum: np.ndarray
    compensator: np.ndarray
    guard_hits: np.ndarray


# ----------------------------
# Path extrema under a shift
# ----------------------------

def sup_shift(X, D) -> np.ndarray:
    """
    max_s (X_s + D_s) per path.

    >>> float(sup_shift([1.0, 2.0, 1.0], [0.0, 0.0, 2.0])[0])
    3.0
    """
    return np.max(np.atleast_2d(X) + np.atleast_2d(D), axis=1)


def inf_shift(X, D) -> np.ndarray:
    return np.min(np.atleast_2d(X) + np.atleast_2d(D), axis=1)


def d_max(bundle: PathBundle, t_index: int, z) -> np.ndarray:
    """D_{t,z} max X = sup_s (X_s + D_{t,z}X_s 1{t <= s}) - max X, per path."""
    return sup_shift(bundle.X, malliavin_derivative(bundle, t_index, z)) - bundle.run_max


def d_min(bundle: PathBundle, t_index: int, z) -> np.ndarray:
    """D_{t,z} min X = inf_s (X_s + D_{t,z}X_s 1{t <= s}) - min X, per path."""
    return inf_shift(bundle.X, malliavin_derivative(bundle, t_index, z)) - bundle.run_min


def normalization(payoff: Payoff) -> str:
    """
    Weight normalization of a payoff: "min_norm", "support" or "jump_mass".

    >>> normalization(Payoff("digital", 1.0)), normalization(Payoff("up_and_out_call", 1.0, 2.0))
    ('min_norm', 'support')
    """
    if payoff.kind == "digital":
        return "min_norm"
    if payoff.is_barrier:
        return "support"
    return "jump_mass"


def weight_value(payoff: Payoff, G, dG_dx, shifted_G, scale, rule: str = None):
    """
    omega at one or more cells, given the driving value before and after the shift.

    Args:
        scale: the path's normalizer (Q, its support mass, or its
            integrated squared add-one cost; see `normalization`).
        rule: defaults to normalization(payoff).

    Returns:
        tuple[np.ndarray, np.ndarray]: (omega, guarded) where guarded marks
        entries with a live numerator and a denominator below the guard.

    >>> w, g = weight_value(Payoff("european_call", 0.5), 1.0, 2.0, 5.0, 0.1)
    >>> float(w), bool(g)
    (5.0, False)
    """
    rule = rule or normalization(payoff)
    numerator = payoff.weighted_derivative(G) * np.asarray(dG_dx, dtype=float)
    cost = payoff.weighted(shifted_G) - payoff.weighted(G)
    scale = np.asarray(scale, dtype=float)
    live = numerator != 0.0
    scaled = scale >= config.WEIGHT_GUARD
    moves = np.abs(cost) >= config.WEIGHT_GUARD
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if rule == "min_norm":
            ok = live & scaled
            return np.where(ok, numerator * cost / scale, 0.0), live & ~scaled
        if rule == "support":
            ok = live & moves & scaled
            return np.where(ok, numerator / (scale * cost), 0.0), live & ~scaled
        ok = live & moves
        return np.where(ok, numerator / (scale * cost), 0.0), live & ~moves


# ----------------------------
# Weight fields
# ----------------------------

class WeightField:
    """
    The weight omega(t_k, z) of one payoff on one bundle.

    Evaluation is lazy: `evaluate` takes broadcastable (rows, steps, marks)
    arrays, so the same field serves realized jumps and quadrature grids.
    """

    def __init__(self, bundle: PathBundle, payoff: Payoff):
        q_total = bundle.spec.total_jump_mass
        if q_total <= 0.0:
            raise WeightError("Malliavin weight undefined for jump-free model")
        if bundle.flow is None:
            raise WeightError("weight needs a bundle with X, Y and the flow")
        self.bundle = bundle
        self.payoff = payoff
        self.q_total = q_total
        self.rule = normalization(payoff)
        rows = np.arange(bundle.n_paths)
        self.G, self.index = payoff.driver(bundle.X)
        self.dG_dx = bundle.flow[rows, self.index]

    def rebind(self, bundle: PathBundle) -> "WeightField":
        return WeightField(bundle, self.payoff)

    @cached_property
    def live_rows(self) -> np.ndarray:
        """Paths whose numerator Phi'(G) d_x G is nonzero."""
        return np.flatnonzero(self.payoff.weighted_derivative(self.G) * self.dG_dx != 0.0)

    @cached_property
    def _envelopes(self):
        X, Y = self.bundle.X, self.bundle.Y
        head_max = np.full(X.shape, -np.inf)
        head_min = np.full(X.shape, np.inf)
        head_max[:, 1:] = np.maximum.accumulate(X, axis=1)[:, :-1]
        head_min[:, 1:] = np.minimum.accumulate(X, axis=1)[:, :-1]
        tail_max = np.maximum.accumulate(Y[:, ::-1], axis=1)[:, ::-1]
        tail_min = np.minimum.accumulate(Y[:, ::-1], axis=1)[:, ::-1]
        return head_max, head_min, tail_max, tail_min

    def shifted_driver(self, rows, k, c) -> np.ndarray:
        """
        Driving value of the path X + 1{k <= s} c Y_s (c = lambda / Y_k).

        Homogeneous models have X = x0 Y, which reduces the barrier extremum
        to prefix/suffix envelopes; otherwise each step is scanned.
        """
        b = self.bundle
        if not self.payoff.is_barrier:
            return b.X[rows, -1] + c * b.Y[rows, -1]
        up = self.payoff.kind == "up_and_out_call"
        rows, k, c = np.broadcast_arrays(rows, k, c)

        if b.spec.is_homogeneous:
            head_max, head_min, tail_max, tail_min = self._envelopes
            a = b.spec.x0 + c
            hi, lo = tail_max[rows, k], tail_min[rows, k]
            if up:
                return np.maximum(head_max[rows, k], np.where(a >= 0.0, a * hi, a * lo))
            return np.minimum(head_min[rows, k], np.where(a >= 0.0, a * lo, a * hi))

        flat_r, flat_k, flat_c = rows.ravel(), k.ravel(), c.ravel()
        out = np.empty(flat_r.shape)
        for step in np.unique(flat_k):
            sel = np.flatnonzero(flat_k == step)
            r = flat_r[sel]
            tail = b.X[r, step:] + flat_c[sel, None] * b.Y[r, step:]
            ext = tail.max(axis=1) if up else tail.min(axis=1)
            if step > 0:
                head = b.X[r, :step]
                ext = np.maximum(ext, head.max(axis=1)) if up else np.minimum(ext, head.min(axis=1))
            out[sel] = ext
        return out.reshape(rows.shape)

    def _shifted(self, rows, k, z) -> np.ndarray:
        b = self.bundle
        coef = b.coefficients
        t_k = coef.t[k]
        lam = b.spec.F(t_k, z) * b.X[rows, k] + b.spec.lambda0(t_k, z, coef.eta[k])
        return self.shifted_driver(rows, k, lam / b.Y[rows, k])

    def add_one_cost(self, rows, k, z) -> np.ndarray:
        """D_{t_k,z} Phi per (row, step, mark): weighted payoff after the jump minus before."""
        rows = np.asarray(rows)
        k = np.asarray(k)
        return self.payoff.weighted(self._shifted(rows, k, z)) - self.payoff.weighted(self.G[rows])

    def quadrature(self, cells, rows=None) -> np.ndarray:
        """
        nu sum_k dt_k E_z[cells(rows, k, Z)] per path, marks on the Gauss-Legendre nodes.

        Args:
            cells: callable of broadcastable (rows, steps, marks) arrays.
            rows: path indices to integrate (default: all); the result has one
                entry per requested row.
        """
        b = self.bundle
        dt = b.coefficients.dt
        z, w = mark_nodes(b.spec)
        rows = np.arange(b.n_paths) if rows is None else np.asarray(rows)
        N = b.n_steps
        block = max(1, config.WEIGHT_CHUNK_CELLS // max(1, len(rows) * len(z)))
        r = rows[:, None, None]
        marks = z[None, None, :]
        total = np.zeros(len(rows))
        for start in range(0, N, block):
            k = np.arange(start, min(N, start + block))[None, :, None]
            values = np.broadcast_to(cells(r, k, marks), (len(rows), k.shape[1], len(z)))
            total += (values @ w) @ dt[start:start + k.shape[1]]
        return b.spec.jump_intensity * total

    @cached_property
    def scale(self) -> np.ndarray:
        """Per-path normalizer of omega; zero on paths with no live numerator."""
        P = self.bundle.n_paths
        if self.rule == "jump_mass":
            return np.full(P, self.q_total)
        scale = np.zeros(P)
        rows = self.live_rows
        if rows.size == 0:
            return scale
        if self.rule == "support":
            def cells(r, k, z):
                return (np.abs(self.add_one_cost(r, k, z)) >= config.WEIGHT_GUARD).astype(float)
        else:
            def cells(r, k, z):
                return self.add_one_cost(r, k, z) ** 2
        scale[rows] = self.quadrature(cells, rows)
        return scale

    def evaluate(self, rows, k, z):
        """
        omega at (row, step, mark), broadcasting the three index arrays.

        Returns:
            tuple[np.ndarray, np.ndarray]: (omega, guarded).
        """
        rows = np.asarray(rows)
        k = np.asarray(k)
        shifted = self._shifted(rows, k, z)
        return weight_value(self.payoff, self.G[rows], self.dG_dx[rows], shifted,
                            self.scale[rows], self.rule)

    def __call__(self, t_index: int, z) -> np.ndarray:
        """omega(t_index, z) on every path of the bundle."""
        return self.evaluate(np.arange(self.bundle.n_paths), t_index, z)[0]

    def compensator(self) -> np.ndarray:
        """nu sum_k dt_k E_z[omega(t_k, Z)] per path."""
        guarded = 0

        def cells(r, k, z):
            nonlocal guarded
            omega, hit = self.evaluate(r, k, z)
            guarded += int(hit.sum())
            return omega

        total = np.zeros(self.bundle.n_paths)
        rows = self.live_rows
        if rows.size:
            total[rows] = self.quadrature(cells, rows)
        if guarded:
            logger.debug("%d guarded quadrature cells in the compensator", guarded)
        return total


class ConstantWeight:
    """Deterministic weight omega(t, z) = value; delta(omega) is a compensated count."""

    def __init__(self, bundle: PathBundle, value: float = 1.0):
        self.bundle = bundle
        self.value = float(value)

    def rebind(self, bundle: PathBundle) -> "ConstantWeight":
        return ConstantWeight(bundle, self.value)

    def evaluate(self, rows, k, z):
        shape = np.broadcast_shapes(np.shape(rows), np.shape(k), np.shape(z))
        return np.full(shape, self.value), np.zeros(shape, dtype=bool)

    def __call__(self, t_index: int, z) -> np.ndarray:
        return np.full(self.bundle.n_paths, self.value)

    def compensator(self) -> np.ndarray:
        b = self.bundle
        return np.full(b.n_paths, b.spec.jump_intensity * self.value * float(b.coefficients.dt.sum()))


def european_weight(bundle: PathBundle, K: float) -> WeightField:
    """Delta weight of (X_T - K)^+; zero on every path with X_T <= K."""
    return WeightField(bundle, Payoff("european_call", K))


def barrier_uo_weight(bundle: PathBundle, K: float, B: float) -> WeightField:
    """Delta weight of (max X - K)^+ 1{max X < B}, shifted path read at its own argmax."""
    return WeightField(bundle, Payoff("up_and_out_call", K, B))


def barrier_do_weight(bundle: PathBundle, K: float, B: float) -> WeightField:
    """Delta weight of (min X - K)^+ 1{min X > B}."""
    return WeightField(bundle, Payoff("down_and_out_call", K, B))


# ----------------------------
# Skorokhod integral
# ----------------------------

def skorokhod_integral(field, bundle: PathBundle = None, evaluator: str = "exact") -> SkorokhodResult:
    """
    delta(omega) per path as jump sum minus quadrature compensator.

    Args:
        field: a WeightField (or any weight exposing evaluate/compensator/rebind).
        bundle: the bundle the field is bound to (defaults to field.bundle).
        evaluator: "exact" evaluates each jump term on the path with that jump
            removed; "adapted" evaluates it on the path itself.

    Returns:
        SkorokhodResult: arrays with one entry per path.
    """
    if evaluator not in SKOROKHOD_EVALUATORS:
        raise WeightError(f"unknown Skorokhod evaluator '{evaluator}'")
    bundle = field.bundle if bundle is None else bundle
    if bundle is not field.bundle:
        raise WeightError("weight field is bound to a different bundle")

    noise = bundle.noise
    jump_sum = np.zeros(bundle.n_paths)
    hits = np.zeros(bundle.n_paths, dtype=np.int64)
    if noise.n_events:
        if evaluator == "adapted":
            omega, guarded = field.evaluate(noise.event_row, noise.event_step, noise.event_mark)
        else:
            removed = simulate_paths(bundle.spec, bundle.mean, noise.leave_one_out(),
                                     bundle.compensated)
            omega, guarded = field.rebind(removed).evaluate(
                np.arange(noise.n_events), noise.event_step, noise.event_mark)
        np.add.at(jump_sum, noise.event_row, omega)
        np.add.at(hits, noise.event_row, guarded.astype(np.int64))

    compensator = field.compensator()
    return SkorokhodResult(value=jump_sum - compensator, jump_sum=jump_sum,
                           compensator=compensator, guard_hits=hits)

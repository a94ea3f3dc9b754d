"""
Payoffs and their almost-everywhere derivatives.

Terminal payoffs read X_T; barrier payoffs read the running maximum (up-and-out)
or minimum (down-and-out) of the path and are differentiated through that
extremum. `weighted` gives the function the Malliavin estimator works with:
it is the payoff itself except for the digital, which is replaced by a linear
ramp of half-width `ramp` around the strike.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import config
from .model import MeanFieldError

PAYOFF_KINDS = ("european_call", "digital", "up_and_out_call", "down_and_out_call",
                "smoothed_call", "identity", "constant")


class PayoffError(MeanFieldError):
    """Raised for an inconsistent payoff definition."""


def call(x, K):
    return np.maximum(np.asarray(x, dtype=float) - K, 0.0)


def smoothed_call(x, K, eps):
    """
    Call with its kink replaced by a quadratic over [K - eps/2, K + eps/2].

    >>> float(smoothed_call(1.0, 1.0, 0.5))
    0.0625
    >>> float(smoothed_call(2.0, 1.0, 0.1))
    1.0
    """
    d = np.asarray(x, dtype=float) - K
    half = 0.5 * eps
    return np.where(d <= -half, 0.0, np.where(d >= half, d, (d + half) ** 2 / (2.0 * eps)))


def smoothed_call_prime(x, K, eps):
    d = np.asarray(x, dtype=float) - K
    return np.clip((d + 0.5 * eps) / eps, 0.0, 1.0)


def ramp(x, K, half_width):
    """Linear interpolation of the digital 1{x > K} over [K - w, K + w]."""
    return np.clip((np.asarray(x, dtype=float) - K + half_width) / (2.0 * half_width), 0.0, 1.0)


def ramp_prime(x, K, half_width):
    x = np.asarray(x, dtype=float)
    return np.where(np.abs(x - K) < half_width, 1.0 / (2.0 * half_width), 0.0)


@dataclass(frozen=True)
class Payoff:
    """
    A Delta target.

    Attributes:
        kind: one of PAYOFF_KINDS.
        strike: K (> 0 for the option kinds; the constant's value for "constant").
        barrier: B for the barrier kinds; B > K for up-and-out.
        smoothing: eps of smoothed_call.
        ramp: half-width used to weight the digital.
    """
    kind: str
    strike: float = 1.0
    barrier: Optional[float] = None
    smoothing: float = config.DEFAULT_SMOOTHING
    ramp: float = config.DEFAULT_DIGITAL_RAMP

    def __post_init__(self):
        if self.kind not in PAYOFF_KINDS:
            raise PayoffError(f"unknown payoff '{self.kind}' (expected one of {PAYOFF_KINDS})")
        if self.kind not in ("identity", "constant") and not self.strike > 0:
            raise PayoffError(f"strike must be positive, got {self.strike}")
        if self.is_barrier and self.barrier is None:
            raise PayoffError(f"{self.kind} needs a barrier")
        if self.kind == "up_and_out_call" and not self.barrier > self.strike:
            raise PayoffError(f"up-and-out barrier {self.barrier} must exceed strike {self.strike}")
        if self.kind == "smoothed_call" and not self.smoothing > 0:
            raise PayoffError("smoothing width must be positive")
        if self.kind == "digital" and not self.ramp > 0:
            raise PayoffError("digital ramp half-width must be positive")

    @property
    def is_barrier(self) -> bool:
        return self.kind in ("up_and_out_call", "down_and_out_call")

    @property
    def discontinuous(self) -> bool:
        return self.kind == "digital"

    def label(self, weighted: bool = False) -> str:
        """
        Payoff name for reports; `weighted` names the function the Malliavin
        estimator actually prices.

        >>> Payoff("digital", 1.0, ramp=0.05).label(weighted=True)
        'digital(ramp=0.05)'
        """
        if weighted and self.kind == "digital":
            return f"digital(ramp={self.ramp:g})"
        if self.kind == "smoothed_call":
            return f"smoothed_call({self.smoothing:g})"
        return self.kind

    # --- terminal functions of the driving value G (X_T or the extremum) ---

    def of(self, g) -> np.ndarray:
        """Payoff as a function of its driving value."""
        g = np.asarray(g, dtype=float)
        K, B = self.strike, self.barrier
        if self.kind == "european_call":
            return call(g, K)
        if self.kind == "digital":
            return (g > K).astype(float)
        if self.kind == "up_and_out_call":
            return np.where(g < B, call(g, K), 0.0)
        if self.kind == "down_and_out_call":
            return np.where(g > B, np.maximum(g - K, 0.0), 0.0)
        if self.kind == "smoothed_call":
            return smoothed_call(g, K, self.smoothing)
        if self.kind == "identity":
            return g.copy()
        return np.full(g.shape, float(K))

    def derivative(self, g) -> np.ndarray:
        """Almost-everywhere derivative in the driving value (zero for the digital)."""
        g = np.asarray(g, dtype=float)
        K, B = self.strike, self.barrier
        if self.kind == "european_call":
            return (g > K).astype(float)
        if self.kind == "up_and_out_call":
            return ((g > K) & (g < B)).astype(float)
        if self.kind == "down_and_out_call":
            return ((g > K) & (g > B)).astype(float)
        if self.kind == "smoothed_call":
            return smoothed_call_prime(g, K, self.smoothing)
        if self.kind == "identity":
            return np.ones(g.shape)
        return np.zeros(g.shape)

    def weighted(self, g) -> np.ndarray:
        if self.kind == "digital":
            return ramp(g, self.strike, self.ramp)
        return self.of(g)

    def weighted_derivative(self, g) -> np.ndarray:
        if self.kind == "digital":
            return ramp_prime(g, self.strike, self.ramp)
        return self.derivative(g)

    # --- path functionals ---

    def driver(self, X: np.ndarray):
        """
        Driving value and its grid index per path.

        Returns:
            tuple[np.ndarray, np.ndarray]: (G, index); index is the first argmax
            (up-and-out), first argmin (down-and-out) or the last grid point.
        """
        X = np.atleast_2d(X)
        rows = np.arange(X.shape[0])
        if self.kind == "up_and_out_call":
            idx = np.argmax(X, axis=1)
        elif self.kind == "down_and_out_call":
            idx = np.argmin(X, axis=1)
        else:
            idx = np.full(X.shape[0], X.shape[1] - 1)
        return X[rows, idx], idx

    def on_paths(self, X: np.ndarray) -> np.ndarray:
        return self.of(self.driver(X)[0])

"""
mfjump: Monte Carlo Delta of mean-field SDEs with jumps via Malliavin weights.

Modules:
- config:   tunables (step size, path count, guards, chunking, output layout)
- model:    model specifications and the mean-function ODE
- rng:      counter-based per-path random streams
- simulate: Euler paths of X, the first variation Y, the auxiliary u and the flow
- payoffs:  payoff functions and their derivatives
- weights:  Malliavin weight fields and Skorokhod integrals
- greeks:   Delta estimators, variance reports, convergence studies
- report:   CSV artifacts
- cli:      batch front end
"""

from .model import MeanFieldError, ModelError, ModelSpec, builtin_example, solve_mean_ode, uniform_grid
from .payoffs import Payoff

__all__ = ["MeanFieldError", "ModelError", "ModelSpec", "Payoff", "builtin_example",
           "solve_mean_ode", "uniform_grid"]

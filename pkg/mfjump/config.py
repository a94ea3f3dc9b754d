"""
mfjump configuration knobs.

This module centralizes all tunables used by the engine:
- Default numerics for a run (step size, path count, finite-difference bump).
- Numerical guards (mean-function overflow, variation singularity, weight denominators).
- Quadrature and chunking of the path dimension.
- Worker threads and output layout for the CLI.

Notes:
- Defaults for dt, n_paths and h_fd are sized for desk runs of the built-in examples.
- All values are plain numbers/strings meant to be imported (no side effects).
- OUTPUT_DIR and WORKER_THREADS may be overridden at run time by the CLI.
"""

# ----------------------------
# Run defaults
# ----------------------------
DEFAULT_DT = 2.0 ** -12         # uniform step size
DEFAULT_N_PATHS = 1000          # Monte Carlo sample size
DEFAULT_H_FD = 1e-3             # finite-difference bump of the initial value
DEFAULT_SEED = 0                # master seed when neither config nor flag gives one
DEFAULT_SMOOTHING = 1e-2        # width of the mollified call kink
DEFAULT_DIGITAL_RAMP = 5e-2     # half-width of the ramp used to weight digitals
DEFAULT_BARRIER_FACTOR = 1.5    # up-and-out barrier as a multiple of x0 when none is given
FD_WARN_BELOW = 1e-8            # bumps below this are recorded as noise-amplified

# ----------------------------
# Numerical guards
# ----------------------------
MEAN_OVERFLOW_GUARD = 1e12      # |f| above this aborts the mean ODE
Y_SINGULAR_GUARD = 1e-14        # |Y| below this aborts the path
WEIGHT_GUARD = 1e-12            # |weight denominator| below this contributes zero

# ----------------------------
# Quadrature
# ----------------------------
GAUSS_LEGENDRE_NODES = 16       # nodes for mark expectations over the jump-size law

# ----------------------------
# Path batching & threads
# ----------------------------
CHUNK_CELLS = 2 ** 21           # grid cells (paths x steps) simulated per chunk
WEIGHT_CHUNK_CELLS = 2 ** 22    # cells (paths x steps x nodes) per weight quadrature block
WORKER_THREADS = 1              # PathWorker threads; results never depend on this

# ----------------------------
# Output
# ----------------------------
OUTPUT_DIR = "runs"             # set by --out
FLOAT_DIGITS = 17               # significant digits for every float written to CSV
TRACE_FILE = "trace.csv"
DELTA_FILE = "delta.csv"
COMPARE_FILE = "compare.csv"
CONVERGE_FILE = "converge.csv"

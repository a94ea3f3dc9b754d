"""
CSV artifacts.

Every file starts with '#'-prefixed lines holding the resolved run
configuration in the same key = value form the CLI reads, so stripping the
'# ' prefix gives back a config that regenerates the file. Floats carry
config.FLOAT_DIGITS significant digits. Files are written to a temporary
sibling and renamed into place.
"""

import csv
import io
import logging
import math
import os

import numpy as np

from . import config

logger = logging.getLogger(__name__)

ESTIMATE_COLUMNS = ("method", "payoff", "K", "B", "x0", "nu", "dt", "n_paths", "seed",
                    "mean", "stderr", "variance", "guard_hits", "runtime_ms")
COMPARE_COLUMNS = ("method", "payoff", "mean", "variance", "stderr", "runtime_ms",
                   "variance_ratio", "stderr_ratio", "runtime_ratio")
CONVERGE_COLUMNS = ("quantity", "dt", "rms_error", "n_paths", "slope")
TRACE_COLUMNS = ("path", "step", "t", "X", "Y", "u", "flow", "n_jumps_in_step")


def fmt(value) -> str:
    """
    Render one CSV cell.

    >>> fmt(0.1)
    '0.10000000000000001'
    >>> fmt(None), fmt(3), fmt(float("nan"))
    ('', '3', 'nan')
    """
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        return f"{value:.{config.FLOAT_DIGITS}g}"
    return str(value)


def header_lines(settings: dict) -> list:
    """Resolved configuration as 'key = value' lines, in insertion order."""
    return [f"{key} = {fmt(value)}" for key, value in settings.items() if value is not None]


def write_csv(path: str, settings: dict, columns, rows) -> str:
    """
    Write a config-headed CSV atomically.

    Args:
        path: destination file; its directory is created if needed.
        settings: resolved configuration for the header.
        columns: column names.
        rows: iterables of cell values, in column order.

    Returns:
        str: the path written.
    """
    buffer = io.StringIO()
    for line in header_lines(settings):
        buffer.write(f"# {line}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([fmt(v) for v in row])

    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as f:
        f.write(buffer.getvalue())
    os.replace(tmp, path)
    logger.info("wrote %s", path)
    return path


def read_header(path: str) -> str:
    """The embedded configuration of a CSV written by write_csv, as config text."""
    lines = []
    with open(path) as f:
        for line in f:
            if not line.startswith("# "):
                break
            lines.append(line[2:])
    return "".join(lines)


# ----------------------------
# Row builders
# ----------------------------

def estimate_row(est, record_runtime: bool = False) -> tuple:
    p = est.payoff
    return (est.method, est.priced, p.strike, p.barrier, est.x0, est.nu, est.dt, est.n_paths,
            est.seed, est.mean, est.stderr, est.variance, est.guard_hits,
            est.runtime_ms if record_runtime else 0)


def compare_row(row, record_runtime: bool = False) -> tuple:
    runtime = row.runtime_ms if record_runtime else 0
    runtime_ratio = row.runtime_ratio if record_runtime else None
    return (row.method, row.payoff, row.mean, row.variance, row.stderr, runtime,
            row.variance_ratio, row.stderr_ratio, runtime_ratio)


def converge_rows(result) -> list:
    rows = [(r.quantity, r.dt, r.error, r.n_paths, None) for r in result.rows]
    rows.append((f"{result.quantity}:fit", None, None, result.rows[-1].n_paths, result.slope))
    return rows


def trace_rows(bundle, rows=(0,)) -> list:
    """Per-step trace of the given bundle rows; the last grid point has no step of its own."""
    counts = bundle.noise.counts()
    out = []
    for r in rows:
        path = int(bundle.noise.path_index[r])
        for i, t in enumerate(bundle.grid):
            jumps = int(counts[r, i]) if i < bundle.n_steps else 0
            out.append((path, i, t, bundle.X[r, i], bundle.Y[r, i], bundle.u[r, i],
                        bundle.flow[r, i], jumps))
    return out

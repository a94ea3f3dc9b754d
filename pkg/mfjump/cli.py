"""
Batch front end: `python -m mfjump {simulate,delta,compare,converge} --config run.cfg`.

A run file is flat `key = value` lines with '#' comments. Keys:

    model        example1 | example2 | inline                       (required)
    a, b, c      example1/example2 constants (defaults per model)
    drift_b0 ... semi-linear constants for model = inline (see model.SEMI_LINEAR_KEYS)
    x0, T, nu    initial value, horizon, jump intensity
    payoff       european_call | digital | up_and_out_call | down_and_out_call
                 | smoothed_call | identity | constant
    K, B         strike (default: f(T)) and barrier (default: 1.5 x0 up, x0 / 1.5 down)
    epsilon      smoothed_call width;  ramp: digital ramp half-width
    dt, n_paths, seed, h_fd, fd_mode, methods, skorokhod, compensated
    dt_list, quantity, r_time, z     converge only
    trace, trace_paths, record_runtime
"""

import argparse
import logging
import math
import os
import sys
from dataclasses import dataclass, field, replace
from typing import Optional

from colorama import Fore, Style
from colorama import just_fix_windows_console

from . import config
from .greeks import (FD_MODES, QUANTITIES, delta_fd_central, delta_flow_pathwise, delta_malliavin,
                     convergence_study, variance_report)
from .model import (BUILTIN_MODELS, SEMI_LINEAR_KEYS, MeanFieldError, ModelError, builtin_example,
                    semi_linear_spec, solve_mean_ode, spec_to_params, uniform_grid)
from .payoffs import PAYOFF_KINDS, Payoff, PayoffError
from .report import (COMPARE_COLUMNS, CONVERGE_COLUMNS, ESTIMATE_COLUMNS, TRACE_COLUMNS,
                     compare_row, converge_rows, estimate_row, trace_rows, write_csv)
from .simulate import sample_noise, simulate_paths
from .weights import SKOROKHOD_EVALUATORS

logger = logging.getLogger(__name__)

COMMANDS = ("simulate", "delta", "compare", "converge")
METHOD_NAMES = ("malliavin", "flow_pathwise", "fd_central")
EXAMPLE_KEYS = ("a", "b", "c", "x0", "T", "nu")
DEFAULT_DT_LIST = (2.0 ** -5, 2.0 ** -6, 2.0 ** -7, 2.0 ** -8, 2.0 ** -9)

_NUMERIC = {"dt", "h_fd", "K", "B", "epsilon", "ramp", "r_time", "z"}
_INTEGER = {"n_paths", "seed", "trace_paths"}
_BOOLEAN = {"compensated", "trace", "record_runtime"}
_CHOICE = {"payoff": PAYOFF_KINDS, "fd_mode": FD_MODES, "skorokhod": SKOROKHOD_EVALUATORS,
           "quantity": QUANTITIES}
_RUN_KEYS = ({"model", "methods", "dt_list"} | _NUMERIC | _INTEGER | _BOOLEAN | set(_CHOICE))


class ConfigError(MeanFieldError):
    """Raised for an invalid run configuration; carries the 1-based line number (0 if none)."""

    def __init__(self, message: str, line: int = 0):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


def parse_number(text: str) -> float:
    """
    A real written as a decimal or as a power of two.

    >>> parse_number("2^-12") == 2.0 ** -12
    True
    >>> parse_number("1e-3")
    0.001
    """
    text = text.strip()
    for sep in ("^", "**"):
        if sep in text:
            base, _, exponent = text.partition(sep)
            return float(base) ** int(exponent)
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(text)
    return value


@dataclass(frozen=True)
class RunConfig:
    """A validated run; `None` strike/barrier are resolved against the mean function."""
    model: str
    model_params: tuple = ()
    payoff: str = "european_call"
    K: Optional[float] = None
    B: Optional[float] = None
    epsilon: float = config.DEFAULT_SMOOTHING
    ramp: float = config.DEFAULT_DIGITAL_RAMP
    dt: float = config.DEFAULT_DT
    n_paths: int = config.DEFAULT_N_PATHS
    seed: int = config.DEFAULT_SEED
    h_fd: float = config.DEFAULT_H_FD
    fd_mode: str = "central"
    methods: tuple = ()
    skorokhod: str = "exact"
    compensated: bool = True
    dt_list: tuple = DEFAULT_DT_LIST
    quantity: str = "state"
    r_time: Optional[float] = None
    z: Optional[float] = None
    trace: bool = False
    trace_paths: int = 1
    record_runtime: bool = False
    lines: dict = field(default_factory=dict, compare=False, repr=False)

    # --- model ---

    def model_settings(self) -> dict:
        """Model constants with every default spelled out."""
        params = dict(self.model_params)
        if self.model == "inline":
            return spec_to_params(self.build_spec())
        a = -1.0 if self.model == "example2" else 1.0
        defaults = {"a": a, "b": 1.0, "c": 1.0, "x0": 1.0, "T": 1.0, "nu": 0.1}
        return {key: params.get(key, value) for key, value in defaults.items()}

    def build_spec(self):
        params = dict(self.model_params)
        try:
            if self.model == "inline":
                return semi_linear_spec(name="inline", **params)
            return builtin_example(self.model, a=params.get("a"), b=params.get("b", 1.0),
                                   c=params.get("c", 1.0), x0=params.get("x0", 1.0),
                                   nu=params.get("nu", 0.1), horizon=params.get("T", 1.0)).spec
        except ModelError as exc:
            raise ConfigError(str(exc), self.lines.get("model", 0)) from exc

    def grid(self, spec):
        try:
            return uniform_grid(spec.horizon, self.dt)
        except ModelError as exc:
            raise ConfigError(str(exc), self.lines.get("dt", 0)) from exc

    def resolved(self, spec, mf, command: str = "delta") -> "RunConfig":
        """Fill the strike, barrier, payoff and method list that depend on the model."""
        payoff = self.payoff
        if command == "converge" and self.quantity == "delta_barrier" \
                and payoff not in ("up_and_out_call", "down_and_out_call"):
            payoff = "up_and_out_call"
        K = float(mf.values[-1]) if self.K is None else self.K
        B = self.B
        if B is None and payoff == "up_and_out_call":
            B = config.DEFAULT_BARRIER_FACTOR * spec.x0
        elif B is None and payoff == "down_and_out_call":
            B = spec.x0 / config.DEFAULT_BARRIER_FACTOR
        methods = self.methods
        if not methods:
            methods = ("malliavin", "fd_central") if payoff == "digital" else METHOD_NAMES
        return replace(self, payoff=payoff, K=K, B=B, methods=methods)

    def build_payoff(self) -> Payoff:
        try:
            return Payoff(self.payoff, self.K, self.B, smoothing=self.epsilon, ramp=self.ramp)
        except PayoffError as exc:
            raise ConfigError(str(exc), self.lines.get("payoff", self.lines.get("K", 0))) from exc

    def settings(self, command: str) -> dict:
        """Everything that determines the output of `command`, in header order."""
        out = {"command": command, "model": self.model}
        out.update(self.model_settings())
        if command != "simulate":
            out.update(payoff=self.payoff, K=self.K, B=self.B)
            if self.payoff == "smoothed_call":
                out["epsilon"] = self.epsilon
            if self.payoff == "digital":
                out["ramp"] = self.ramp
        out.update(dt=self.dt, n_paths=self.n_paths, seed=self.seed, compensated=self.compensated)
        if command in ("delta", "compare"):
            out.update(h_fd=self.h_fd, fd_mode=self.fd_mode, skorokhod=self.skorokhod,
                       methods=",".join(self.methods))
        if command == "converge":
            out.update(quantity=self.quantity, dt_list=",".join(repr(d) for d in self.dt_list),
                       skorokhod=self.skorokhod, r_time=self.r_time, z=self.z)
        if command == "simulate" or self.trace:
            out.update(trace=self.trace, trace_paths=self.trace_paths)
        out["record_runtime"] = self.record_runtime
        return out


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(text)


def parse_config(text: str) -> RunConfig:
    """
    Parse and validate a run file.

    Raises:
        ConfigError: unknown or duplicate keys, malformed values, non-positive
            dt / n_paths, a missing model selector, an r_time outside [0, T];
            the message carries the line.
    """
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got '{raw.strip()}'", lineno)
        if key == "command":
            if value not in COMMANDS:
                raise ConfigError(f"unknown command '{value}'", lineno)
            continue
        if key in values:
            raise ConfigError(f"duplicate key '{key}'", lineno)
        values[key] = value
        lines[key] = lineno

    if "model" not in values:
        raise ConfigError("model selector required")
    model = values.pop("model")
    allowed_model = set(SEMI_LINEAR_KEYS) if model == "inline" else set(EXAMPLE_KEYS)
    if model != "inline" and model not in BUILTIN_MODELS:
        raise ConfigError(f"unknown model '{model}'", lines["model"])

    kwargs, params = {}, []
    for key, value in values.items():
        at = lines[key]
        try:
            if key in allowed_model:
                params.append((key, parse_number(value)))
            elif key not in _RUN_KEYS:
                raise ConfigError(f"unknown key '{key}'", at)
            elif key in _NUMERIC:
                kwargs[key] = parse_number(value)
            elif key in _INTEGER:
                number = parse_number(value)
                if number != int(number):
                    raise ValueError(value)
                kwargs[key] = int(number)
            elif key in _BOOLEAN:
                kwargs[key] = _parse_bool(value)
            elif key in _CHOICE:
                if value not in _CHOICE[key]:
                    raise ConfigError(f"{key} must be one of {_CHOICE[key]}, got '{value}'", at)
                kwargs[key] = value
            elif key == "methods":
                methods = tuple(m.strip() for m in value.split(",") if m.strip())
                unknown = [m for m in methods if m not in METHOD_NAMES]
                if unknown or not methods:
                    raise ConfigError(f"methods must be drawn from {METHOD_NAMES}", at)
                kwargs[key] = methods
            elif key == "dt_list":
                kwargs[key] = tuple(parse_number(v) for v in value.split(",") if v.strip())
        except (ValueError, OverflowError):
            raise ConfigError(f"malformed value for {key}: '{value}'", at) from None

    for key in ("dt", "h_fd", "epsilon", "ramp"):
        if key in kwargs and not kwargs[key] > 0:
            raise ConfigError(f"{key} must be positive", lines[key])
    if "n_paths" in kwargs and kwargs["n_paths"] < 1:
        raise ConfigError("n_paths must be positive", lines["n_paths"])
    if "trace_paths" in kwargs and kwargs["trace_paths"] < 1:
        raise ConfigError("trace_paths must be positive", lines["trace_paths"])
    if "seed" in kwargs and not 0 <= kwargs["seed"] < 2 ** 64:
        raise ConfigError("seed must be a 64-bit unsigned integer", lines["seed"])
    if "dt_list" in kwargs and any(d <= 0 for d in kwargs["dt_list"]):
        raise ConfigError("dt_list entries must be positive", lines["dt_list"])

    cfg = RunConfig(model=model, model_params=tuple(params), lines=lines, **kwargs)
    spec = cfg.build_spec()
    cfg.grid(spec)
    if cfg.r_time is not None and not 0.0 <= cfg.r_time <= spec.horizon:
        raise ConfigError(f"r_time must lie in [0, {spec.horizon:g}]", lines["r_time"])
    return cfg


# ----------------------------
# Commands
# ----------------------------

def _out(name: str) -> str:
    return os.path.join(config.OUTPUT_DIR, name)


def _write_trace(cfg: RunConfig, spec, mf, grid) -> str:
    noise = sample_noise(spec, grid, cfg.seed, range(cfg.trace_paths))
    bundle = simulate_paths(spec, mf, noise, cfg.compensated)
    return write_csv(_out(config.TRACE_FILE), cfg.settings("simulate"), TRACE_COLUMNS,
                     trace_rows(bundle, range(cfg.trace_paths)))


def _estimates(cfg: RunConfig, spec, mf, grid, payoff, methods):
    out = []
    for method in methods:
        if method == "malliavin":
            out.append(delta_malliavin(spec, mf, payoff, cfg.n_paths, grid, cfg.seed,
                                       cfg.compensated, cfg.skorokhod))
        elif method == "flow_pathwise":
            out.append(delta_flow_pathwise(spec, mf, payoff, cfg.n_paths, grid, cfg.seed,
                                           cfg.compensated))
        else:
            out.append(delta_fd_central(spec, None, payoff, cfg.n_paths, grid, cfg.seed,
                                        cfg.h_fd, cfg.fd_mode, compensated=cfg.compensated))
    return out


def run_command(cmd: str, cfg: RunConfig) -> int:
    """
    Run one command and write its CSV under config.OUTPUT_DIR.

    Returns:
        int: 0 on success. Errors propagate; `main` maps them to exit codes.
    """
    if cmd not in COMMANDS:
        raise ConfigError(f"unknown command '{cmd}'")
    spec = cfg.build_spec()
    grid = cfg.grid(spec)
    mf = solve_mean_ode(spec, grid)
    cfg = cfg.resolved(spec, mf, cmd)
    logger.info("%s on %s: dt = %g, %d paths, seed %d", cmd, spec.name, cfg.dt, cfg.n_paths, cfg.seed)

    if cmd == "simulate":
        _write_trace(cfg, spec, mf, grid)
        return 0

    if cmd == "converge":
        payoff = cfg.build_payoff() if cfg.quantity.startswith("delta") else None
        result = convergence_study(spec, None, cfg.quantity, cfg.dt_list, cfg.n_paths, cfg.seed,
                                   payoff=payoff, r_time=cfg.r_time, z=cfg.z,
                                   compensated=cfg.compensated, evaluator=cfg.skorokhod)
        write_csv(_out(config.CONVERGE_FILE), cfg.settings(cmd), CONVERGE_COLUMNS,
                  converge_rows(result))
        return 0

    payoff = cfg.build_payoff()
    if cmd == "delta":
        estimates = _estimates(cfg, spec, mf, grid, payoff, cfg.methods)
        write_csv(_out(config.DELTA_FILE), cfg.settings(cmd), ESTIMATE_COLUMNS,
                  [estimate_row(e, cfg.record_runtime) for e in estimates])
    else:
        # finite differences first: every ratio reads Var(method) / Var(fd)
        order = ["fd_central"] + [m for m in cfg.methods if m != "fd_central"]
        if payoff.discontinuous and "flow_pathwise" in order:
            order.remove("flow_pathwise")
        estimates = _estimates(cfg, spec, mf, grid, payoff, order)
        rows = variance_report(estimates)
        write_csv(_out(config.COMPARE_FILE), cfg.settings(cmd), COMPARE_COLUMNS,
                  [compare_row(r, cfg.record_runtime) for r in rows])
    if cfg.trace:
        _write_trace(cfg, spec, mf, grid)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mfjump", description="Malliavin Delta for mean-field SDEs with jumps")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="run file (key = value lines)")
    ap.add_argument("--out", default=None, help=f"output directory (default {config.OUTPUT_DIR})")
    ap.add_argument("--seed", type=int, default=None, help="master seed, overrides the run file")
    ap.add_argument("--trace", action="store_true", help="also write the per-path trace CSV")
    ap.add_argument("--fd-mode", choices=FD_MODES, default=None)
    ap.add_argument("--uncompensated-euler", action="store_true",
                    help="apply jumps without subtracting the compensator")
    ap.add_argument("--threads", type=int, default=None, help="path worker threads")
    ap.add_argument("--verbose", action="store_true")
    return ap


def _fail(message: str) -> None:
    print(f"{Fore.RED}mfjump: {message}{Style.RESET_ALL}", file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    just_fix_windows_console()
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s - %(levelname)s - %(message)s")
    try:
        try:
            with open(args.config) as f:
                text = f.read()
        except OSError as exc:
            raise ConfigError(f"cannot read {args.config}: {exc.strerror}") from exc
        cfg = parse_config(text)
        overrides = {}
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError("seed must be a 64-bit unsigned integer")
            overrides["seed"] = args.seed
        if args.trace:
            overrides["trace"] = True
        if args.fd_mode:
            overrides["fd_mode"] = args.fd_mode
        if args.uncompensated_euler:
            overrides["compensated"] = False
        cfg = replace(cfg, **overrides)
        if args.out:
            config.OUTPUT_DIR = args.out
        if args.threads:
            config.WORKER_THREADS = args.threads
        return run_command(args.command, cfg)
    except ConfigError as exc:
        _fail(str(exc))
        return 2
    except (MeanFieldError, OSError) as exc:
        _fail(str(exc))
        return 1
    except Exception as exc:
        logger.debug("unexpected failure", exc_info=True)
        _fail(f"{type(exc).__name__}: {exc}")
        return 1

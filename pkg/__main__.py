from time import process_time

from mfjump.greeks import delta_fd_central, delta_flow_pathwise, delta_malliavin
from mfjump.model import builtin_example, solve_mean_ode, uniform_grid
from mfjump.payoffs import Payoff
from mfjump.simulate import sample_noise, simulate_paths

# Example 2 (b = -rho, C = 1, F = 1, nu = 0.1) on a 2^-10 grid
spec = builtin_example("example2").spec
grid = uniform_grid(spec.horizon, 2.0 ** -10)
mf = solve_mean_ode(spec, grid)
call = Payoff("european_call", 0.5)
n = 2000

# Measuring noise generation
noise_time_0 = process_time()
noise = sample_noise(spec, grid, 0, range(n))
noise_time_1 = process_time()
print("Drawing noise for 2k paths took:  \t\t", noise_time_1 - noise_time_0)

# Measuring X, Y, u simulation
sim_time_0 = process_time()
bundle = simulate_paths(spec, mf, noise)
sim_time_1 = process_time()
print("Simulating 2k paths took:  \t\t\t", sim_time_1 - sim_time_0)

# Measuring the Malliavin estimator
mall_time_0 = process_time()
mall = delta_malliavin(spec, mf, call, n, grid, 0)
mall_time_1 = process_time()
print("Malliavin delta on 2k paths took:  \t\t", mall_time_1 - mall_time_0)

# Measuring the pathwise estimator
flow_time_0 = process_time()
flow = delta_flow_pathwise(spec, mf, call, n, grid, 0)
flow_time_1 = process_time()
print("Pathwise delta on 2k paths took:  \t\t", flow_time_1 - flow_time_0)

# Measuring central finite differences
fd_time_0 = process_time()
fd = delta_fd_central(spec, None, call, n, grid, 0)
fd_time_1 = process_time()
print("Central FD delta on 2k paths took:  \t\t", fd_time_1 - fd_time_0)

for est in (mall, flow, fd):
    print(f"{est.method:<14} {est.mean:.5f} +/- {est.stderr:.5f}")

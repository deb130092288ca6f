"""Relative cost and violations of the fixed baselines on the test weeks."""
import numpy as np

from koopman_mbpo import bench, cstr
from koopman_mbpo.prices import synthetic_prices

prices = synthetic_prices()
policies = {
    "steady state": bench.ConstantPolicy(),
    "zero feed": bench.ConstantPolicy([1.0, 0.0]),
    "full feed": bench.ConstantPolicy([1.0, cstr.ACTION_UB[1]]),
    "random": bench.RandomPolicy(0),
}
print(f"{'policy':14s} {'rel. cost':>10s} {'violations':>11s} {'reward':>10s}")
for name, policy in policies.items():
    m = bench.evaluate(policy, prices, n_windows=10)
    print(f"{name:14s} {m.relative_cost.mean():10.4f} {m.violations.mean():11.1f} "
          f"{m.reward.mean():10.2f}")

# the denominator is just the price sum at the nominal feed
assert np.allclose(m.nominal_cost, bench.nominal_costs(prices, 10))

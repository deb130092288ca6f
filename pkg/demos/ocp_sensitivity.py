"""Solve one economic OCP and show how the first move reacts to the bound offsets."""
import numpy as np

from koopman_mbpo import koopman, ocp

kparams = koopman.init_koopman(0)
prices = 40 + 25 * np.sin(np.arange(10) / 10 * 2 * np.pi)
# storage follows the dosing deviation, so lifting the floor above the
# current level forces extra production early in the horizon
theta = np.array([0.0, 0.0, 0.0, 0.0, 3.1, 0.0])
inst = ocp.OcpInstance.from_state(kparams, [0.0, 0.0], 3.0, prices, theta)
qp, sol = ocp.solve_instance(inst)
print("status", sol.status, "objective", round(sol.objective, 4))
print("planned controls (scaled):")
print(np.round(sol.controls, 3))
print("storage plan:", np.round(sol.storage, 3))

J, degenerate = ocp.grad_theta_B(qp, sol)
print("d u*/d theta (rows rho, F; cols", ", ".join(ocp.THETA_NAMES) + ")")
print(np.round(J, 4), "degenerate" if degenerate else "")

# check one column against a central difference
h, j = 1e-5, 4
e = np.zeros(6)
e[j] = h
_, a = ocp.solve_instance(ocp.OcpInstance.from_state(kparams, [0.0, 0.0], 3.0, prices, theta + e))
_, b = ocp.solve_instance(ocp.OcpInstance.from_state(kparams, [0.0, 0.0], 3.0, prices, theta - e))
print("finite difference:", np.round((a.u_star - b.u_star) / (2 * h), 4))

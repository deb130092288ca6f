"""Sample-efficient training of Koopman economic MPC controllers for a CSTR
demand-response task: plant simulation, Koopman system identification, a
differentiable convex MPC layer, a physics-informed model ensemble, and a
Dyna-style PPO training loop."""

__version__ = "0.1.0"

"""Desk-scale comparison: the main variant against SI only, one seed.

Usage: python demos/train_desk.py [seed] [out_dir]
Takes roughly 10-15 minutes on one core.
"""
import sys

from koopman_mbpo import bench, mbpo
from koopman_mbpo.config import preset

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
out = sys.argv[2] if len(sys.argv) > 2 else "runs/desk"


def progress(run):
    h = run.history[-1]
    print(f"  it {run.iteration:2d}  steps {run.steps:4d}  theta_B {[round(v, 3) for v in h['theta_B']]}",
          flush=True)


results = {}
for variant in ("si_koop", "main"):
    print(variant)
    cfg = preset("desk", variant=variant, seed=seed)
    run = mbpo.run_training(cfg, f"{out}/{variant}_seed{seed}", progress)
    m = bench.evaluate(run.policy, run.prices, cfg.eval.windows, cfg.eval.steps)
    results[variant] = m
    print(f"  relative cost {m.relative_cost.mean():.4f}  violations/week {m.violations.mean():.1f}")

n = bench.export_theta_b_history(f"{out}/main_seed{seed}", f"{out}/theta_B_seed{seed}.csv")
print(f"theta_B history: {n} rows in {out}/theta_B_seed{seed}.csv")

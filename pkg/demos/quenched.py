"""Quenched behaviour: one environment, many walkers.

The two-state model has jumps fixed by the site state, so every walker in an
environment follows the same path. Adding noise to the jumps lets walkers
separate; in two dimensions the per-environment law is already close to the
annealed Gaussian at moderate n.
"""

import numpy as np

from rwdre import builtin_model, sim, stats
from rwdre.limits import diffusion_report

n, walkers, envs = 2000, 1000, 30
for name in ("two_state", "noisy_two_state", "plane2d"):
    model = builtin_model(name)
    rep, _ = diffusion_report(model)
    runs = sim.run_quenched_batch(model, n, walkers, envs, env_seed=11, walker_seed=12)
    distinct = np.mean([len(np.unique(r.positions, axis=0)) for r in runs])
    v = stats.test_quenched_clt(runs, rep)
    print(f"{name:16s} distinct endpoints per environment {distinct:7.1f}  "
          f"rejected {v.rejections:2d}/{envs}  uniformity p {v.uniformity_p:.2g}")

"""Exact law of S_n for the two-state model against a Monte Carlo histogram."""

import numpy as np

from rwdre import builtin_model, sim
from rwdre.pathlaw import enumerate_walk_law

model = builtin_model("two_state")
n = 6
law = enumerate_walk_law(model, n).as_dict()
run = sim.run_annealed(model, n, 10**6, seed=1)
vals, counts = np.unique(run.positions[:, 0], return_counts=True)
freq = dict(zip(vals.tolist(), counts / run.replicas))

print(f"{'x':>4} {'exact':>12} {'monte carlo':>12} {'z':>6}")
for (x,), p in sorted(law.items()):
    se = np.sqrt(p * (1 - p) / run.replicas)
    f = freq.get(x, 0.0)
    print(f"{x:>4} {p:12.6f} {f:12.6f} {(f - p) / se:6.2f}")

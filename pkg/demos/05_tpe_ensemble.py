"""
Fusing score matrices with a Parzen-estimator search
====================================================

Several models each produce a query-by-gallery score matrix. A weighted
sum of them can rank targets better than any one model. The weights are
searched with a Tree-structured Parzen Estimator, and the iterative
variant feeds each round's best fused matrix back in as a new candidate.
"""

import numpy as np

from rticlab.datastore import GroundTruth, ScoreMatrix
from rticlab.ensemble import EnsemblePool, EvalTarget, TpeSettings, iterative_ensemble, tpe_optimize

rng = np.random.default_rng(1)
q, g = 80, 100
qids = [f"q{i:03d}" for i in range(q)]
gids = [f"g{j:03d}" for j in range(g)]
targets = rng.integers(g, size=q)
truth = GroundTruth({qq: gids[t] for qq, t in zip(qids, targets)},
                    {qq: ("dress", "shirt", "toptee")[i % 3] for i, qq in enumerate(qids)})

# two partially informative models with independent errors, plus pure noise
mats = []
for strength in (1.2, 1.0, 0.0):
    S = rng.normal(size=(q, g))
    S[np.arange(q), targets] += strength * 2.0
    mats.append(ScoreMatrix(qids, gids, S))
pool = EnsemblePool(["model_a", "model_b", "noise"], mats)
target = EvalTarget(truth)

for name, m in zip(pool.names, pool.matrices):
    print(f"{name:>8}: objective {target.objective(m):6.2f}")

res = tpe_optimize(pool, target, seed=0, settings=TpeSettings(n_trials=150))
print(f"\nTPE fused: objective {res.objective:6.2f}, weights {np.round(res.weights, 3)}")

_, rounds = iterative_ensemble(pool, target, rounds=3, seed=0,
                               settings=TpeSettings(n_trials=60), stop_eps=0.05)
for r in rounds:
    print(f"round {r.round}: {r.result.objective:6.2f} over {r.pool_names}")

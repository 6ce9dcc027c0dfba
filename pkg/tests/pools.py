"""Synthetic score-matrix pools shared by the ensemble tests."""

import numpy as np

from rticlab.datastore import GroundTruth, ScoreMatrix
from rticlab.ensemble import EnsemblePool


def planted_pool(seed, q=60, g=80, n_noise=2, signal=1.0):
    """One matrix that ranks each target highly plus pure-noise matrices."""
    rng = np.random.default_rng(seed)
    qids = [f"q{i:03d}" for i in range(q)]
    gids = [f"g{j:03d}" for j in range(g)]
    targets = rng.integers(g, size=q)
    cats = ["shirt", "dress", "toptee"]
    truth = GroundTruth({qq: gids[t] for qq, t in zip(qids, targets)},
                        {qq: cats[i % 3] for i, qq in enumerate(qids)})
    inf = rng.normal(size=(q, g))
    inf[np.arange(q), targets] += signal * 2.5
    mats = [ScoreMatrix(qids, gids, inf)]
    mats += [ScoreMatrix(qids, gids, rng.normal(size=(q, g))) for _ in range(n_noise)]
    return EnsemblePool(["informative"] + [f"noise{i}" for i in range(n_noise)], mats), truth

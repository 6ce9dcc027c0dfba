"""Weighted score-matrix fusion searched with a Tree-structured Parzen Estimator.

The search space is ``[0, 1]^n`` (one weight per candidate matrix) and the
objective, ``(R@10 + R@50) / 2``, is maximized. ``iterative_ensemble``
re-enters the best fused matrix of each round as an extra candidate for
the next one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import log_ndtr, logsumexp, ndtr, ndtri

from .datastore import GroundTruth, ScoreMatrix
from .metrics import ensemble_objective, evaluate
from .model import rng_for

PRIOR_MU = 0.5
PRIOR_SIGMA = 1.0


class AlignmentError(ValueError):
    pass


@dataclass
class EnsemblePool:
    names: list[str]
    matrices: list[ScoreMatrix]

    def __post_init__(self):
        if not self.matrices:
            raise ValueError("ensemble pool is empty")
        if len(self.names) != len(self.matrices):
            raise ValueError("one name per matrix")
        first = self.matrices[0]
        for name, m in zip(self.names, self.matrices):
            if not m.aligned_with(first):
                raise AlignmentError(f"{name}: query/gallery ids differ from {self.names[0]}")

    def __len__(self):
        return len(self.matrices)

    def extended(self, name: str, m: ScoreMatrix) -> "EnsemblePool":
        return EnsemblePool(self.names + [name], self.matrices + [m])


@dataclass
class TrialRecord:
    weights: np.ndarray
    objective: float

    def __post_init__(self):
        if not math.isfinite(self.objective):
            raise ValueError("trial objective must be finite")


def zscore_rows(m: ScoreMatrix) -> ScoreMatrix:
    v = m.values - m.values.mean(axis=1, keepdims=True)
    sd = v.std(axis=1, keepdims=True)
    return ScoreMatrix(m.query_ids, m.gallery_ids, np.divide(v, sd, out=v.copy(), where=sd > 0))


def weighted_sum(pool: EnsemblePool, w, zscore: bool = False) -> ScoreMatrix:
    """``sum_i w_i * H_i`` over raw scores (or per-row z-scores)."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (len(pool),):
        raise ValueError(f"{w.size} weights for a pool of {len(pool)}")
    mats = [zscore_rows(m) for m in pool.matrices] if zscore else pool.matrices
    acc = w[0] * mats[0].values
    for wi, m in zip(w[1:], mats[1:]):
        acc = acc + wi * m.values
    first = pool.matrices[0]
    return ScoreMatrix(list(first.query_ids), list(first.gallery_ids), acc)


# ---------------------------------------------------------------------------
# Parzen estimators on [0, 1]
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Parzen:
    """Equal-weight mixture of Gaussians truncated to [0, 1]."""
    mus: np.ndarray
    sigmas: np.ndarray

    def _log_mass(self):
        hi = log_ndtr((1.0 - self.mus) / self.sigmas)
        lo = log_ndtr((0.0 - self.mus) / self.sigmas)
        return hi + np.log1p(-np.exp(np.minimum(lo - hi, -1e-300)))

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)[:, None]
        z = (x - self.mus) / self.sigmas
        comp = (-0.5 * z * z - 0.5 * np.log(2 * np.pi) - np.log(self.sigmas)
                - self._log_mass())
        return logsumexp(comp, axis=1) - np.log(len(self.mus))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        k = rng.integers(len(self.mus), size=n)
        mu, sd = self.mus[k], self.sigmas[k]
        lo, hi = ndtr((0.0 - mu) / sd), ndtr((1.0 - mu) / sd)
        u = lo + rng.uniform(size=n) * (hi - lo)
        return np.clip(mu + sd * ndtri(u), 0.0, 1.0)


def fit_parzen(samples: Sequence[float]) -> Parzen:
    """Kernels at each sample plus a broad prior kernel at 0.5.

    Each sample's bandwidth is the larger gap to its sorted neighbours (the
    interval ends count as neighbours), floored at ``1 / min(100, n)`` and
    capped at 1.
    """
    xs = np.sort(np.asarray(samples, dtype=np.float64))
    n = xs.size
    if n == 0:
        return Parzen(np.array([PRIOR_MU]), np.array([PRIOR_SIGMA]))
    padded = np.concatenate([[0.0], xs, [1.0]])
    gaps = np.maximum(padded[1:-1] - padded[:-2], padded[2:] - padded[1:-1])
    floor = 1.0 / min(100, n)
    sig = np.clip(gaps, floor, 1.0)
    return Parzen(np.append(xs, PRIOR_MU), np.append(sig, PRIOR_SIGMA))


def split_history(history: Sequence[TrialRecord], gamma: float):
    """Indices of the top ``ceil(gamma * n)`` trials (ties by trial order) and the rest."""
    n = len(history)
    n_good = min(n, max(1, math.ceil(gamma * n)))
    order = sorted(range(n), key=lambda i: (-history[i].objective, i))
    return order[:n_good], order[n_good:]


def tpe_suggest(history: Sequence[TrialRecord], n_dims: int, rng: np.random.Generator,
                gamma: float = 0.25, n_candidates: int = 24, n_startup: int = 20) -> np.ndarray:
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    if len(history) < max(n_startup, 2):
        return rng.uniform(size=n_dims)
    good, bad = split_history(history, gamma)
    W = np.array([h.weights for h in history])
    cands = np.empty((n_candidates, n_dims))
    score = np.zeros(n_candidates)
    for d in range(n_dims):
        l = fit_parzen(W[good, d])
        g = fit_parzen(W[bad, d])
        cands[:, d] = l.sample(n_candidates, rng)
        score += l.log_pdf(cands[:, d]) - g.log_pdf(cands[:, d])
    return cands[int(np.argmax(score))]


# ---------------------------------------------------------------------------
# Optimization loops
# ---------------------------------------------------------------------------

@dataclass
class EvalTarget:
    """What a fused matrix is scored against."""
    truth: GroundTruth
    gallery_categories: Mapping[str, str] | None = None
    ks: tuple[int, int] = (10, 50)

    def objective(self, m: ScoreMatrix) -> float:
        return ensemble_objective(evaluate(m, self.truth, self.gallery_categories, self.ks))


@dataclass
class TpeSettings:
    n_trials: int = 200
    gamma: float = 0.25
    n_candidates: int = 24
    n_startup: int = 20
    zscore: bool = False


@dataclass
class TpeResult:
    weights: np.ndarray
    matrix: ScoreMatrix
    objective: float
    history: list[TrialRecord] = field(default_factory=list)


def tpe_optimize(pool: EnsemblePool, target: EvalTarget | GroundTruth, seed: int,
                 settings: TpeSettings | None = None, initial: Sequence[Sequence[float]] = (),
                 rng: np.random.Generator | None = None) -> TpeResult:
    """Search fusion weights; ``initial`` weight vectors are evaluated first."""
    settings = settings or TpeSettings()
    if settings.n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if isinstance(target, GroundTruth):
        target = EvalTarget(target)
    rng = rng if rng is not None else rng_for(seed, "tpe")
    history: list[TrialRecord] = []
    best = None
    for t in range(settings.n_trials):
        if t < len(initial):
            w = np.asarray(initial[t], dtype=np.float64)
        else:
            w = tpe_suggest(history, len(pool), rng, settings.gamma,
                            settings.n_candidates, settings.n_startup)
        H = weighted_sum(pool, w, settings.zscore)
        obj = target.objective(H)
        history.append(TrialRecord(w, obj))
        if best is None or obj > best[2]:
            best = (w, H, obj)
    return TpeResult(best[0], best[1], best[2], history)


@dataclass
class RoundRecord:
    round: int
    pool_names: list[str]
    result: TpeResult


def iterative_ensemble(pool: EnsemblePool, target: EvalTarget | GroundTruth, rounds: int = 3,
                       seed: int = 0, settings: TpeSettings | None = None,
                       stop_eps: float = 0.05) -> tuple[ScoreMatrix, list[RoundRecord]]:
    """Repeat TPE fusion, adding each round's best matrix to the pool.

    From round 2 on, trial 0 puts all weight on the previous best matrix, so
    the objective can never drop between rounds. Stops after ``rounds`` or
    as soon as a round gains less than ``stop_eps``.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    settings = settings or TpeSettings()
    records = []
    current = pool
    best = None
    for r in range(1, rounds + 1):
        initial = ()
        if best is not None:
            current = current.extended(f"best_round{r - 1}", best.matrix)
            initial = [np.eye(len(current))[-1]]
        res = tpe_optimize(current, target, seed, settings, initial,
                           rng=rng_for(seed, "tpe", r))
        records.append(RoundRecord(r, list(current.names), res))
        gain = math.inf if best is None else res.objective - best.objective
        best = res
        if gain < stop_eps:
            break
    return best.matrix, records


def write_history(records: Sequence[RoundRecord], path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            for t, trial in enumerate(rec.result.history):
                row = {"round": rec.round, "trial": t, "objective": trial.objective,
                       "weights": dict(zip(rec.pool_names, (float(x) for x in trial.weights)))}
                fh.write(json.dumps(row, sort_keys=True) + "\n")

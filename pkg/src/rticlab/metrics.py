"""Score matrices and recall@K as reported per category."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .datastore import (CATEGORIES, FeatureStore, GroundTruth, MissingIdError, RecallReport,
                        ScoreMatrix, TripletRecord)
from .textprep import pad_batch


def cosine_matrix(Q: np.ndarray, G: np.ndarray) -> np.ndarray:
    Qn = Q / np.linalg.norm(Q, axis=1, keepdims=True)
    Gn = G / np.linalg.norm(G, axis=1, keepdims=True)
    return np.clip(Qn @ Gn.T, -1.0, 1.0)


def build_score_matrix(model, queries: Sequence[TripletRecord], gallery: FeatureStore,
                       captions, ir_gallery: FeatureStore | None = None,
                       batch_size: int = 256) -> ScoreMatrix:
    """Cosine similarity of every composed query against every gallery item.

    ``captions`` is a :class:`~rticlab.training.CaptionCache` (no shuffling
    at evaluation). IR-match models score against ``ir_gallery`` features
    directly.
    """
    for r in queries:
        if r.candidate_id not in gallery:
            raise MissingIdError(f"query {r.qid}: unknown candidate {r.candidate_id!r}")
    gallery_ids = gallery.ids
    if model.cfg.kind == "ir_match":
        if ir_gallery is None:
            raise ValueError("IR-match scoring needs IR gallery features")
        G = ir_gallery.matrix(gallery_ids)
    else:
        G = model.gallery(gallery.matrix()).value
    rows = []
    for start in range(0, len(queries), batch_size):
        chunk = queries[start:start + batch_size]
        ids, mask = pad_batch([captions.encode(r.captions) for r in chunk])
        x_c = gallery.matrix([r.candidate_id for r in chunk])
        rows.append(model.query(x_c, ids, mask).value)
    return ScoreMatrix([r.qid for r in queries], gallery_ids, cosine_matrix(np.vstack(rows), G))


def target_ranks(m: ScoreMatrix, truth: GroundTruth) -> np.ndarray:
    """1-based rank of each query's target: score descending, ties by gallery id."""
    col = {g: j for j, g in enumerate(m.gallery_ids)}
    try:
        tcol = np.array([col[truth.target[q]] for q in m.query_ids])
    except KeyError as exc:
        raise MissingIdError(f"no ground truth / gallery entry for {exc}") from None
    ids = np.array(m.gallery_ids, dtype=object)
    rows = np.arange(len(m.query_ids))
    s_t = m.values[rows, tcol][:, None]
    above = m.values > s_t
    tied_before = (m.values == s_t) & (ids[None, :] < ids[tcol][:, None])
    return 1 + above.sum(axis=1) + tied_before.sum(axis=1)


def recall_at_k(m: ScoreMatrix, truth: GroundTruth, k: int) -> float:
    g = len(m.gallery_ids)
    if not 1 <= k <= g:
        raise ValueError(f"k={k} outside [1, {g}]")
    ranks = target_ranks(m, truth)
    return 100.0 * int(np.count_nonzero(ranks <= k)) / ranks.size


def split_by_category(m: ScoreMatrix, truth: GroundTruth,
                      gallery_categories: Mapping[str, str] | None = None
                      ) -> dict[str, tuple[ScoreMatrix, GroundTruth]]:
    """One sub-matrix per category of query.

    With ``gallery_categories`` each category is ranked only against gallery
    items of the same category; otherwise against the full gallery.
    """
    out = {}
    for cat in CATEGORIES:
        rows = [i for i, q in enumerate(m.query_ids) if truth.category.get(q) == cat]
        if not rows:
            continue
        if gallery_categories is None:
            cols = list(range(len(m.gallery_ids)))
        else:
            cols = [j for j, g in enumerate(m.gallery_ids) if gallery_categories[g] == cat]
        sub = ScoreMatrix([m.query_ids[i] for i in rows], [m.gallery_ids[j] for j in cols],
                          m.values[np.ix_(rows, cols)])
        out[cat] = (sub, truth.subset(sub.query_ids))
    return out


def aggregate_report(per_category: Mapping[str, tuple[ScoreMatrix, GroundTruth]],
                     ks: tuple[int, int] = (10, 50),
                     categories: Sequence[str] = CATEGORIES) -> RecallReport:
    """R@k1 and R@k2 per category; a k beyond a category's gallery size is capped at it."""
    missing = [c for c in categories if c not in per_category]
    if missing:
        raise ValueError(f"missing categories: {missing}")
    values = {}
    for c in categories:
        m, truth = per_category[c]
        g = len(m.gallery_ids)
        values[c] = tuple(recall_at_k(m, truth, min(k, g)) for k in ks)
    return report_from_values(values, ks)


def report_from_values(values: Mapping[str, tuple[float, float]],
                       ks: tuple[int, int] = (10, 50)) -> RecallReport:
    return RecallReport(dict(values), _objective(values), tuple(ks))


def _objective(values):
    # Same arithmetic for the report average and the ensemble objective, so the
    # two agree bit for bit (algebraically both are the mean of all entries).
    r1 = sum(v[0] for v in values.values()) / len(values)
    r2 = sum(v[1] for v in values.values()) / len(values)
    return (r1 + r2) / 2.0


def ensemble_objective(report: RecallReport) -> float:
    """(R@k1 + R@k2) / 2 over category-averaged recalls."""
    return _objective(report.per_category)


def evaluate(m: ScoreMatrix, truth: GroundTruth, gallery_categories=None,
             ks: tuple[int, int] = (10, 50), categories: Sequence[str] | None = None) -> RecallReport:
    split = split_by_category(m, truth, gallery_categories)
    cats = categories if categories is not None else tuple(c for c in CATEGORIES if c in split)
    return aggregate_report(split, ks, cats)

"""Ranking metrics for query/gallery retrieval and a 2-D PCA projection.

All rankings sort gallery items by ascending distance and break ties by
gallery index, so every metric is deterministic.
"""
import csv
import json
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .core import pairwise_distances

__all__ = [
    "EvalReport",
    "cmc_cuhk03",
    "cmc_market",
    "mean_ap",
    "evaluate",
    "pca_components",
    "pca_project",
    "PCAProjector",
    "write_cmc_csv",
    "write_pca_csv",
]


def _rank(dist_row):
    return np.argsort(dist_row, kind="stable")


def _distances(query, gallery):
    return pairwise_distances(query.X, gallery.X)


def cmc_cuhk03(query, gallery, max_rank=None, repetitions=100, seed=0,
               exclude_same_camera=False):
    """Expected single-gallery-shot CMC curve.

    Each repetition draws one gallery instance per identity and records the
    rank of the query's identity. With ``exclude_same_camera`` a query only
    sees gallery items from other cameras; otherwise the caller is expected
    to pass cross-camera query/gallery sets.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    dist = _distances(query, gallery)
    n_ids = len(np.unique(gallery.identities))
    max_rank = n_ids if max_rank is None else int(max_rank)
    rng = np.random.default_rng(seed)

    groups_per_query = []
    for q in range(len(query)):
        eligible = np.ones(len(gallery), dtype=bool)
        if exclude_same_camera:
            eligible &= gallery.cameras != query.cameras[q]
        idx = np.flatnonzero(eligible)
        ids = gallery.identities[idx]
        if query.identities[q] not in ids:
            raise ValueError(f"query {q} (identity {query.identities[q]}) has no gallery match")
        # group members by identity, identities in ascending order
        order = np.argsort(ids, kind="stable")
        uniq, starts, sizes = np.unique(ids[order], return_index=True, return_counts=True)
        target = int(np.searchsorted(uniq, query.identities[q]))
        groups_per_query.append((idx[order], starts, sizes, target))

    hits = np.zeros(max_rank)
    for _ in range(repetitions):
        for q, (members, starts, sizes, target) in enumerate(groups_per_query):
            picks = members[starts + (rng.random(len(sizes)) * sizes).astype(int)]
            cols = np.sort(picks)
            ranked = cols[_rank(dist[q, cols])]
            position = int(np.flatnonzero(ranked == picks[target])[0])
            if position < max_rank:
                hits[position:] += 1
    return hits / (repetitions * len(query))


def _positives_after_exclusion(query, gallery, q, ranked):
    keep = ~((gallery.identities[ranked] == query.identities[q])
             & (gallery.cameras[ranked] == query.cameras[q]))
    ranked = ranked[keep]
    positive = gallery.identities[ranked] == query.identities[q]
    if not positive.any():
        raise ValueError(f"query {q} has no gallery positive from another camera")
    return positive


def cmc_market(query, gallery, max_rank=None):
    """CMC where same-identity same-camera gallery items are dropped per query."""
    dist = _distances(query, gallery)
    max_rank = len(gallery) if max_rank is None else int(max_rank)
    hits = np.zeros(max_rank)
    for q in range(len(query)):
        positive = _positives_after_exclusion(query, gallery, q, _rank(dist[q]))
        first = int(np.argmax(positive))
        if first < max_rank:
            hits[first:] += 1
    return hits / len(query)


def mean_ap(query, gallery):
    """Mean over queries of the average precision, with the same exclusion rule."""
    dist = _distances(query, gallery)
    aps = []
    for q in range(len(query)):
        positive = _positives_after_exclusion(query, gallery, q, _rank(dist[q]))
        ranks = np.flatnonzero(positive) + 1
        # fsum is correctly rounded, so the result does not depend on summation order
        aps.append(math.fsum(np.arange(1, len(ranks) + 1) / ranks) / len(ranks))
    return math.fsum(aps) / len(aps)


@dataclass
class EvalReport:
    cmc_cuhk03: np.ndarray
    cmc_market: np.ndarray
    map: float
    repetitions: int

    @property
    def rank1_cuhk03(self):
        return float(self.cmc_cuhk03[0])

    @property
    def rank1_market(self):
        return float(self.cmc_market[0])

    def to_dict(self):
        return {
            "map": float(self.map),
            "rank1_cuhk03": self.rank1_cuhk03,
            "rank1_market": self.rank1_market,
            "repetitions": int(self.repetitions),
            "cmc_cuhk03": [float(v) for v in self.cmc_cuhk03],
            "cmc_market": [float(v) for v in self.cmc_market],
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def evaluate(query, gallery, max_rank=None, repetitions=100, seed=0):
    """Both CMC curves and mAP. The CUHK03 curve uses cross-camera gallery items only."""
    n_ids = len(np.unique(gallery.identities))
    max_rank = n_ids if max_rank is None else min(int(max_rank), n_ids)
    return EvalReport(
        cmc_cuhk03=cmc_cuhk03(query, gallery, max_rank, repetitions, seed,
                              exclude_same_camera=True),
        cmc_market=cmc_market(query, gallery, max_rank),
        map=mean_ap(query, gallery),
        repetitions=repetitions,
    )


def write_cmc_csv(path, report):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "cmc_cuhk03", "cmc_market"])
        for k, (a, b) in enumerate(zip(report.cmc_cuhk03, report.cmc_market), start=1):
            writer.writerow([k, repr(float(a)), repr(float(b))])


def pca_components(X, n_components=2):
    """Top principal directions of ``X`` from the covariance eigendecomposition.

    Returns ``(components, explained_variance, mean)``. Each component's
    sign is fixed so that its first non-zero loading is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3:
        raise ValueError("PCA needs at least 3 embeddings")
    if X.shape[1] < n_components:
        raise ValueError(f"PCA to {n_components} dimensions needs D >= {n_components}")
    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / (X.shape[0] - 1)
    if np.trace(cov) == 0.0:
        raise ValueError("all embeddings are identical; nothing to project")
    vals, vecs = np.linalg.eigh(cov)
    top = np.argsort(vals)[::-1][:n_components]
    comps = vecs[:, top].T.copy()
    for row in comps:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if len(nz) and row[nz[0]] < 0:
            row *= -1.0
    return comps, np.maximum(vals[top], 0.0), mean


def pca_project(embeddings, n_components=2):
    comps, _, mean = pca_components(embeddings, n_components)
    return (np.asarray(embeddings, dtype=np.float64) - mean) @ comps.T


class PCAProjector(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`pca_components`."""

    def __init__(self, n_components=2):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array(X)
        self.components_, self.explained_variance_, self.mean_ = pca_components(
            X, self.n_components)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        return (check_array(X) - self.mean_) @ self.components_.T


def write_pca_csv(path, sets):
    """``sets`` maps a split name to a LabeledSet of embeddings; projects them jointly."""
    names = list(sets)
    stacked = np.vstack([sets[n].X for n in names])
    points = pca_project(stacked)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "identity", "camera", "pc1", "pc2"])
        offset = 0
        for name in names:
            part = sets[name]
            for i in range(len(part)):
                x, y = points[offset + i]
                writer.writerow([name, int(part.identities[i]), int(part.cameras[i]),
                                 repr(float(x)), repr(float(y))])
            offset += len(part)

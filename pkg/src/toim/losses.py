"""Loss values and their analytic gradients with respect to embeddings.

Every loss returns a :class:`LossOutput` carrying the scalar value and one
gradient row per input embedding. Table entries (pooled features, lookup
table rows, class centers) are treated as constants: they never receive
gradients and are refreshed by the training loop instead.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import as_embedding_matrix, logistic, stable_softplus
from .memory import PooledTable, SlotKey

__all__ = [
    "DIST_EPS",
    "LossHyper",
    "LossOutput",
    "TripletRecord",
    "toim_loss",
    "toim_loss_arrays",
    "triplet_loss_batchhard",
    "softmax_ce_loss",
    "oim_loss",
    "center_loss",
    "combined_loss",
]

# Lower clamp for distances that appear in gradient denominators.
DIST_EPS = 1e-12


@dataclass(frozen=True)
class LossHyper:
    margin: float = 0.3
    temperature: float = 0.1
    beta: float = 0.0005
    gamma: float = 0.4

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


@dataclass
class LossOutput:
    value: float
    anchor_gradients: np.ndarray

    def __post_init__(self):
        self.anchor_gradients = np.asarray(self.anchor_gradients, dtype=np.float64)
        if not np.isfinite(self.value):
            raise FloatingPointError(f"loss value is not finite: {self.value}")


@dataclass
class TripletRecord:
    """One mined triplet: a live anchor feature plus two table features."""

    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    anchor_key: SlotKey
    positive_key: Optional[SlotKey] = None
    negative_key: Optional[SlotKey] = None
    sample_index: Optional[int] = None

    def __post_init__(self):
        self.anchor = np.asarray(self.anchor, dtype=np.float64)
        self.positive = np.asarray(self.positive, dtype=np.float64)
        self.negative = np.asarray(self.negative, dtype=np.float64)
        if not (self.anchor.shape == self.positive.shape == self.negative.shape):
            raise ValueError("anchor, positive and negative must share one dimension")
        if self.positive_key is not None and self.positive_key[0] != self.anchor_key[0]:
            raise ValueError("positive identity differs from the anchor identity")
        if self.negative_key is not None and self.negative_key[0] == self.anchor_key[0]:
            raise ValueError("negative identity equals the anchor identity")


def toim_loss_arrays(anchors, positives, negatives):
    """TOIM loss on stacked (n, D) arrays.

    Per anchor, -log(e^d_an / (e^d_an + e^d_ap)) is evaluated as
    softplus(d_ap - d_an). The loss sums over anchors.
    """
    a = as_embedding_matrix(anchors)
    p = as_embedding_matrix(positives, a.shape[1])
    n = as_embedding_matrix(negatives, a.shape[1])
    if not (a.shape == p.shape == n.shape):
        raise ValueError("anchors, positives and negatives must have equal shapes")
    if a.shape[0] == 0:
        raise ValueError("TOIM loss needs at least one triplet")
    diff_p = a - p
    diff_n = a - n
    d_ap = np.sqrt(np.sum(diff_p ** 2, axis=1))
    d_an = np.sqrt(np.sum(diff_n ** 2, axis=1))
    value = float(np.sum(stable_softplus(d_ap - d_an)))
    weight = logistic(d_ap - d_an)[:, None]
    grad = weight * (diff_p / np.maximum(d_ap, DIST_EPS)[:, None]
                     - diff_n / np.maximum(d_an, DIST_EPS)[:, None])
    return LossOutput(value, grad)


def toim_loss(batch):
    if len(batch) == 0:
        raise ValueError("TOIM loss needs at least one triplet")
    return toim_loss_arrays([r.anchor for r in batch],
                            [r.positive for r in batch],
                            [r.negative for r in batch])


def _hardest_pairs(dist, labels):
    """Per anchor: index of the farthest positive and nearest negative (-1 if none)."""
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    pos_d = np.where(pos_mask, dist, -np.inf)
    neg_d = np.where(~same, dist, np.inf)
    hard_pos = np.argmax(pos_d, axis=1)
    hard_neg = np.argmin(neg_d, axis=1)
    hard_pos[~pos_mask.any(axis=1)] = -1
    hard_neg[~(~same).any(axis=1)] = -1
    return hard_pos, hard_neg


def triplet_loss_batchhard(features, labels, margin=0.3):
    """Batch-hard triplet loss, summed over anchors.

    Every sample serves as an anchor; its positive is the farthest
    same-identity sample in the batch and its negative the nearest
    other-identity sample. Anchors whose identity appears once in the
    batch contribute nothing. Gradients cover every batch feature, since
    positives and negatives are live features here.
    """
    x = as_embedding_matrix(features)
    labels = np.asarray(labels)
    if labels.shape != (x.shape[0],):
        raise ValueError("need exactly one label per feature")
    if margin < 0:
        raise ValueError("margin must be >= 0")
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2:
        raise ValueError("batch-hard triplet loss needs at least two identities")
    if counts.max() < 2:
        raise ValueError("batch-hard triplet loss needs two samples of some identity")

    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt(np.sum(diff ** 2, axis=2))
    hard_pos, hard_neg = _hardest_pairs(dist, labels)

    value = 0.0
    grad = np.zeros_like(x)
    for i in np.flatnonzero(hard_pos >= 0):
        j, k = hard_pos[i], hard_neg[i]
        hinge = margin + dist[i, j] - dist[i, k]
        if hinge <= 0.0:
            continue
        value += hinge
        u_p = diff[i, j] / max(dist[i, j], DIST_EPS)
        u_n = diff[i, k] / max(dist[i, k], DIST_EPS)
        grad[i] += u_p - u_n
        grad[j] -= u_p
        grad[k] += u_n
    return LossOutput(float(value), grad)


def softmax_ce_loss(logits, labels):
    """Mean cross-entropy; gradients are with respect to the logits."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    labels = np.atleast_1d(np.asarray(labels))
    if not np.all(np.isfinite(z)):
        raise ValueError("logits contain non-finite values")
    if labels.shape != (z.shape[0],):
        raise ValueError("need exactly one label per row of logits")
    if np.any(labels < 0) or np.any(labels >= z.shape[1]):
        raise ValueError(f"labels must lie in [0, {z.shape[1]})")
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=1))
    log_prob = shifted[np.arange(n), labels] - log_norm
    prob = np.exp(shifted - log_norm[:, None])
    prob[np.arange(n), labels] -= 1.0
    return LossOutput(float(-np.mean(log_prob)), prob / n)


def _check_unit_rows(rows, what, allow_zero=False, tol=1e-6):
    norms = np.linalg.norm(rows, axis=1)
    ok = np.abs(norms - 1.0) <= tol
    if allow_zero:
        ok |= norms == 0.0
    if not np.all(ok):
        raise ValueError(f"{what} must be L2-normalized")


def oim_loss(features, labels, lut, cq=None, temperature=0.1):
    """Online instance matching loss, averaged over the batch.

    Scores are dot products between unit-norm features and the unit-norm
    lookup-table rows (plus optional circular-queue rows for unlabeled
    identities), divided by ``temperature``. All-zero lookup rows stand for
    classes that have not been written yet and score 0.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    x = as_embedding_matrix(features)
    labels = np.atleast_1d(np.asarray(labels))
    if isinstance(lut, PooledTable):
        lut = lut.slots[:, 0, :]
    table = as_embedding_matrix(lut, x.shape[1])
    _check_unit_rows(x, "features")
    _check_unit_rows(table, "lookup-table rows", allow_zero=True)
    if cq is not None and len(cq) > 0:
        queue = as_embedding_matrix(cq, x.shape[1])
        _check_unit_rows(queue, "circular-queue rows")
        bank = np.vstack([table, queue])
    else:
        bank = table
    if np.any(labels < 0) or np.any(labels >= table.shape[0]):
        raise ValueError(f"labels must lie in [0, {table.shape[0]})")
    scores = x @ bank.T / temperature
    out = softmax_ce_loss(scores, labels)
    return LossOutput(out.value, out.anchor_gradients @ bank / temperature)


def center_loss(features, labels, centers):
    """Half the summed squared distance of each feature to its class center."""
    x = as_embedding_matrix(features)
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape != (x.shape[0],):
        raise ValueError("need exactly one label per feature")
    rows = []
    for label in labels:
        try:
            rows.append(centers[int(label)])
        except (KeyError, IndexError):
            raise ValueError(f"no center for identity {int(label)}") from None
    c = as_embedding_matrix(rows, x.shape[1])
    diff = x - c
    return LossOutput(float(0.5 * np.sum(diff ** 2)), diff)


def combined_loss(ce, toim, center, beta):
    """``ce + toim + beta * center``; gradient rows must refer to the same samples."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    shapes = {ce.anchor_gradients.shape, toim.anchor_gradients.shape,
              center.anchor_gradients.shape}
    if len(shapes) != 1:
        raise ValueError(f"gradient shapes do not align: {sorted(shapes)}")
    return LossOutput(ce.value + toim.value + beta * center.value,
                      ce.anchor_gradients + toim.anchor_gradients
                      + beta * center.anchor_gradients)

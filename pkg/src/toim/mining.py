"""Triplet construction for TOIM and the P x K sampler for batch-hard triplets.

TOIM only needs N anchors of distinct identities; positives and negatives
come from the feature tables. Tie-breaking is fixed so that mining is
reproducible:

* positive: lowest camera among equally distant slots
* negative from the update table: most recently pushed key
* negative from the pooled table: lowest (identity, camera)
"""
import enum
import logging
from dataclasses import dataclass

import numpy as np

from .core import as_embedding, pairwise_distances
from .losses import TripletRecord
from .memory import SlotKey

__all__ = [
    "NegativeStrategy",
    "MiningConfig",
    "select_anchors",
    "select_positive",
    "select_negative_ut",
    "select_negative_pt",
    "build_batch",
    "pk_batch",
]

logger = logging.getLogger(__name__)


class NegativeStrategy(str, enum.Enum):
    UPDATE_TABLE = "ut"
    POOLED_TABLE = "pt"


@dataclass(frozen=True)
class MiningConfig:
    anchors_per_batch: int = 15
    negative_strategy: NegativeStrategy = NegativeStrategy.UPDATE_TABLE
    rng_seed: int = 0

    def __post_init__(self):
        if self.anchors_per_batch < 1:
            raise ValueError("anchors_per_batch must be >= 1")
        object.__setattr__(self, "negative_strategy",
                           NegativeStrategy(self.negative_strategy))


def _rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def select_anchors(identities, n_anchors, seed=None):
    """Pick ``n_anchors`` sample indices with pairwise distinct identities.

    Identities are drawn uniformly without replacement, then one sample is
    drawn uniformly among that identity's samples. ``seed`` may be an int
    or a ``numpy.random.Generator``.
    """
    identities = np.asarray(identities)
    uniq = np.unique(identities)
    if n_anchors < 1:
        raise ValueError("n_anchors must be >= 1")
    if len(uniq) < n_anchors:
        raise ValueError(f"need {n_anchors} distinct identities, only {len(uniq)} available")
    rng = _rng(seed)
    chosen = rng.choice(uniq, size=n_anchors, replace=False)
    return [int(rng.choice(np.flatnonzero(identities == ident))) for ident in chosen]


def _distances_to(anchor, rows):
    return pairwise_distances(anchor[None, :], rows)[0]


def select_positive(anchor, anchor_id, pt):
    """Farthest initialized slot of ``anchor_id``; returns ``(feature, key)``."""
    anchor = as_embedding(anchor, pt.dim)
    cams = np.flatnonzero(pt.initialized[anchor_id])
    if len(cams) == 0:
        raise LookupError(f"identity {anchor_id} has no initialized slot")
    dist = _distances_to(anchor, pt.slots[anchor_id, cams])
    cam = int(cams[np.argmax(dist)])
    return pt.slots[anchor_id, cam].copy(), SlotKey(int(anchor_id), cam)


def _negative_from_ut(anchor, anchor_id, ut, pt):
    # newest first, so a strict "<" keeps the most recent of tied keys
    keys = [k for k in reversed(ut.entries)
            if k.identity != anchor_id and pt.initialized[k.identity, k.camera]]
    if not keys:
        return None
    rows = np.array([pt.slots[k.identity, k.camera] for k in keys])
    key = keys[int(np.argmin(_distances_to(anchor, rows)))]
    return pt.slots[key.identity, key.camera].copy(), key


def select_negative_ut(anchor, anchor_id, ut, pt):
    """Nearest other-identity slot among the update table's keys.

    Falls back to :func:`select_negative_pt` (with a log message) when the
    update table holds no eligible key.
    """
    anchor = as_embedding(anchor, pt.dim)
    found = _negative_from_ut(anchor, anchor_id, ut, pt)
    if found is None:
        logger.debug("update table has no negative for identity %d; "
                     "falling back to the pooled table", anchor_id)
        return select_negative_pt(anchor, anchor_id, pt)
    return found


def select_negative_pt(anchor, anchor_id, pt):
    """Nearest initialized slot of any other identity in the pooled table."""
    anchor = as_embedding(anchor, pt.dim)
    mask = pt.initialized.copy()
    mask[anchor_id] = False
    ids, cams = np.nonzero(mask)
    if len(ids) == 0:
        raise LookupError(f"no initialized slot of an identity other than {anchor_id}")
    best = int(np.argmin(_distances_to(anchor, pt.slots[ids, cams])))
    key = SlotKey(int(ids[best]), int(cams[best]))
    return pt.slots[key].copy(), key


def build_batch(features, keys, pt, ut, cfg, rng=None, anchor_indices=None):
    """Mine TOIM triplets for a batch of live features.

    ``keys`` gives each feature's (identity, camera). Unless
    ``anchor_indices`` is supplied, ``cfg.anchors_per_batch`` anchors of
    distinct identities are drawn first. Anchors whose identity has no
    initialized slot yet are skipped. Each record's ``sample_index`` points
    back into ``features``.
    """
    features = np.asarray(features, dtype=np.float64)
    keys = [SlotKey(int(k[0]), int(k[1])) for k in keys]
    if anchor_indices is None:
        anchor_indices = select_anchors([k.identity for k in keys], cfg.anchors_per_batch,
                                        cfg.rng_seed if rng is None else rng)
    records = []
    for idx in anchor_indices:
        key = keys[idx]
        anchor = features[idx]
        if not pt.initialized[key.identity].any():
            continue
        pos, pos_key = select_positive(anchor, key.identity, pt)
        if cfg.negative_strategy is NegativeStrategy.UPDATE_TABLE:
            neg, neg_key = select_negative_ut(anchor, key.identity, ut, pt)
        else:
            neg, neg_key = select_negative_pt(anchor, key.identity, pt)
        records.append(TripletRecord(anchor.copy(), pos, neg, key, pos_key, neg_key,
                                     sample_index=int(idx)))
    if not records:
        raise LookupError("no triplet could be built: no anchor has an initialized positive")
    return records


def pk_batch(identities, n_identities, per_identity, seed=None):
    """Sample indices for a P x K batch: P identities with K samples each.

    Raises ``ValueError`` when fewer than P identities have K samples,
    e.g. on a batch holding a single sample per identity.
    """
    identities = np.asarray(identities)
    uniq, counts = np.unique(identities, return_counts=True)
    eligible = uniq[counts >= per_identity]
    if len(eligible) < n_identities:
        raise ValueError(
            f"P x K batch needs {n_identities} identities with {per_identity} samples "
            f"each; only {len(eligible)} identities qualify")
    rng = _rng(seed)
    chosen = rng.choice(eligible, size=n_identities, replace=False)
    out = []
    for ident in chosen:
        pool = np.flatnonzero(identities == ident)
        out.extend(int(i) for i in rng.choice(pool, size=per_identity, replace=False))
    return out

"""Vector primitives shared by the losses, mining and evaluation code.

Every distance in this package is the plain (non-squared) Euclidean
distance. Nothing here normalizes embeddings; that is an explicit model
option.
"""
import numpy as np

__all__ = [
    "as_embedding",
    "as_embedding_matrix",
    "euclidean_distance",
    "pairwise_distances",
    "stable_softplus",
    "logistic",
]


def as_embedding(values, dim=None):
    """Return ``values`` as a finite 1-D float64 array, optionally of length ``dim``."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"embedding must be 1-D, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"embedding has length {arr.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("embedding contains non-finite values")
    return arr


def as_embedding_matrix(values, dim=None):
    """Stack a list of embeddings (or a 2-D array) into a finite (n, D) float64 array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D array of embeddings, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise ValueError(f"embeddings have dimension {arr.shape[1]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("embeddings contain non-finite values")
    return arr


def euclidean_distance(a, b):
    a = as_embedding(a)
    b = as_embedding(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def pairwise_distances(queries, refs):
    """Distance matrix with ``out[i, j] == euclidean_distance(queries[i], refs[j])``.

    Rows are computed one query at a time with the same arithmetic as
    :func:`euclidean_distance`, so the two agree bit for bit.
    """
    if len(queries) == 0 or len(refs) == 0:
        raise ValueError("pairwise_distances needs non-empty query and reference sets")
    q = as_embedding_matrix(queries)
    r = as_embedding_matrix(refs)
    if q.shape[1] != r.shape[1]:
        raise ValueError(f"dimension mismatch: {q.shape[1]} vs {r.shape[1]}")
    out = np.empty((q.shape[0], r.shape[0]))
    for i in range(q.shape[0]):
        out[i] = np.sqrt(np.sum((q[i] - r) ** 2, axis=1))
    return out


def stable_softplus(x):
    """ln(1 + e^x) as max(x, 0) + ln(1 + e^-|x|); works on scalars and arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return float(out) if out.ndim == 0 else out


def logistic(x):
    """Overflow-free 1 / (1 + e^-x)."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out

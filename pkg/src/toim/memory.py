"""Feature memories used by TOIM mining.

``PooledTable`` keeps one feature slot per (identity, camera) pair and
refreshes it with an exponential moving average. ``UpdateTable`` remembers
which slots were written most recently, so negatives can be mined from
fresh features only.
"""
import json
from collections import OrderedDict
from typing import NamedTuple

import numpy as np

from .core import as_embedding

__all__ = ["SlotKey", "PooledTable", "UpdateTable"]


class SlotKey(NamedTuple):
    identity: int
    camera: int


class PooledTable:
    """M x C table of D-dimensional features.

    Slots start as zero vectors flagged uninitialized. The first write to a
    slot stores the feature verbatim; later writes blend it in with
    ``slot <- gamma * slot + (1 - gamma) * f``.
    """

    def __init__(self, num_identities, num_cameras, dim):
        for name, value in (("num_identities", num_identities),
                            ("num_cameras", num_cameras), ("dim", dim)):
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        self.num_identities = int(num_identities)
        self.num_cameras = int(num_cameras)
        self.dim = int(dim)
        self.slots = np.zeros((self.num_identities, self.num_cameras, self.dim))
        self.initialized = np.zeros((self.num_identities, self.num_cameras), dtype=bool)

    def __repr__(self):
        return (f"PooledTable(num_identities={self.num_identities}, "
                f"num_cameras={self.num_cameras}, dim={self.dim}, "
                f"initialized={int(self.initialized.sum())})")

    @property
    def shape(self):
        return self.num_identities, self.num_cameras, self.dim

    def _check_key(self, key):
        identity, camera = key
        if not (0 <= identity < self.num_identities and 0 <= camera < self.num_cameras):
            raise KeyError(f"slot {tuple(key)} outside table of {self.num_identities} "
                           f"identities x {self.num_cameras} cameras")
        return int(identity), int(camera)

    def lookup(self, key):
        """Return ``(feature copy, initialized flag)`` for ``key``."""
        i, c = self._check_key(key)
        return self.slots[i, c].copy(), bool(self.initialized[i, c])

    def update(self, key, feature, gamma):
        if not 0.0 <= gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
        i, c = self._check_key(key)
        f = as_embedding(feature, self.dim)
        if self.initialized[i, c]:
            self.slots[i, c] = gamma * self.slots[i, c] + (1.0 - gamma) * f
        else:
            self.slots[i, c] = f
            self.initialized[i, c] = True
        return self

    def initialized_keys(self, identity=None):
        """Initialized slot keys in (identity, camera) order, optionally for one identity."""
        if identity is None:
            ids, cams = np.nonzero(self.initialized)
        else:
            cams = np.flatnonzero(self.initialized[identity])
            ids = np.full(cams.shape, identity)
        return [SlotKey(int(i), int(c)) for i, c in zip(ids, cams)]

    def copy(self):
        other = PooledTable(self.num_identities, self.num_cameras, self.dim)
        other.slots = self.slots.copy()
        other.initialized = self.initialized.copy()
        return other

    def __eq__(self, other):
        if not isinstance(other, PooledTable):
            return NotImplemented
        return (self.shape == other.shape
                and np.array_equal(self.initialized, other.initialized)
                and np.array_equal(self.slots, other.slots))

    # Serialization: header (D, M, C) followed by row-major slot data.
    # Python's float repr round-trips exactly, so JSON is lossless.

    def to_dict(self):
        return {
            "dim": self.dim,
            "num_identities": self.num_identities,
            "num_cameras": self.num_cameras,
            "initialized": self.initialized.ravel().astype(int).tolist(),
            "slots": self.slots.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        table = cls(data["num_identities"], data["num_cameras"], data["dim"])
        slots = np.asarray(data["slots"], dtype=np.float64)
        flags = np.asarray(data["initialized"], dtype=bool)
        if slots.size != table.slots.size or flags.size != table.initialized.size:
            raise ValueError("slot data does not match the table header")
        table.slots = slots.reshape(table.slots.shape)
        table.initialized = flags.reshape(table.initialized.shape)
        return table

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class UpdateTable:
    """Recency queue of at most ``capacity`` distinct slot keys, newest last.

    Pushing a key that is already queued moves it to the newest position
    instead of storing it twice.
    """

    def __init__(self, capacity=20):
        if int(capacity) != capacity or capacity < 1:
            raise ValueError(f"capacity must be a positive integer, got {capacity!r}")
        self.capacity = int(capacity)
        self._entries = OrderedDict()

    def push(self, key):
        key = SlotKey(int(key[0]), int(key[1]))
        if key in self._entries:
            self._entries.move_to_end(key)
        else:
            self._entries[key] = None
            if len(self._entries) > self.capacity:
                self._entries.popitem(last=False)
        return self

    @property
    def entries(self):
        return list(self._entries)

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def __contains__(self, key):
        return tuple(key) in self._entries

    def __repr__(self):
        return f"UpdateTable(capacity={self.capacity}, entries={self.entries})"

    def to_dict(self):
        return {"capacity": self.capacity, "entries": [list(k) for k in self._entries]}

    @classmethod
    def from_dict(cls, data):
        ut = cls(data["capacity"])
        for key in data["entries"]:
            ut.push(key)
        return ut

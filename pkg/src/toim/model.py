"""Embedding network, optimizer and the training loop for every loss.

The backbone is a two-layer MLP (input -> ReLU hidden -> D) with
hand-written backpropagation, optimized by AdaDelta. ``train_epoch`` wires
together mining, the chosen loss, the optimizer step and the refresh of
the feature tables.
"""
import enum
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .losses import (
    LossOutput,
    center_loss,
    combined_loss,
    oim_loss,
    softmax_ce_loss,
    toim_loss,
    triplet_loss_batchhard,
)
from .memory import PooledTable, SlotKey, UpdateTable
from .mining import MiningConfig, NegativeStrategy, build_batch, pk_batch

__all__ = [
    "LossKind",
    "MlpParams",
    "init_mlp",
    "mlp_forward",
    "mlp_backward",
    "AdaDelta",
    "TrainConfig",
    "TrainState",
    "init_state",
    "epoch_anchor_batches",
    "train_epoch",
    "train",
    "embed",
    "save_checkpoint",
    "load_checkpoint",
]

PARAM_NAMES = ("W1", "b1", "W2", "b2")


class LossKind(str, enum.Enum):
    TOIM = "toim"
    TRIPLET = "triplet"
    OIM = "oim"
    SOFTMAX = "softmax"
    COMBINED = "combined"


class MlpParams:
    """Weights of the input -> hidden -> D network.

    ``version`` increases on every in-place update so that a forward cache
    can be matched to the parameters that produced it.
    """

    def __init__(self, W1, b1, W2, b2):
        self.arrays = {
            "W1": np.asarray(W1, dtype=np.float64),
            "b1": np.asarray(b1, dtype=np.float64),
            "W2": np.asarray(W2, dtype=np.float64),
            "b2": np.asarray(b2, dtype=np.float64),
        }
        hidden, input_dim = self.arrays["W1"].shape
        out_dim, hidden2 = self.arrays["W2"].shape
        if (hidden2 != hidden or self.arrays["b1"].shape != (hidden,)
                or self.arrays["b2"].shape != (out_dim,)):
            raise ValueError("inconsistent MLP parameter shapes")
        if not all(np.all(np.isfinite(a)) for a in self.arrays.values()):
            raise ValueError("MLP parameters must be finite")
        self.version = 0

    input_dim = property(lambda self: self.arrays["W1"].shape[1])
    hidden_dim = property(lambda self: self.arrays["W1"].shape[0])
    output_dim = property(lambda self: self.arrays["W2"].shape[0])

    def __getitem__(self, name):
        return self.arrays[name]

    def touch(self):
        self.version += 1

    def copy(self):
        return MlpParams(*(self.arrays[k].copy() for k in PARAM_NAMES))


def init_mlp(input_dim, hidden_dim, output_dim, seed=0):
    """He-initialized hidden layer, variance-1/fan-in output layer, zero biases."""
    rng = np.random.default_rng(seed)
    W1 = rng.normal(0.0, np.sqrt(2.0 / input_dim), size=(hidden_dim, input_dim))
    W2 = rng.normal(0.0, np.sqrt(1.0 / hidden_dim), size=(output_dim, hidden_dim))
    return MlpParams(W1, np.zeros(hidden_dim), W2, np.zeros(output_dim))


def mlp_forward(params, inputs, normalize=False):
    """Embed ``inputs`` (one vector or an (n, input_dim) array).

    Returns ``(embeddings, cache)``; the cache feeds :func:`mlp_backward`.
    """
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != params.input_dim:
        raise ValueError(f"input has dimension {x.shape[1]}, network expects {params.input_dim}")
    z1 = x @ params["W1"].T + params["b1"]
    h = np.maximum(z1, 0.0)
    out = h @ params["W2"].T + params["b2"]
    cache = {"x": x, "z1": z1, "h": h, "version": params.version, "normalize": normalize}
    if normalize:
        norm = np.maximum(np.linalg.norm(out, axis=1, keepdims=True), 1e-12)
        out = out / norm
        cache["norm"] = norm
        cache["unit"] = out
    return (out[0] if single else out), cache


def mlp_backward(params, cache, grad_output):
    """Gradients of ``sum(output * grad_output)`` with respect to every parameter."""
    if cache["version"] != params.version:
        raise RuntimeError("stale forward cache: parameters changed since the forward pass")
    g = np.atleast_2d(np.asarray(grad_output, dtype=np.float64))
    if g.shape != (cache["x"].shape[0], params.output_dim):
        raise ValueError(f"grad_output has shape {g.shape}, expected "
                         f"{(cache['x'].shape[0], params.output_dim)}")
    if cache["normalize"]:
        e = cache["unit"]
        g = (g - e * np.sum(e * g, axis=1, keepdims=True)) / cache["norm"]
    dz1 = (g @ params["W2"]) * (cache["z1"] > 0)
    return {
        "W1": dz1.T @ cache["x"],
        "b1": dz1.sum(axis=0),
        "W2": g.T @ cache["h"],
        "b2": g.sum(axis=0),
    }


class AdaDelta:
    """AdaDelta with an optional learning-rate multiplier on the applied step.

    Per parameter::

        E[g^2]  <- rho E[g^2] + (1 - rho) g^2
        delta    = sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
        E[dx^2] <- rho E[dx^2] + (1 - rho) delta^2
        param   -= lr * delta
    """

    def __init__(self, lr=1.0, rho=0.9, eps=1e-6):
        if not 0.0 < rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if eps <= 0 or lr <= 0:
            raise ValueError("eps and lr must be positive")
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.sq_grad = {}
        self.sq_delta = {}

    def step(self, params, grads):
        """Update the arrays in ``params`` (a name -> array mapping) in place."""
        for name, g in grads.items():
            g = np.asarray(g, dtype=np.float64)
            p = params[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {name}")
        for name, g in grads.items():
            eg = self.sq_grad.setdefault(name, np.zeros_like(params[name]))
            ed = self.sq_delta.setdefault(name, np.zeros_like(params[name]))
            eg *= self.rho
            eg += (1.0 - self.rho) * g * g
            delta = np.sqrt(ed + self.eps) / np.sqrt(eg + self.eps) * g
            ed *= self.rho
            ed += (1.0 - self.rho) * delta * delta
            params[name] -= self.lr * delta


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.4
    anchors_per_batch: int = 15
    ut_length: int = 20
    dim: int = 512
    epochs: int = 13
    lr: float = 0.001
    lr_mode: str = "initial"
    negative_strategy: NegativeStrategy = NegativeStrategy.UPDATE_TABLE
    normalize_embeddings: Optional[bool] = None
    seed: int = 0
    hidden_dim: int = 128
    margin: float = 0.3
    temperature: float = 0.1
    beta: float = 0.0005
    pk_identities: int = 5
    pk_samples: int = 3
    rho: float = 0.9
    eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "negative_strategy", NegativeStrategy(self.negative_strategy))
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        for name in ("anchors_per_batch", "ut_length", "dim", "hidden_dim",
                     "pk_identities", "pk_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.lr_mode not in ("initial", "multiplier"):
            raise ValueError("lr_mode must be 'initial' or 'multiplier'")

    def make_optimizer(self):
        """AdaDelta for this config.

        In ``initial`` mode ``lr`` is the size of the very first update,
        sqrt(eps), so eps = lr**2 and no multiplier is applied. In
        ``multiplier`` mode every update is scaled by ``lr`` and eps is used
        as given.
        """
        if self.lr_mode == "initial":
            return AdaDelta(1.0, self.rho, self.lr ** 2)
        return AdaDelta(self.lr, self.rho, self.eps)

    def normalize_for(self, loss_kind):
        """Embedding normalization: explicit setting, else on for OIM only."""
        if self.normalize_embeddings is not None:
            return self.normalize_embeddings
        return LossKind(loss_kind) is LossKind.OIM

    def to_dict(self):
        d = asdict(self)
        d["negative_strategy"] = self.negative_strategy.value
        return d

    @classmethod
    def from_dict(cls, data):
        known = cls.__dataclass_fields__
        unknown = set(data) - set(known)
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainState:
    """Everything the training loop mutates."""

    loss_kind: LossKind
    cfg: TrainConfig
    params: MlpParams
    optimizer: AdaDelta
    identities: np.ndarray  # label value of each table row
    num_cameras: int
    pt: Optional[PooledTable] = None
    ut: Optional[UpdateTable] = None
    lut: Optional[PooledTable] = None
    centers: Optional[PooledTable] = None
    head: dict = field(default_factory=dict)
    rng: np.random.Generator = None
    losses: list = field(default_factory=list)

    @property
    def normalize(self):
        return self.cfg.normalize_for(self.loss_kind)

    def trainables(self):
        out = dict(self.params.arrays)
        out.update(self.head)
        return out


def init_state(input_dim, identities, num_cameras, cfg, loss_kind):
    """Fresh network, optimizer and tables for labels ``identities``."""
    loss_kind = LossKind(loss_kind)
    identities = np.unique(identities)
    m, d = len(identities), cfg.dim
    rng = np.random.default_rng(cfg.seed)
    seeds = rng.integers(0, 2**32, size=2)
    state = TrainState(
        loss_kind=loss_kind, cfg=cfg,
        params=init_mlp(input_dim, cfg.hidden_dim, d, seed=int(seeds[0])),
        optimizer=cfg.make_optimizer(),
        identities=identities, num_cameras=int(num_cameras), rng=rng,
    )
    if loss_kind in (LossKind.TOIM, LossKind.COMBINED):
        state.pt = PooledTable(m, num_cameras, d)
        state.ut = UpdateTable(cfg.ut_length)
    if loss_kind is LossKind.OIM:
        state.lut = PooledTable(m, 1, d)
    if loss_kind in (LossKind.SOFTMAX, LossKind.COMBINED):
        head_rng = np.random.default_rng(int(seeds[1]))
        state.head = {"Wc": head_rng.normal(0.0, np.sqrt(1.0 / d), size=(m, d)),
                      "bc": np.zeros(m)}
    if loss_kind is LossKind.COMBINED:
        state.centers = PooledTable(m, 1, d)
    return state


def epoch_anchor_batches(identities, batch_size, rng):
    """Split one pass over the data into batches of distinct identities.

    Every sample is visited exactly once. Each batch takes the identities
    with the most unvisited samples (ties broken uniformly at random) and
    one uniformly drawn unvisited sample of each.
    """
    identities = np.asarray(identities)
    pools = {}
    for ident in np.unique(identities):
        members = np.flatnonzero(identities == ident)
        pools[ident] = list(rng.permutation(members))
    batches = []
    while pools:
        order = sorted(pools, key=lambda k: (-len(pools[k]), rng.random()))
        batch = []
        for ident in order[:batch_size]:
            batch.append(int(pools[ident].pop()))
            if not pools[ident]:
                del pools[ident]
        batches.append(batch)
    return batches


def _classifier_loss(state, feats, rows):
    """Softmax CE on the linear head, with gradients mapped back to the features."""
    wc, bc = state.head["Wc"], state.head["bc"]
    out = softmax_ce_loss(feats @ wc.T + bc, rows)
    head_grads = {"Wc": out.anchor_gradients.T @ feats, "bc": out.anchor_gradients.sum(axis=0)}
    return LossOutput(out.value, out.anchor_gradients @ wc), head_grads


def _toim_step(state, feats, rows, cams):
    keys = [SlotKey(int(r), int(c)) for r, c in zip(rows, cams)]
    mcfg = MiningConfig(len(keys), state.cfg.negative_strategy, state.cfg.seed)
    try:
        records = build_batch(feats, keys, state.pt, state.ut, mcfg,
                              anchor_indices=range(len(keys)))
    except LookupError:
        return None
    out = toim_loss(records)
    grad = np.zeros_like(feats)
    for rec, g in zip(records, out.anchor_gradients):
        grad[rec.sample_index] = g
    return LossOutput(out.value, grad)


def _refresh_tables(state, feats, rows, cams):
    gamma = state.cfg.gamma
    for f, r, c in zip(feats, rows, cams):
        if state.pt is not None:
            state.pt.update((r, c), f, gamma)
            state.ut.push((r, c))
        if state.lut is not None:
            state.lut.update((r, 0), f, gamma)
            v = state.lut.slots[r, 0]
            state.lut.slots[r, 0] = v / max(np.linalg.norm(v), 1e-12)
        if state.centers is not None:
            state.centers.update((r, 0), f, gamma)


def _batch_step(state, X, rows, cams, idx):
    feats, cache = mlp_forward(state.params, X[idx], normalize=state.normalize)
    r, c = rows[idx], cams[idx]
    kind = state.loss_kind
    head_grads = {}
    if kind is LossKind.TOIM:
        out = _toim_step(state, feats, r, c)
    elif kind is LossKind.TRIPLET:
        out = triplet_loss_batchhard(feats, r, state.cfg.margin)
    elif kind is LossKind.SOFTMAX:
        out, head_grads = _classifier_loss(state, feats, r)
    elif kind is LossKind.OIM:
        out = oim_loss(feats, r, state.lut, temperature=state.cfg.temperature)
    else:
        ce, head_grads = _classifier_loss(state, feats, r)
        toim = _toim_step(state, feats, r, c)
        if toim is None:
            toim = LossOutput(0.0, np.zeros_like(feats))
        seen = state.centers.initialized[r, 0]
        cgrad = np.zeros_like(feats)
        cval = 0.0
        if seen.any():
            cl = center_loss(feats[seen], r[seen], state.centers.slots[:, 0, :])
            cgrad[seen], cval = cl.anchor_gradients, cl.value
        out = combined_loss(ce, toim, LossOutput(cval, cgrad), state.cfg.beta)

    if out is not None:
        grads = mlp_backward(state.params, cache, out.anchor_gradients)
        grads.update(head_grads)
        state.optimizer.step(state.trainables(), grads)
        state.params.touch()
    _refresh_tables(state, feats, r, c)
    return None if out is None else out.value


def _to_rows(state, identities):
    rows = np.searchsorted(state.identities, identities)
    if np.any(rows >= len(state.identities)) or np.any(state.identities[rows] != identities):
        raise ValueError("training labels contain identities unknown to this state")
    return rows


def train_epoch(state, X, identities, cameras):
    """Run one epoch in place; returns the mean batch loss (None if no step ran)."""
    X = np.asarray(X, dtype=np.float64)
    rows = _to_rows(state, np.asarray(identities))
    cams = np.asarray(cameras, dtype=int)
    if len(X) == 0:
        raise ValueError("training set is empty")
    if np.any(cams < 0) or np.any(cams >= state.num_cameras):
        raise ValueError(f"camera ids must lie in [0, {state.num_cameras})")
    cfg = state.cfg
    batches = epoch_anchor_batches(rows, cfg.anchors_per_batch, state.rng)
    values = []
    for batch in batches:
        if state.loss_kind is LossKind.TRIPLET:
            batch = pk_batch(rows, cfg.pk_identities, cfg.pk_samples, state.rng)
        value = _batch_step(state, X, rows, cams, np.asarray(batch))
        if value is not None:
            if not np.isfinite(value):
                raise FloatingPointError("loss became non-finite")
            values.append(value)
    mean = float(np.mean(values)) if values else None
    state.losses.append(mean)
    return mean


def train(X, identities, cameras, cfg=None, loss_kind=LossKind.TOIM, num_cameras=None):
    """Initialize and train for ``cfg.epochs`` epochs; returns the final state."""
    cfg = cfg or TrainConfig()
    X = np.asarray(X, dtype=np.float64)
    cameras = np.asarray(cameras, dtype=int)
    if num_cameras is None:
        num_cameras = int(cameras.max()) + 1
    state = init_state(X.shape[1], identities, num_cameras, cfg, loss_kind)
    for _ in range(cfg.epochs):
        train_epoch(state, X, identities, cameras)
    return state


def embed(state, X):
    return mlp_forward(state.params, np.atleast_2d(X), normalize=state.normalize)[0]


def save_checkpoint(state, path):
    """Write parameters, optimizer accumulators and tables to an ``.npz`` file."""
    arrays = {f"param/{k}": v for k, v in state.trainables().items()}
    arrays.update({f"sq_grad/{k}": v for k, v in state.optimizer.sq_grad.items()})
    arrays.update({f"sq_delta/{k}": v for k, v in state.optimizer.sq_delta.items()})
    for name in ("pt", "lut", "centers"):
        table = getattr(state, name)
        if table is not None:
            arrays[f"{name}/slots"] = table.slots
            arrays[f"{name}/initialized"] = table.initialized
    meta = {
        "loss_kind": state.loss_kind.value,
        "cfg": state.cfg.to_dict(),
        "num_cameras": state.num_cameras,
        "ut": state.ut.to_dict() if state.ut is not None else None,
        "losses": state.losses,
        "rng": state.rng.bit_generator.state,
    }
    arrays["identities"] = state.identities
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(arrays.pop("meta").tobytes().decode())
    cfg = TrainConfig.from_dict(meta["cfg"])
    identities = arrays.pop("identities")
    input_dim = arrays["param/W1"].shape[1]
    state = init_state(input_dim, identities, meta["num_cameras"], cfg, meta["loss_kind"])
    state.params = MlpParams(*(arrays[f"param/{k}"] for k in PARAM_NAMES))
    for k in state.head:
        state.head[k] = arrays[f"param/{k}"]
    for key, value in arrays.items():
        kind, _, name = key.partition("/")
        if kind == "sq_grad":
            state.optimizer.sq_grad[name] = value
        elif kind == "sq_delta":
            state.optimizer.sq_delta[name] = value
        elif kind in ("pt", "lut", "centers"):
            setattr(getattr(state, kind), name, value)
    if meta["ut"] is not None:
        state.ut = UpdateTable.from_dict(meta["ut"])
    state.losses = meta["losses"]
    state.rng.bit_generator.state = meta["rng"]
    return state

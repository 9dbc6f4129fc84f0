"""scikit-learn compatible front end for the embedding trainer."""
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .evaluation import evaluate
from .model import LossKind, TrainConfig, embed, load_checkpoint, save_checkpoint, train
from .synthdata import LabeledSet


class TOIMEmbedder(TransformerMixin, BaseEstimator):
    """Learn a D-dimensional embedding with TOIM or one of the baseline losses.

    Parameters mirror :class:`toim.model.TrainConfig`; ``loss`` picks one of
    ``toim``, ``triplet``, ``oim``, ``softmax`` or ``combined``.

    Attributes
    ----------
    state_ : TrainState
        Network, optimizer and feature tables after training.
    loss_curve_ : list of float
        Mean batch loss of every epoch.

    Examples
    --------
    >>> from toim import SynthConfig, gen_dataset
    >>> data = gen_dataset(SynthConfig(num_identities=10, num_cameras=2))
    >>> est = TOIMEmbedder(dim=8, hidden_dim=16, epochs=1, anchors_per_batch=4)
    >>> est.fit(data.train.X, data.train.identities, cameras=data.train.cameras)
    TOIMEmbedder(anchors_per_batch=4, dim=8, epochs=1, hidden_dim=16)
    >>> est.transform(data.query.X).shape
    (5, 8)
    """

    def __init__(self, loss="toim", dim=512, hidden_dim=128, gamma=0.4, anchors_per_batch=15,
                 ut_length=20, epochs=13, lr=0.001, negative_strategy="ut",
                 normalize_embeddings=None, margin=0.3, temperature=0.1, beta=0.0005,
                 seed=0):
        self.loss = loss
        self.dim = dim
        self.hidden_dim = hidden_dim
        self.gamma = gamma
        self.anchors_per_batch = anchors_per_batch
        self.ut_length = ut_length
        self.epochs = epochs
        self.lr = lr
        self.negative_strategy = negative_strategy
        self.normalize_embeddings = normalize_embeddings
        self.margin = margin
        self.temperature = temperature
        self.beta = beta
        self.seed = seed

    def train_config(self):
        return TrainConfig(
            gamma=self.gamma, anchors_per_batch=self.anchors_per_batch,
            ut_length=self.ut_length, dim=self.dim, epochs=self.epochs, lr=self.lr,
            negative_strategy=self.negative_strategy,
            normalize_embeddings=self.normalize_embeddings, seed=self.seed,
            hidden_dim=self.hidden_dim, margin=self.margin,
            temperature=self.temperature, beta=self.beta,
        )

    def fit(self, X, y, cameras=None):
        """Train on features ``X`` with identity labels ``y``.

        ``cameras`` defaults to a single camera for every sample.
        """
        X, y = check_X_y(X, y, dtype=np.float64)
        cameras = (np.zeros(len(y), dtype=int) if cameras is None
                   else check_array(cameras, ensure_2d=False, dtype=int))
        if len(cameras) != len(y):
            raise ValueError("cameras must align with y")
        self.state_ = train(X, y, cameras, self.train_config(), LossKind(self.loss))
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def loss_curve_(self):
        check_is_fitted(self, "state_")
        return list(self.state_.losses)

    def transform(self, X):
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return embed(self.state_, X)

    def score(self, query, gallery, repetitions=100, seed=0):
        """Evaluate retrieval of ``query`` against ``gallery`` (both LabeledSets of inputs)."""
        q = LabeledSet(self.transform(query.X), query.identities, query.cameras)
        g = LabeledSet(self.transform(gallery.X), gallery.identities, gallery.cameras)
        return evaluate(q, g, repetitions=repetitions, seed=seed)

    def save(self, path):
        check_is_fitted(self, "state_")
        save_checkpoint(self.state_, path)

    @classmethod
    def load(cls, path):
        state = load_checkpoint(path)
        cfg = state.cfg
        est = cls(loss=state.loss_kind.value, dim=cfg.dim, hidden_dim=cfg.hidden_dim,
                  gamma=cfg.gamma, anchors_per_batch=cfg.anchors_per_batch,
                  ut_length=cfg.ut_length, epochs=cfg.epochs, lr=cfg.lr,
                  negative_strategy=cfg.negative_strategy.value,
                  normalize_embeddings=cfg.normalize_embeddings, margin=cfg.margin,
                  temperature=cfg.temperature, beta=cfg.beta, seed=cfg.seed)
        est.state_ = state
        est.n_features_in_ = state.params.input_dim
        return est

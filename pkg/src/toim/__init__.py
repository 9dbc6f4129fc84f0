"""Triplet online instance matching (TOIM) metric learning on numpy."""
from .core import euclidean_distance, pairwise_distances, stable_softplus
from .estimator import TOIMEmbedder
from .evaluation import (
    EvalReport,
    cmc_cuhk03,
    cmc_market,
    evaluate,
    mean_ap,
    pca_project,
)
from .losses import (
    LossHyper,
    LossOutput,
    TripletRecord,
    center_loss,
    combined_loss,
    oim_loss,
    softmax_ce_loss,
    toim_loss,
    triplet_loss_batchhard,
)
from .memory import PooledTable, SlotKey, UpdateTable
from .mining import MiningConfig, NegativeStrategy, build_batch, pk_batch
from .model import AdaDelta, LossKind, TrainConfig, train
from .synthdata import (
    LabeledSet,
    SynthConfig,
    SynthDataset,
    gen_dataset,
    split_query_gallery,
)

__version__ = "0.1.0"

__all__ = [
    "euclidean_distance",
    "pairwise_distances",
    "stable_softplus",
    "TOIMEmbedder",
    "EvalReport",
    "cmc_cuhk03",
    "cmc_market",
    "evaluate",
    "mean_ap",
    "pca_project",
    "LossHyper",
    "LossOutput",
    "TripletRecord",
    "center_loss",
    "combined_loss",
    "oim_loss",
    "softmax_ce_loss",
    "toim_loss",
    "triplet_loss_batchhard",
    "PooledTable",
    "SlotKey",
    "UpdateTable",
    "MiningConfig",
    "NegativeStrategy",
    "build_batch",
    "pk_batch",
    "AdaDelta",
    "LossKind",
    "TrainConfig",
    "train",
    "LabeledSet",
    "SynthConfig",
    "SynthDataset",
    "gen_dataset",
    "split_query_gallery",
]

"""Synthetic multi-camera identity data.

Each identity has a latent prototype drawn from a standard normal. A
sample seen by camera ``c`` is ``A @ (prototype + bias_c + noise)``, where
``A`` is one fixed random linear map into observation space and ``bias_c``
is a per-camera latent offset. The camera offset is what makes raw
cross-camera matching hard.
"""
import csv
from dataclasses import asdict, dataclass

import numpy as np

__all__ = ["SynthConfig", "LabeledSet", "SynthDataset", "gen_dataset",
           "split_query_gallery", "write_csv", "read_csv"]


@dataclass(frozen=True)
class SynthConfig:
    num_identities: int = 50
    num_cameras: int = 5
    samples_per_id_per_cam: int = 5
    latent_dim: int = 16
    observation_dim: int = 64
    camera_bias_scale: float = 1.5
    noise_scale: float = 0.5
    train_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("num_identities", "num_cameras", "samples_per_id_per_cam",
                     "latent_dim", "observation_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.camera_bias_scale < 0 or self.noise_scale < 0:
            raise ValueError("scales must be >= 0")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.observation_dim < self.latent_dim:
            raise ValueError("observation_dim must be >= latent_dim")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown SynthConfig fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class LabeledSet:
    X: np.ndarray
    identities: np.ndarray
    cameras: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.identities = np.asarray(self.identities, dtype=int)
        self.cameras = np.asarray(self.cameras, dtype=int)
        if not (len(self.X) == len(self.identities) == len(self.cameras)):
            raise ValueError("features, identities and cameras must be aligned")

    def __len__(self):
        return len(self.identities)

    def subset(self, idx):
        return LabeledSet(self.X[idx], self.identities[idx], self.cameras[idx])


@dataclass
class SynthDataset:
    train: LabeledSet
    query: LabeledSet
    gallery: LabeledSet


def gen_dataset(cfg):
    rng = np.random.default_rng(cfg.seed)
    prototypes = rng.standard_normal((cfg.num_identities, cfg.latent_dim))
    cam_bias = cfg.camera_bias_scale * rng.standard_normal((cfg.num_cameras, cfg.latent_dim))
    mixing = rng.standard_normal((cfg.observation_dim, cfg.latent_dim)) / np.sqrt(cfg.latent_dim)

    ids = np.repeat(np.arange(cfg.num_identities), cfg.num_cameras * cfg.samples_per_id_per_cam)
    cams = np.tile(np.repeat(np.arange(cfg.num_cameras), cfg.samples_per_id_per_cam),
                   cfg.num_identities)
    noise = cfg.noise_scale * rng.standard_normal((len(ids), cfg.latent_dim))
    latent = prototypes[ids] + cam_bias[cams] + noise
    X = latent @ mixing.T

    n_train = min(max(int(round(cfg.train_fraction * cfg.num_identities)), 1),
                  cfg.num_identities - 1)
    order = rng.permutation(cfg.num_identities)
    train_ids = np.sort(order[:n_train])
    is_train = np.isin(ids, train_ids)
    train = LabeledSet(X[is_train], ids[is_train], cams[is_train])
    evaluation = LabeledSet(X[~is_train], ids[~is_train], cams[~is_train])
    query, gallery = split_query_gallery(evaluation, rng)
    return SynthDataset(train, query, gallery)


def split_query_gallery(samples, seed=None):
    """Hold out one sample per identity as query; everything else is gallery.

    Every identity must appear under at least two cameras so that its query
    keeps a cross-camera positive in the gallery.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    query_idx = []
    for ident in np.unique(samples.identities):
        members = np.flatnonzero(samples.identities == ident)
        if len(np.unique(samples.cameras[members])) < 2:
            raise ValueError(f"identity {ident} is seen by a single camera")
        query_idx.append(int(rng.choice(members)))
    is_query = np.zeros(len(samples), dtype=bool)
    is_query[query_idx] = True
    return samples.subset(is_query), samples.subset(~is_query)


def write_csv(path, dataset):
    """One row per sample: identity, camera, split, f0 .. f{d-1}."""
    parts = [("train", dataset.train), ("query", dataset.query), ("gallery", dataset.gallery)]
    dim = dataset.train.X.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["identity", "camera", "split"] + [f"f{i}" for i in range(dim)])
        for split, part in parts:
            for x, ident, cam in zip(part.X, part.identities, part.cameras):
                writer.writerow([int(ident), int(cam), split] + [repr(float(v)) for v in x])


def read_csv(path):
    rows = {"train": [], "query": [], "gallery": []}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["identity", "camera", "split"]:
            raise ValueError(f"{path}: unexpected header {header[:3]}")
        for line in reader:
            if line[2] not in rows:
                raise ValueError(f"{path}: unknown split {line[2]!r}")
            rows[line[2]].append(line)
    dim = len(header) - 3

    def to_set(lines):
        if not lines:
            return LabeledSet(np.empty((0, dim)), [], [])
        return LabeledSet([[float(v) for v in ln[3:]] for ln in lines],
                          [int(ln[0]) for ln in lines], [int(ln[1]) for ln in lines])

    return SynthDataset(to_set(rows["train"]), to_set(rows["query"]), to_set(rows["gallery"]))

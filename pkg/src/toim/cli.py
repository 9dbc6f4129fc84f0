"""Command-line experiment runner.

Subcommands: ``gen-data``, ``train``, ``eval``, ``sweep`` and
``compare-convergence``. Settings come from an optional JSON config of the
form ``{"train": {...}, "synth": {...}, "loss": "toim"}``; command-line
flags override it. Every output is plain CSV or JSON and is byte-identical
across reruns with the same settings.

Output schemas:

* ``loss_curve.csv``: epoch, mean_loss
* ``cmc_curve.csv``: rank, cmc_cuhk03, cmc_market
* ``pca_points.csv``: split, identity, camera, pc1, pc2
* ``sweep.csv``: axis, value, map, rank1_cuhk03, rank1_market
* ``sweep_loss_curves.csv`` / ``convergence.csv``: label, epoch, mean_loss, normalized_loss
"""
import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .evaluation import evaluate, write_cmc_csv, write_pca_csv
from .model import LossKind, TrainConfig, embed, load_checkpoint, save_checkpoint, train
from .synthdata import LabeledSet, SynthConfig, gen_dataset, read_csv, write_csv

logger = logging.getLogger("toim")

SWEEP_AXES = ("gamma", "dim", "neg-strategy")
DEFAULT_SWEEPS = {
    "gamma": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
    "dim": [128, 256, 512, 1024, 2048],
    "neg-strategy": ["ut", "pt"],
}


@dataclass
class ExperimentSpec:
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    loss: LossKind = LossKind.TOIM
    out: str = "."
    sweep_axis: Optional[str] = None
    sweep_values: Optional[list] = None
    data: Optional[str] = None
    repetitions: int = 100

    def __post_init__(self):
        self.loss = LossKind(self.loss)
        if self.sweep_axis is not None:
            if self.sweep_axis not in SWEEP_AXES:
                raise ValueError(f"unknown sweep axis {self.sweep_axis!r}")
            if self.sweep_values is None:
                self.sweep_values = list(DEFAULT_SWEEPS[self.sweep_axis])
            if not self.sweep_values:
                raise ValueError("sweep values must be non-empty")

    def to_dict(self):
        return {"train": self.train.to_dict(), "synth": self.synth.to_dict(),
                "loss": self.loss.value, "data": self.data, "repetitions": self.repetitions}

    def with_axis_value(self, value):
        if self.sweep_axis == "gamma":
            return replace(self, train=replace(self.train, gamma=float(value)))
        if self.sweep_axis == "dim":
            return replace(self, train=replace(self.train, dim=int(value)))
        return replace(self, train=replace(self.train, negative_strategy=str(value)))


class ExperimentError(RuntimeError):
    pass


def load_dataset(spec):
    if spec.data:
        return read_csv(spec.data)
    return gen_dataset(spec.synth)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x):
    return "" if x is None else repr(float(x))


def normalized_curve(losses):
    """Divide every epoch loss by the first one, so the curve starts at 1.0."""
    if not losses or losses[0] in (None, 0.0):
        return [None] * len(losses)
    return [None if v is None else v / losses[0] for v in losses]


def epochs_to_fraction(losses, fraction=0.5):
    """First 1-based epoch whose normalized loss is <= ``fraction`` (None if never)."""
    for epoch, v in enumerate(normalized_curve(losses), start=1):
        if v is not None and v <= fraction:
            return epoch
    return None


def _train_state(spec, data):
    num_cameras = int(max(data.train.cameras.max(), data.query.cameras.max(),
                          data.gallery.cameras.max())) + 1
    return train(data.train.X, data.train.identities, data.train.cameras,
                 spec.train, spec.loss, num_cameras=num_cameras)


def run_train(spec, data=None):
    """Train, then write ``loss_curve.csv``, ``checkpoint.npz`` and ``experiment.json``."""
    os.makedirs(spec.out, exist_ok=True)
    data = data or load_dataset(spec)
    state = _train_state(spec, data)
    _write_rows(os.path.join(spec.out, "loss_curve.csv"), ["epoch", "mean_loss"],
                [[i, _fmt(v)] for i, v in enumerate(state.losses, start=1)])
    save_checkpoint(state, os.path.join(spec.out, "checkpoint.npz"))
    with open(os.path.join(spec.out, "experiment.json"), "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2)
        fh.write("\n")
    return state


def _embedded_sets(state, data):
    if data.query.X.shape[1] != state.params.input_dim:
        raise ExperimentError(f"dataset has {data.query.X.shape[1]} features, checkpoint "
                              f"expects {state.params.input_dim}")
    q = LabeledSet(embed(state, data.query.X), data.query.identities, data.query.cameras)
    g = LabeledSet(embed(state, data.gallery.X), data.gallery.identities, data.gallery.cameras)
    return q, g


def run_eval(spec, state=None, data=None, checkpoint=None):
    """Embed query and gallery, then write the report, CMC, PCA and embedding files."""
    os.makedirs(spec.out, exist_ok=True)
    if state is None:
        state = load_checkpoint(checkpoint or os.path.join(spec.out, "checkpoint.npz"))
    data = data or load_dataset(spec)
    q, g = _embedded_sets(state, data)
    report = evaluate(q, g, repetitions=spec.repetitions, seed=spec.train.seed)
    report.write_json(os.path.join(spec.out, "eval_report.json"))
    write_cmc_csv(os.path.join(spec.out, "cmc_curve.csv"), report)
    write_pca_csv(os.path.join(spec.out, "pca_points.csv"), {"query": q, "gallery": g})
    empty = LabeledSet(np.empty((0, q.X.shape[1])), [], [])
    write_csv(os.path.join(spec.out, "embeddings.csv"),
              type(data)(train=empty, query=q, gallery=g))
    return report


def run_sweep(spec):
    """One train + eval per axis value; writes ``sweep.csv`` (partial on failure)."""
    os.makedirs(spec.out, exist_ok=True)
    data = load_dataset(spec)
    rows, curves, failed = [], [], []
    for value in spec.sweep_values:
        leg = spec.with_axis_value(value)
        leg = replace(leg, out=os.path.join(spec.out, f"{spec.sweep_axis}_{value}"))
        try:
            state = run_train(leg, data)
            report = run_eval(leg, state, data)
        except Exception as exc:  # one failed leg must not lose the others
            logger.error("sweep leg %s=%s failed: %s", spec.sweep_axis, value, exc)
            failed.append(value)
            continue
        rows.append([spec.sweep_axis, value, _fmt(report.map),
                     _fmt(report.rank1_cuhk03), _fmt(report.rank1_market)])
        for epoch, (v, nv) in enumerate(zip(state.losses, normalized_curve(state.losses)), 1):
            curves.append([value, epoch, _fmt(v), _fmt(nv)])
    _write_rows(os.path.join(spec.out, "sweep.csv"),
                ["axis", "value", "map", "rank1_cuhk03", "rank1_market"], rows)
    _write_rows(os.path.join(spec.out, "sweep_loss_curves.csv"),
                ["label", "epoch", "mean_loss", "normalized_loss"], curves)
    if failed:
        raise ExperimentError(f"sweep legs failed: {failed}")
    return rows


def run_convergence_compare(spec):
    """Train TOIM and batch-hard triplet on equal budgets; write normalized curves.

    The triplet P x K batch matches TOIM's anchor count when P * K equals
    ``anchors_per_batch`` (5 x 3 = 15 by default).
    """
    os.makedirs(spec.out, exist_ok=True)
    cfg = spec.train
    if cfg.pk_identities * cfg.pk_samples != cfg.anchors_per_batch:
        raise ExperimentError("P x K must equal anchors_per_batch for a matched budget")
    data = load_dataset(spec)
    rows, summary = [], {}
    for kind in (LossKind.TOIM, LossKind.TRIPLET):
        state = _train_state(replace(spec, loss=kind), data)
        norm = normalized_curve(state.losses)
        for epoch, (v, nv) in enumerate(zip(state.losses, norm), start=1):
            rows.append([kind.value, epoch, _fmt(v), _fmt(nv)])
        summary[kind.value] = {"epochs_to_half": epochs_to_fraction(state.losses),
                               "losses": state.losses}
    _write_rows(os.path.join(spec.out, "convergence.csv"),
                ["label", "epoch", "mean_loss", "normalized_loss"], rows)
    with open(os.path.join(spec.out, "convergence_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return summary


def build_parser():
    parser = argparse.ArgumentParser(prog="toim", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="seed for data generation and training")
    common.add_argument("--out", default=None, help="output directory (default: .)")
    common.add_argument("--data", help="dataset CSV to use instead of generating one")
    common.add_argument("-v", "--verbose", action="store_true")
    train_opts = argparse.ArgumentParser(add_help=False)
    train_opts.add_argument("--loss", choices=[k.value for k in LossKind])
    train_opts.add_argument("--gamma", type=float)
    train_opts.add_argument("--dim", type=int)
    train_opts.add_argument("--neg-strategy", choices=["ut", "pt"])
    train_opts.add_argument("--epochs", type=int)

    sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset as CSV")
    sub.add_parser("train", parents=[common, train_opts], help="train one model")
    ev = sub.add_parser("eval", parents=[common, train_opts], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", help="checkpoint path (default: OUT/checkpoint.npz)")
    ev.add_argument("--repetitions", type=int, help="CUHK03 sampling repetitions")
    sw = sub.add_parser("sweep", parents=[common, train_opts], help="sweep one factor")
    sw.add_argument("--axis", choices=SWEEP_AXES, required=True)
    sw.add_argument("--values", help="comma-separated axis values (default per axis)")
    sub.add_parser("compare-convergence", parents=[common, train_opts],
                   help="normalized loss curves of TOIM vs batch-hard triplet")
    return parser


def _parse_value(axis, text):
    if axis == "gamma":
        return float(text)
    if axis == "dim":
        return int(text)
    return text


def spec_from_args(args):
    config = {}
    path = args.config
    if path is None and args.command == "eval":
        # reuse the settings a checkpoint was trained with
        ckpt_dir = os.path.dirname(getattr(args, "checkpoint", None) or
                                   os.path.join(args.out or ".", "checkpoint.npz"))
        candidate = os.path.join(ckpt_dir, "experiment.json")
        path = candidate if os.path.exists(candidate) else None
    if path:
        with open(path) as fh:
            config = json.load(fh)
    unknown = set(config) - {"train", "synth", "loss", "data", "repetitions", "out", "sweep"}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    train_kw = dict(config.get("train", {}))
    synth_kw = dict(config.get("synth", {}))
    if args.seed is not None:
        train_kw["seed"] = synth_kw["seed"] = args.seed
    for flag, key in (("gamma", "gamma"), ("dim", "dim"), ("neg_strategy", "negative_strategy"),
                      ("epochs", "epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            train_kw[key] = value
    sweep = config.get("sweep", {})
    axis = getattr(args, "axis", None) or sweep.get("axis")
    values = sweep.get("values")
    if getattr(args, "values", None):
        values = [_parse_value(axis, v) for v in args.values.split(",")]
    return ExperimentSpec(
        train=TrainConfig.from_dict(train_kw),
        synth=SynthConfig.from_dict(synth_kw),
        loss=getattr(args, "loss", None) or config.get("loss", "toim"),
        out=args.out or config.get("out", "."),
        sweep_axis=axis, sweep_values=values,
        data=args.data or config.get("data"),
        repetitions=getattr(args, "repetitions", None) or config.get("repetitions", 100),
    )


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = spec_from_args(args)
        if args.command == "gen-data":
            os.makedirs(spec.out, exist_ok=True)
            write_csv(os.path.join(spec.out, "dataset.csv"), gen_dataset(spec.synth))
        elif args.command == "train":
            run_train(spec)
        elif args.command == "eval":
            report = run_eval(spec, checkpoint=args.checkpoint)
            print(json.dumps({k: v for k, v in report.to_dict().items()
                              if not k.startswith("cmc")}))
        elif args.command == "sweep":
            run_sweep(spec)
        else:
            summary = run_convergence_compare(spec)
            print(json.dumps({k: v["epochs_to_half"] for k, v in summary.items()}))
    except (ValueError, KeyError, LookupError, OSError, ExperimentError) as exc:
        print(f"toim {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are
printed even when output capture is on.
"""
import time

import numpy as np
import pytest
from _oracles import (
    brute_map,
    brute_market,
    brute_triplet,
    central_diff,
    exhaustive_cuhk03,
    rel_err,
    scan_negative_pt,
    scan_negative_ut,
    scan_positive,
)

from toim.cli import ExperimentSpec, epochs_to_fraction, main, run_convergence_compare
from toim.core import stable_softplus
from toim.evaluation import cmc_cuhk03, cmc_market, mean_ap
from toim.losses import (
    center_loss,
    oim_loss,
    softmax_ce_loss,
    toim_loss_arrays,
    triplet_loss_batchhard,
)
from toim.memory import PooledTable, UpdateTable
from toim.mining import (
    MiningConfig,
    build_batch,
    pk_batch,
    select_negative_pt,
    select_negative_ut,
    select_positive,
)
from toim.model import (
    LossKind,
    TrainConfig,
    embed,
    init_mlp,
    mlp_backward,
    mlp_forward,
    train,
)
from toim.synthdata import LabeledSet, SynthConfig, gen_dataset

SEEDS = (1, 2, 3)


@pytest.fixture
def verdict(capsys):
    def emit(number, name, ok, detail=""):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {name}"
                  + (f": {detail}" if detail else ""))
        assert ok, detail
    return emit


def test_criterion_1_log_space_identity(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    d_ap, d_an = 50.0 - rng.uniform(0.0, 50.0, size=(2, 10_000))  # (0, 50]
    # -log(e^{d_an} / (e^{d_an} + e^{d_ap})) evaluated in log space
    reference = np.logaddexp(d_an, d_ap) - d_an
    worst = float(np.max(np.abs(stable_softplus(d_ap - d_an) - reference)))
    elapsed = time.perf_counter() - start
    verdict(1, "log-space identity", worst <= 1e-9 and elapsed < 1.0,
            f"max abs error {worst:.2e}, {elapsed:.3f}s")


def _spread(x, min_dist=0.1):
    d = np.linalg.norm(x[:, None] - x[None], axis=2)
    return d[~np.eye(len(x), dtype=bool)].min() >= min_dist


def _toim_case(rng):
    while True:
        a, p, n = (rng.normal(size=(3, 5)) for _ in range(3))
        if min(np.linalg.norm(a - p, axis=1).min(), np.linalg.norm(a - n, axis=1).min()) >= 0.1:
            out = toim_loss_arrays(a, p, n)
            return rel_err(out.anchor_gradients,
                           central_diff(lambda x: toim_loss_arrays(x, p, n).value, a))


def _triplet_case(rng, margin=0.3):
    labels = np.repeat(np.arange(3), 2)
    while True:
        x = rng.normal(size=(6, 4))
        if not _spread(x):
            continue
        d = np.linalg.norm(x[:, None] - x[None], axis=2)
        smooth = True
        for i in range(6):
            neg = np.sort(d[i, labels != labels[i]])
            pos = d[i, (labels == labels[i]) & (np.arange(6) != i)].max()
            # stay away from argmin switches and the hinge corner
            if neg[1] - neg[0] < 1e-3 or abs(margin + pos - neg[0]) < 1e-3:
                smooth = False
        if smooth:
            out = triplet_loss_batchhard(x, labels, margin)
            assert abs(out.value - brute_triplet(x, labels, margin)) < 1e-12
            return rel_err(out.anchor_gradients, central_diff(
                lambda z: triplet_loss_batchhard(z, labels, margin).value, x))


def _softmax_case(rng):
    z = rng.normal(size=(3, 4)) * 2
    y = rng.integers(0, 4, size=3)
    out = softmax_ce_loss(z, y)
    return rel_err(out.anchor_gradients, central_diff(lambda v: softmax_ce_loss(v, y).value, z))


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _oim_case(rng, temperature=0.1):
    lut, x, cq = _unit(rng.normal(size=(5, 4))), _unit(rng.normal(size=(2, 4))), \
        _unit(rng.normal(size=(3, 4)))
    y = rng.integers(0, 5, size=2)
    out = oim_loss(x, y, lut, cq, temperature=temperature)

    def value(z):  # the same softmax written out with logsumexp
        s = z @ np.vstack([lut, cq]).T / temperature
        top = s.max(axis=1, keepdims=True)
        lse = top[:, 0] + np.log(np.exp(s - top).sum(axis=1))
        return float(np.mean(lse - s[np.arange(2), y]))
    return rel_err(out.anchor_gradients, central_diff(value, x))


def _center_case(rng):
    centers = rng.normal(size=(3, 4))
    y = rng.integers(0, 3, size=4)
    x = rng.normal(size=(4, 4))
    out = center_loss(x, y, centers)
    return rel_err(out.anchor_gradients, central_diff(lambda z: center_loss(z, y, centers).value, x))


def _mlp_case(rng):
    p = init_mlp(4, 8, 4, seed=int(rng.integers(1 << 30)))
    while True:
        x = rng.normal(size=(3, 4))
        if np.abs(x @ p["W1"].T + p["b1"]).min() > 1e-3:  # keep ReLUs off their kink
            break
    pos, neg = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    feats, cache = mlp_forward(p, x)
    grads = mlp_backward(p, cache, toim_loss_arrays(feats, pos, neg).anchor_gradients)
    worst = 0.0
    for name in ("W1", "b1", "W2", "b2"):
        def value(arr, name=name):
            q = p.copy()
            q.arrays[name] = arr
            return toim_loss_arrays(mlp_forward(q, x)[0], pos, neg).value
        worst = max(worst, rel_err(grads[name], central_diff(value, p[name])))
    return worst


def test_criterion_2_gradient_oracles(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    cases = {"toim": _toim_case, "triplet": _triplet_case, "softmax": _softmax_case,
             "oim": _oim_case, "center": _center_case, "toim-through-mlp": _mlp_case}
    worst = {name: max(fn(rng) for _ in range(100)) for name, fn in cases.items()}
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 10.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(2, "gradient oracles", ok, f"worst relative errors {detail}; {elapsed:.2f}s")


def test_criterion_3_ema_exactness(verdict):
    rng = np.random.default_rng(3)
    mismatches = 0
    for trial in range(1000):
        d = int(rng.integers(1, 9))
        v, f = rng.normal(size=d) * 10, rng.normal(size=d) * 10
        gamma = (0.0, 1.0)[trial % 2] if trial < 100 else float(rng.random())
        pt = PooledTable(1, 1, d)
        pt.update((0, 0), v, 0.5)
        pt.update((0, 0), f, gamma)
        expected = gamma * v + (1.0 - gamma) * f
        if gamma == 0.0:
            expected = f
        elif gamma == 1.0:
            expected = v
        mismatches += not np.array_equal(pt.slots[0, 0], expected)
    verdict(3, "EMA exactness", mismatches == 0, f"{mismatches} of 1000 trials differ")


def test_criterion_4_metric_oracles(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    done = mismatched = 0
    while done < 200:
        nq, ng = int(rng.integers(1, 11)), int(rng.integers(2, 21))
        gid, gcam = rng.integers(0, 4, size=ng), rng.integers(0, 3, size=ng)
        qid, qcam = rng.choice(np.unique(gid), size=nq), rng.integers(0, 3, size=nq)
        if not all(np.any((gid == i) & (gcam != c)) for i, c in zip(qid, qcam)):
            continue
        grid = done % 2 == 0  # half the instances on an integer grid, to force ties
        draw = (lambda n: rng.integers(-2, 3, size=(n, 2)).astype(float)) if grid else \
            (lambda n: rng.normal(size=(n, 2)))
        qX, gX = draw(nq), draw(ng)
        q, g = LabeledSet(qX, qid, qcam), LabeledSet(gX, gid, gcam)
        same = (cmc_market(q, g, ng).tolist() == brute_market(qX, qid, qcam, gX, gid, gcam, ng)
                and mean_ap(q, g) == brute_map(qX, qid, qcam, gX, gid, gcam))
        mismatched += not same
        done += 1
    fx = np.random.default_rng(12)
    gX, gid = fx.normal(size=(15, 3)), np.repeat(np.arange(5), 3)
    qX, qid = fx.normal(size=(5, 3)), np.arange(5)
    exact = np.array(exhaustive_cuhk03(qX, qid, gX, gid, 5))
    est = cmc_cuhk03(LabeledSet(qX, qid, np.zeros(5, int)), LabeledSet(gX, gid, np.zeros(15, int)),
                     5, repetitions=1000, seed=0)
    gap = float(np.max(np.abs(est - exact)))
    elapsed = time.perf_counter() - start
    ok = mismatched == 0 and gap < 0.03 and elapsed < 30.0
    verdict(4, "metric oracles", ok,
            f"{mismatched}/200 brute-force mismatches, CUHK03 gap {gap:.4f}, {elapsed:.2f}s")


def test_criterion_5_mining(verdict):
    rng = np.random.default_rng(5)
    wrong = checked = 0
    for _ in range(500):
        m, c, d = int(rng.integers(2, 11)), int(rng.integers(1, 6)), int(rng.integers(1, 3))
        if m * c > 50:
            c = 50 // m
        pt = PooledTable(m, c, d)
        for i in range(m):
            for cam in range(c):
                if rng.random() < 0.7:
                    pt.update((i, cam), rng.integers(-1, 2, size=d).astype(float), 0.5)
        ut = UpdateTable(int(rng.integers(1, 21)))
        for _ in range(int(rng.integers(0, 30))):
            ut.push((int(rng.integers(m)), int(rng.integers(c))))
        anchor = rng.integers(-1, 2, size=d).astype(float)
        ident = int(rng.integers(m))
        if pt.initialized[ident].any():
            wrong += select_positive(anchor, ident, pt)[1] != scan_positive(anchor, ident, pt)
            checked += 1
        others = pt.initialized.copy()
        others[ident] = False
        if others.any():
            ref_pt = scan_negative_pt(anchor, ident, pt)
            ref_ut = scan_negative_ut(anchor, ident, ut, pt) or ref_pt
            wrong += select_negative_pt(anchor, ident, pt)[1] != ref_pt
            wrong += select_negative_ut(anchor, ident, ut, pt)[1] != ref_ut
            checked += 2
    verdict(5, "mining correctness", wrong == 0, f"{wrong} of {checked} selections differ")


def _rank1(kind, seed):
    data = gen_dataset(SynthConfig(seed=seed))
    state = train(data.train.X, data.train.identities, data.train.cameras,
                  TrainConfig(seed=seed), kind, num_cameras=5)
    q = LabeledSet(embed(state, data.query.X), data.query.identities, data.query.cameras)
    g = LabeledSet(embed(state, data.gallery.X), data.gallery.identities, data.gallery.cameras)
    return float(cmc_market(q, g, 1)[0])


def test_criterion_6_loss_ordering(verdict):
    start = time.perf_counter()
    rivals = (LossKind.SOFTMAX, LossKind.OIM, LossKind.TRIPLET)
    within, strict, lines = True, 0, []
    for seed in SEEDS:
        toim = _rank1(LossKind.TOIM, seed)
        others = {k.value: _rank1(k, seed) for k in rivals}
        within &= all(toim >= v - 0.02 for v in others.values())
        strict += all(toim > v for v in others.values())
        lines.append(f"seed {seed}: toim {toim:.2f} "
                     + " ".join(f"{k} {v:.2f}" for k, v in others.items()))
    elapsed = time.perf_counter() - start
    ok = within and strict >= 2 and elapsed < 300
    verdict(6, "loss ordering", ok,
            f"{'; '.join(lines)}; strict max on {strict}/3 seeds; {elapsed:.0f}s")


def test_criterion_7_convergence(verdict, tmp_path):
    wins, lines = 0, []
    for seed in SEEDS:
        spec = ExperimentSpec(train=TrainConfig(seed=seed), synth=SynthConfig(seed=seed),
                              out=str(tmp_path / str(seed)))
        summary = run_convergence_compare(spec)
        t, r = (summary[k]["epochs_to_half"] for k in ("toim", "triplet"))
        assert t == epochs_to_fraction(summary["toim"]["losses"])
        wins += t is not None and (r is None or t <= r)
        lines.append(f"seed {seed}: toim {t} triplet {r}")
    verdict(7, "convergence ordering", wins >= 2,
            f"epochs to half loss, {'; '.join(lines)}; TOIM no slower on {wins}/3")


def test_criterion_8_batch_flexibility(verdict):
    rng = np.random.default_rng(8)
    ids = np.arange(15)
    keys = [(int(i), int(i % 3)) for i in ids]
    feats = rng.normal(size=(15, 4))
    pt = PooledTable(20, 3, 4)
    for i in range(20):
        pt.update((i, i % 3), rng.normal(size=4), 0.4)
    records = build_batch(feats, keys, pt, UpdateTable(20), MiningConfig(anchors_per_batch=15))
    toim_ok = len(records) == 15
    try:
        pk_batch(ids, 5, 3, seed=0)
        message = None
    except ValueError as exc:
        message = str(exc)
    ok = toim_ok and message is not None and "P x K" in message
    verdict(8, "batch flexibility", ok,
            f"TOIM built {len(records)} triplets; P x K constructor said: {message}")


def test_criterion_9_determinism(verdict, tmp_path):
    names = ("loss_curve.csv", "checkpoint.npz", "experiment.json", "eval_report.json",
             "cmc_curve.csv", "pca_points.csv", "embeddings.csv")
    sweep = ("sweep.csv", "sweep_loss_curves.csv")
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["train", "--seed", "7", "--out", str(out / "t")]) == 0
        assert main(["eval", "--out", str(out / "t")]) == 0
        assert main(["sweep", "--axis", "gamma", "--values", "0.2,0.6", "--seed", "7",
                     "--out", str(out / "s")]) == 0
    differing = [n for n in names
                 if (tmp_path / "a/t" / n).read_bytes() != (tmp_path / "b/t" / n).read_bytes()]
    differing += [n for n in sweep
                  if (tmp_path / "a/s" / n).read_bytes() != (tmp_path / "b/s" / n).read_bytes()]
    verdict(9, "determinism", not differing,
            f"differing files: {differing}" if differing else "all outputs byte-identical")

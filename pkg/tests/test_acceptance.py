"""Acceptance suite: every criterion runs at its stated tolerance and prints
one pass/fail line. Run with ``pytest tests/test_acceptance.py -v -s``.

The synthetic benchmark (criteria 7 and 8) trains ten paired seeds once in a
module fixture and reuses the results for both criteria.
"""

import itertools
import json
import time

import numpy as np
import pytest

from sitemeta import tensor as T
from sitemeta.cli import main as cli_main
from sitemeta.data import Episode, mosaic_preprocess, synth_generate
from sitemeta.evaluation import (
    finetune_few_shot,
    paramset_digest,
    scratch_baseline,
    transfer_baseline,
    zero_shot_eval,
)
from sitemeta.meta import (
    CheckpointEntry,
    CheckpointRing,
    LearnableLRTable,
    MetaConfig,
    batch_loss,
    episode_loss,
    meta_train,
)
from sitemeta.metrics import balanced_accuracy, roc_auc
from sitemeta.models import Batch, ModelSpec, forward, init_params
from sitemeta.tensor import ParamSet, finite_diff_grad, grad


def report(criterion, passed, detail):
    print(f"[criterion {criterion}] {'PASS' if passed else 'FAIL'} - {detail}")
    assert passed, f"criterion {criterion}: {detail}"


# ---------------------------------------------------------------------------
# criterion 1: second-order meta-gradient vs central finite differences

def test_criterion_1_meta_gradient_oracle():
    spec = ModelSpec.mlp([3, 4, 1])  # 21 parameters
    assert spec.param_count() <= 50
    started = time.time()
    worst = 0.0
    for trial in range(20):
        rng = np.random.default_rng(100 + trial)
        steps = 1 + trial % 3
        cfg = MetaConfig(inner_steps=steps, k_support=6, t_target=4,
                         msl_anneal_epochs=7, order="second", seed=trial)
        params = init_params(spec, trial)
        lr = LearnableLRTable.from_values(
            {n: rng.uniform(0.05, 0.3, steps) for n in params.names})
        support = Batch.from_arrays(rng.normal(size=(6, 3)),
                                    np.array([0.0, 1.0, 0.0, 1.0, 0.0, 1.0]))
        target = Batch.from_arrays(rng.normal(size=(4, 3)), np.array([0.0, 1.0, 1.0, 0.0]))
        episode = Episode([0], support, target)
        loss, _ = episode_loss(spec, params, episode, lr, cfg, epoch=2)
        auto = grad(loss, params)
        numeric = finite_diff_grad(
            lambda p: episode_loss(spec, p, episode, lr, cfg, epoch=2)[0], params, 1e-5)
        for name in params.names:
            a, n = auto[name].data, numeric[name].data
            rel = np.abs(a - n) / np.maximum(np.abs(n), 1e-6)
            worst = max(worst, float(rel.max()))
    elapsed = time.time() - started
    report(1, worst < 1e-4 and elapsed < 30.0,
           f"worst relative error {worst:.2e} (tol 1e-4), {elapsed:.1f}s (budget 30s)")


# ---------------------------------------------------------------------------
# criterion 2: analytic bilevel values

def test_criterion_2_analytic_bilevel():
    params = ParamSet([("theta", T.parameter(1.0))])
    lr = LearnableLRTable.from_values({"theta": np.array([0.1])})
    cfg = MetaConfig(inner_steps=1)
    quad = lambda p, b: T.mul(p["theta"], p["theta"])
    batch = Batch.from_arrays(np.zeros((1, 1)), np.zeros(1))
    loss, _ = episode_loss(None, params, Episode([0], batch, batch), lr, cfg, loss_fn=quad)
    loss_err = abs(float(loss.data) - 0.64)
    grad_err = abs(float(grad(loss, params)["theta"].data) - 1.28)
    report(2, loss_err < 1e-10 and grad_err < 1e-10,
           f"loss error {loss_err:.2e}, meta-gradient error {grad_err:.2e} (tol 1e-10)")


# ---------------------------------------------------------------------------
# criterion 3: zero inner LR degeneracy

def test_criterion_3_zero_lr_degeneracy():
    spec = ModelSpec.mlp([4, 5, 1])
    params = init_params(spec, 3)
    rng = np.random.default_rng(3)
    labels = np.array([0.0, 1.0, 1.0, 0.0, 1.0])
    episode = Episode([0],
                      Batch.from_arrays(rng.normal(size=(5, 4)), labels),
                      Batch.from_arrays(rng.normal(size=(5, 4)), labels))
    cfg = MetaConfig(inner_steps=3, msl_anneal_epochs=5)
    zero_lr = LearnableLRTable.from_values({n: np.zeros(3) for n in params.names})
    loss, _ = episode_loss(spec, params, episode, zero_lr, cfg, epoch=1)
    plain = batch_loss(spec, params, episode.target)
    loss_err = abs(float(loss.data) - float(plain.data))
    g_meta, g_plain = grad(loss, params), grad(plain, params)
    grad_err = max(float(np.max(np.abs(g_meta[n].data - g_plain[n].data)))
                   for n in params.names)
    report(3, loss_err < 1e-10 and grad_err < 1e-10,
           f"loss gap {loss_err:.2e}, gradient gap {grad_err:.2e} (tol 1e-10)")


# ---------------------------------------------------------------------------
# criterion 4: first/second-order agreement on a linear model

def test_criterion_4_order_agreement_linear_model():
    spec = ModelSpec.mlp([4, 1])
    params = init_params(spec, 4)
    labels = np.array([0.0, 1.0, 0.0, 1.0])
    batch = Batch.from_arrays(np.eye(4), labels)  # identity features
    episode = Episode([0], batch, batch)
    lr = LearnableLRTable.from_values({n: np.full(2, 0.2) for n in params.names})

    def linear_margin(p, b):
        signs = T.constant(1.0 - 2.0 * b.labels.data)
        return T.mean(T.mul(forward(spec, p, b), signs))

    grads = {}
    for order in ("second", "first"):
        cfg = MetaConfig(inner_steps=2, order=order, msl_anneal_epochs=3)
        loss, _ = episode_loss(spec, params, episode, lr, cfg, epoch=1, loss_fn=linear_margin)
        grads[order] = grad(loss, params)
    gap = max(float(np.max(np.abs(grads["second"][n].data - grads["first"][n].data)))
              for n in params.names)
    report(4, gap < 1e-8, f"largest meta-gradient gap {gap:.2e} (tol 1e-8)")


# ---------------------------------------------------------------------------
# criterion 5: ROC-AUC vs brute force, plus metric invariants

def test_criterion_5_roc_auc_oracle_and_invariants():
    def brute(scores, labels):
        pos = [s for s, y in zip(scores, labels) if y == 1]
        neg = [s for s, y in zip(scores, labels) if y == 0]
        hits = sum(1.0 if p > n else (0.5 if p == n else 0.0)
                   for p, n in itertools.product(pos, neg))
        return hits / (len(pos) * len(neg))

    rng = np.random.default_rng(55)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 13))
        scores = rng.integers(0, 6, n).astype(float)  # repeated values force ties
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0], labels[-1] = 0, 1
        worst = max(worst, abs(roc_auc(scores, labels) - brute(scores, labels)))

    inv_ok = True
    for seed in range(30):
        r = np.random.default_rng(seed)
        n = int(r.integers(4, 20))
        scores = r.permutation(np.arange(n).astype(float))
        labels = r.integers(0, 2, n)
        labels[0], labels[-1] = 0, 1
        auc = roc_auc(scores, labels)
        inv_ok &= abs(auc + roc_auc(scores, 1 - labels) - 1.0) < 1e-12
        inv_ok &= abs(roc_auc(np.exp(0.5 * scores), labels) - auc) < 1e-12
        probs = r.random(n)
        perm = r.permutation(n)
        inv_ok &= abs(balanced_accuracy(probs, labels)
                      - balanced_accuracy(probs[perm], labels[perm])) < 1e-12
    report(5, worst == 0.0 and inv_ok,
           f"max brute-force gap {worst:.2e} over 200 instances, invariants {'hold' if inv_ok else 'fail'}")


# ---------------------------------------------------------------------------
# criterion 6: mosaic shape contract

def test_criterion_6_mosaic_contract():
    shapes_ok = True
    for shape in [(32, 32, 32), (91, 91, 91), (128, 96, 80)]:
        vol = np.random.default_rng(6).normal(size=shape)
        shapes_ok &= mosaic_preprocess(vol).shape == (68, 432)
    const_gap = float(np.max(np.abs(mosaic_preprocess(np.full((40, 50, 60), 3.25)) - 3.25)))
    report(6, shapes_ok and const_gap < 1e-9,
           f"all shapes 68x432: {shapes_ok}, constant-volume gap {const_gap:.2e} (tol 1e-9)")


# ---------------------------------------------------------------------------
# criteria 7 + 8: the synthetic benchmark (trained once, reused)

N_SEEDS = 10


@pytest.fixture(scope="module")
def benchmark():
    spec = ModelSpec.mlp([32, 24, 1])
    rows = []
    started = time.time()
    for seed in range(N_SEEDS):
        table = synth_generate(38, 160, 1.0, seed, split=(30, 7, 1))
        cfg = MetaConfig(seed=seed)
        ring, _ = meta_train(table, spec, cfg)
        few = finetune_few_shot(ring, table, cfg, np.random.default_rng(seed))
        transfer = transfer_baseline(table, spec, cfg)
        scratch = scratch_baseline(table, spec, cfg)
        zero = zero_shot_eval(ring.best(), table)
        names = init_params(spec, 0).names
        nulls = []
        for j in range(100):
            entry = CheckpointEntry(
                score=0.0, epoch=0, spec=spec,
                params=dict(init_params(spec, 50_000 + 100 * seed + j).as_arrays()),
                lr_values={n: np.full(cfg.inner_steps, cfg.inner_lr_init) for n in names},
                config=cfg,
            )
            nulls.append(zero_shot_eval(entry, table).pooled_auc)
        rows.append({
            "seed": seed,
            "ring_size": len(ring),
            "few_report": few,
            "few": few.pooled_auc,
            "transfer": transfer.pooled_auc,
            "scratch": scratch.pooled_auc,
            "zero": zero.pooled_auc,
            "zero_digest_ok": zero.metadata["param_digest"] == paramset_digest(ring.best().param_set()),
            "null95": float(np.quantile(nulls, 0.95)),
        })
    return {"rows": rows, "elapsed": time.time() - started}


def test_criterion_7_table_ii_ordering(benchmark):
    rows = benchmark["rows"]
    wins = sum(r["few"] > r["transfer"] > r["scratch"] for r in rows)
    scores = np.array([s for r in rows for s in r["few_report"].scores])
    labels = np.array([y for r in rows for y in r["few_report"].labels])
    observed = roc_auc(scores, labels)
    rng = np.random.default_rng(777)
    exceed = sum(roc_auc(scores, rng.permutation(labels)) >= observed for _ in range(1000))
    p_value = (exceed + 1) / 1001
    for r in rows:
        print(f"    seed {r['seed']}: meta={r['few']:.3f} transfer={r['transfer']:.3f} "
              f"scratch={r['scratch']:.3f}")
    within_budget = benchmark["elapsed"] < 900.0
    report(7, wins >= 8 and observed > 0.5 and p_value < 0.01 and within_budget,
           f"ordering holds {wins}/10 (need 8), pooled meta AUC {observed:.3f}, "
           f"permutation p {p_value:.4f} (need < 0.01), "
           f"benchmark {benchmark['elapsed']:.0f}s (budget 900s)")


def test_criterion_8_zero_shot_contract(benchmark):
    rows = benchmark["rows"]
    digests_ok = all(r["zero_digest_ok"] for r in rows)
    beats_null = sum(r["zero"] > r["null95"] for r in rows)
    for r in rows:
        print(f"    seed {r['seed']}: zero-shot={r['zero']:.3f} null95={r['null95']:.3f}")
    report(8, digests_ok and beats_null >= 7,
           f"parameter digests unchanged: {digests_ok}, "
           f"zero-shot beats null 95th percentile {beats_null}/10 (need 7)")


# ---------------------------------------------------------------------------
# criterion 9: CLI determinism

def test_criterion_9_cli_determinism(tmp_path):
    def run(argv):
        assert cli_main([str(a) for a in argv]) == 0

    def blob(path):
        with open(path, "rb") as fh:
            return fh.read()

    def json_no_ts(path):
        with open(path) as fh:
            payload = json.load(fh)
        payload.pop("timestamp")
        return payload

    gen = ["gen-data", "--sites", "8", "--n_per_site", "24", "--split", "5/2/1",
           "--feature_shape", "8", "--seed", "4", "--threads", "1"]
    train = ["meta-train", "--seed", "4", "--threads", "1", "--hidden", "8",
             "--max_epochs", "2", "--episodes_per_epoch", "3", "--inner_steps", "2",
             "--k_support", "4", "--t_target", "4", "--val_episodes", "2"]
    results = []
    for tag in ("a", "b"):
        d = tmp_path / f"data_{tag}"
        run(gen + ["--out", d])
        data = d / "dataset.bin"
        tr = tmp_path / f"train_{tag}"
        run(train + ["--data", data, "--out", tr])
        te = tmp_path / f"test_{tag}"
        run(["meta-test", "--data", data, "--ring", tr / "checkpoints.bin", "--seed", "4",
             "--threads", "1", "--k_support", "4", "--t_target", "4", "--inner_steps", "2",
             "--out", te])
        ze = tmp_path / f"zero_{tag}"
        run(["zero-shot", "--data", data, "--ring", tr / "checkpoints.bin", "--seed", "4",
             "--threads", "1", "--out", ze])
        ba = tmp_path / f"base_{tag}"
        run(["baseline", "--mode", "scratch", "--data", data, "--seed", "4", "--threads", "1",
             "--k_support", "4", "--max_epochs", "2", "--hidden", "8",
             "--finetune_sites", "2", "--out", ba])
        dw = tmp_path / f"wide_{tag}"  # pools large enough for the search grid
        run(["gen-data", "--sites", "8", "--n_per_site", "64", "--split", "5/2/1",
             "--feature_shape", "8", "--seed", "4", "--threads", "1", "--out", dw])
        se = tmp_path / f"search_{tag}"
        run(["search", "--data", dw / "dataset.bin", "--n_trials", "2", "--seed", "4",
             "--threads", "1", "--hidden", "8", "--max_epochs", "2", "--inner_steps", "1",
             "--episodes_per_epoch", "2", "--val_episodes", "1", "--out", se])
        results.append((d, tr, te, ze, ba, se))

    (da, ta, tea, za, baa, sa), (db, tb, teb, zb, bab, sb) = results
    same = True
    same &= blob(da / "dataset.bin") == blob(db / "dataset.bin")
    same &= blob(ta / "checkpoints.bin") == blob(tb / "checkpoints.bin")
    same &= blob(ta / "log.csv") == blob(tb / "log.csv")
    for x, y in ((tea, teb), (za, zb), (baa, bab)):
        same &= json_no_ts(x / "report.json") == json_no_ts(y / "report.json")
        same &= blob(x / "report.csv") == blob(y / "report.csv")
    same &= blob(sa / "trials.csv") == blob(sb / "trials.csv")
    same &= blob(sa / "best_config.cfg") == blob(sb / "best_config.cfg")
    report(9, same, "gen-data, meta-train, meta-test, zero-shot, baseline and search "
           "rerun byte-identically (timestamps excluded)")


# ---------------------------------------------------------------------------
# criterion 10: checkpoint ring behavior

def test_criterion_10_checkpoint_ring(benchmark):
    def entry(score, epoch):
        return CheckpointEntry(score=score, epoch=epoch, spec=ModelSpec.mlp([2, 1]),
                               params={"dense0/w": np.zeros((2, 1)), "dense0/b": np.zeros(1)},
                               lr_values={"dense0/w": np.array([0.1]), "dense0/b": np.array([0.1])},
                               config=MetaConfig())

    rng = np.random.default_rng(10)
    props = True
    for _ in range(200):
        ring = CheckpointRing()
        stream = rng.random(int(rng.integers(0, 20)))
        for epoch, score in enumerate(stream):
            ring.add(entry(round(float(score), 1), epoch))
        props &= len(ring.entries) <= 5
        scores = [e.score for e in ring.entries]
        props &= scores == sorted(scores, reverse=True)
        props &= all(a.epoch < b.epoch for a, b in zip(ring.entries, ring.entries[1:])
                     if a.score == b.score)
        if len(stream):
            props &= ring.best().score == round(float(stream.max()), 1)

    rows = benchmark["rows"]
    consumed = all(r["ring_size"] == 5 and
                   r["few_report"].metadata["n_checkpoints"] == 5 and
                   len(r["few_report"].metadata["selection_auc"]) == 5
                   for r in rows)
    report(10, props and consumed,
           f"ring invariants hold over 200 random streams: {props}; "
           f"meta-test consumed exactly the top 5 checkpoints in all runs: {consumed}")

"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from acceptance_log import Criterion
from mfnrec.baseline import VanillaConfig, pretrain_vanilla
from mfnrec.centers import entropy_losses, max_entropy_bound, pretrain_centers, purity
from mfnrec.checkpoint import load_checkpoint, save_checkpoint
from mfnrec.cli import main
from mfnrec.config import RunConfig
from mfnrec.data import collate
from mfnrec.gradcheck import run_gradcheck
from mfnrec.synthgen import gaussian_item_table, generate_dataset, generate_world
from mfnrec.traineval import (
    CenterConfig,
    RelaImprError,
    TrainConfig,
    auc,
    build_model,
    compare,
    fit_channel_centers,
    format_table,
    rela_impr,
    summarize,
    train_model,
)


def test_criterion_1_gradients():
    with Criterion(1, "finite differences agree with backward for every parameter") as c:
        t0 = time.perf_counter()
        report = run_gradcheck(seed=7)
        elapsed = time.perf_counter() - t0
        worst = max(report.errors, key=report.errors.get)
        c.note(f"{len(report.errors)} parameters, max rel err {report.max_error:.2e} at {worst}, {elapsed:.1f}s")
        names = set(report.errors)
        for part in ("msa.wq", "W1", "W2", "agg_sim.0.W", "agg_comb.0.W", "centers", "head.0.W", "emb.entities"):
            assert any(part in n for n in names), part
        assert report.max_error < 1e-4
        assert all(g is None for g in report.frozen_center_grads)
        assert elapsed < 60.0


def test_criterion_2_entropy_law():
    with Criterion(2, "entropy parts bounded, l_e = l_se - l_me, balanced one-hot is the minimum") as c:
        rng = np.random.default_rng(2024)
        count = 0
        for _ in range(10_000):
            K = int(rng.integers(1, 9))
            N = int(rng.integers(1, 13))
            x = rng.normal(size=(N, K)) * rng.choice([0.1, 1.0, 5.0, 50.0])
            P = np.exp(x - x.max(axis=1, keepdims=True))
            P /= P.sum(axis=1, keepdims=True)
            parts = entropy_losses(P)
            bound = max_entropy_bound(K)
            assert -1e-15 <= parts.l_se <= bound + 1e-12
            assert -1e-15 <= parts.l_me <= bound + 1e-12
            assert abs(parts.l_e - (parts.l_se - parts.l_me)) <= 1e-12
            assert parts.l_e >= -bound - 1e-12
            count += 1
        for K in range(1, 9):
            for reps in (1, 3):
                P = np.tile(np.eye(K), (reps, 1))
                assert abs(entropy_losses(P).l_e + math.log(K) / K) <= 1e-12
        c.note(f"{count} random matrices, minimizers for K=1..8")


def _center_corpus(seed):
    cfg = RunConfig(users=2000, examples_per_user=1, test_fraction=0.0, min_interests=3, seed=seed).world()
    catalog, users = generate_world(cfg)
    train, _ = generate_dataset(catalog, users, cfg)
    table = gaussian_item_table(catalog, 16, seed=seed)
    seqs = {}
    for ex in train:
        seqs.setdefault(ex.user, ex.seq)
    ordered = [seqs[u] for u in sorted(seqs)]
    corpus = np.stack([table[[it.iid for it in s.items]] for s in ordered])
    labels = np.stack([s.archetypes for s in ordered])
    return corpus, labels


def test_criterion_3_center_recovery():
    with Criterion(3, "pretrained centers recover the four archetypes") as c:
        t0 = time.perf_counter()
        purities, drops = [], []
        for seed in range(5):
            corpus, labels = _center_corpus(seed)
            assert len(corpus) >= 2000
            centers = pretrain_centers(corpus, K=4, lr=1e-2, batch_size=64, max_iters=300, seed=seed, eval_every=50)
            purities.append(purity(centers, corpus, labels))
            drops.append(centers.history[-1][1] <= centers.history[0][1])
        elapsed = time.perf_counter() - t0
        c.note("purity " + ", ".join(f"{p:.3f}" for p in purities) + f", {elapsed:.0f}s")
        assert sum(p >= 0.9 for p in purities) >= 4
        assert all(drops)
        assert elapsed < 120.0


def test_criterion_4_auc_oracle():
    with Criterion(4, "fast AUC equals the pairwise count on 200 tie-heavy instances") as c:
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(200):
            n = int(rng.integers(2, 1001))
            levels = int(rng.integers(1, 20))
            scores = rng.integers(levels, size=n) / levels
            labels = rng.integers(2, size=n)
            labels[:2] = [0, 1]
            pos, neg = scores[labels == 1], scores[labels == 0]
            diff = pos[:, None] - neg[None, :]
            brute = ((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (len(pos) * len(neg))
            worst = max(worst, abs(auc(scores, labels) - brute))
        c.note(f"max gap {worst:.1e}")
        assert worst <= 1e-12


def test_criterion_5_rela_impr():
    with Criterion(5, "RelaImpr arithmetic"):
        assert rela_impr(0.7, 0.7) == 0.0
        assert f"{rela_impr(0.7, 0.7):.2f}%" == "0.00%"
        assert abs(rela_impr(0.72, 0.70) - 10.0) < 1e-9
        assert f"{rela_impr(0.72, 0.70):.1f}" == "10.0"
        with pytest.raises(RelaImprError):
            rela_impr(0.8, 0.5)


@pytest.fixture(scope="module")
def default_data():
    cfg = RunConfig()
    world = cfg.world()
    train, test = generate_dataset(*generate_world(world), world)
    return cfg, train, test


@pytest.mark.slow
def test_criterion_6_mfn_beats_base(default_data):
    cfg, train, test = default_data
    with Criterion(6, "full MFN beats Base on the default synthetic data") as c:
        t0 = time.perf_counter()
        rows = compare(cfg.variant_list, train, test, [0, 1, 2], cfg.model_spec("mfn"), cfg.train_config(),
                       cfg.vanilla_config(), cfg.center_config())
        elapsed = time.perf_counter() - t0
        print(format_table(rows))
        means = {v: a for v, a, _ in summarize(rows)}
        lifts = {v: ri for v, _, ri in summarize(rows)}
        gap = means["mfn"] - means["base"]
        # per-seed RelaImpr blows up (and flips sign) when a seed's base AUC sits
        # at or under 0.5, so the lift is taken on the seed means
        lift = rela_impr(means["mfn"], means["base"])
        ranked = sorted((v for v in means if v != "base"), key=lambda v: -means[v])
        c.note(f"AUC base {means['base']:.4f} mfn {means['mfn']:.4f} gap {gap:+.4f}; "
               f"RelaImpr of means {lift:+.1f}%; mean-seed RelaImpr {lifts['mfn']:+.1f}%; "
               f"AUC order {' > '.join(ranked)}; {elapsed / 60:.1f} min")
        assert gap >= 0.01
        assert means["base"] > 0.5 and lift > 0
        assert elapsed < 15 * 60


def test_criterion_7_normalization(default_data):
    cfg, train, test = default_data
    with Criterion(7, "every softmax distribution in a forward pass sums to one") as c:
        spec = cfg.model_spec("mfn")
        fixed = pretrain_vanilla(train, VanillaConfig(dim=spec.dim, steps=50, lr=1e-2, vocab=spec.vocab))
        model = build_model(spec, fixed, fit_channel_centers(fixed, train, spec, CenterConfig(max_iters=50)))
        rng = np.random.default_rng(7)
        pick = rng.choice(len(test), size=100, replace=False)
        trace = {}
        model.probabilities(collate([test[int(i)] for i in pick]), trace)
        worst = 0.0
        checked = 0
        for key in ("P", "A", "w1", "w2", "msa"):
            assert trace[key], key
            for arr in trace[key]:
                worst = max(worst, float(np.abs(arr.sum(axis=-1) - 1.0).max()))
                checked += arr.size // arr.shape[-1]
        c.note(f"{checked} distributions over 100 examples, max deviation {worst:.1e}")
        assert worst <= 1e-12


SMALL_PIPELINE = """users=300
examples_per_user=20
seeds=0,1
embed_steps=100
center_iters=100
"""


def test_criterion_8_determinism(tmp_path, default_data):
    with Criterion(8, "reruns give byte-identical metrics; checkpoints reproduce scores") as c:
        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text(SMALL_PIPELINE)
        outputs = []
        for run in ("a", "b"):
            out = tmp_path / run
            assert main(["compare", "--config", str(cfg_path), "--out-dir", str(out)]) == 0
            outputs.append((out / "metrics.csv").read_bytes())
        assert outputs[0] == outputs[1]
        n_rows = outputs[0].count(b"\n") - 1
        c.note(f"metrics.csv identical across two runs ({n_rows} rows)")

        cfg, train, test = default_data
        spec = cfg.model_spec("mfn")
        fixed = pretrain_vanilla(train, VanillaConfig(dim=spec.dim, steps=20, lr=1e-2, vocab=spec.vocab))
        model = build_model(spec, fixed, fit_channel_centers(fixed, train, spec, CenterConfig(max_iters=20)))
        train_model(model, train, TrainConfig(max_steps=10))
        save_checkpoint(model, spec, tmp_path / "m.ckpt", cfg.as_dict())
        restored, _, _ = load_checkpoint(tmp_path / "m.ckpt")
        before = model.predict(test.examples)
        after = restored.predict(test.examples)
        assert before.tobytes() == after.tobytes()
        c.note(f"{len(test)} test scores bit-identical after reload")

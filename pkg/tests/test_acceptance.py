"""Acceptance suite: one test per criterion, summarised at the end of the run.

Criteria 6-9 share one session-scoped benchmark: three seeds of base
training on the 6-base / 2-novel synthetic set, followed by CPE, strong
baseline and frozen baseline fine-tunes at K = 5 and K = 10.
"""
import itertools
import json
import math
import statistics
import time

import numpy as np
import pytest
import torch

from fsce.cli import main as cli_main
from fsce.cpe import CpeConfig, ProposalRecord, cpe_loss, cpe_loss_and_grad, per_anchor_loss
from fsce.data import build_kshot_split, generate_synthetic, save_dataset
from fsce.detector import (DetectorConfig, collect_stats, fine_tune, frozen_baseline_config, save_checkpoint,
                           strong_baseline_config, train_base)
from fsce.evaluation import average_precision, cluster_statistics, evaluate, export_embeddings
from fsce.heads import CosineClassifierWeights, cosine_logits

from oracles import brute_cpe, enumerate_ap, greedy_labels

MODES = ("one", "linear", "expm1")
TAUS = (0.07, 0.2, 0.5)
PHIS = (0.0, 0.5, 0.7)

SEEDS = (0, 1, 2)
KS = (5, 10)
BASE_STEPS = 2000
FINETUNE_STEPS = 400
POOL_IMAGES, BASE_IMAGES, TEST_IMAGES = 300, 300, 150


def criterion(n, title):
    return pytest.mark.criterion(n, title)


def report(n, ok, detail):
    print(f"[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")


def batch(rng, n, dim=8, labels=3):
    z = rng.normal(size=(n, dim))
    u = rng.uniform(0.0, 1.0, size=n)
    y = rng.integers(0, labels, size=n)
    return z, u, y


def records(z, u, y):
    return [ProposalRecord(z[i], float(u[i]), int(y[i])) for i in range(len(y))]


# ------------------------------------------------------------------ 1-5: exact properties

@criterion(1, "CPE loss matches brute-force reference within 1e-10")
def test_cpe_oracle_equivalence():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 17))
        z, u, y = batch(rng, n, labels=int(rng.integers(1, 5)))
        recs = records(z, u, y)
        for mode, tau, phi in itertools.product(MODES, TAUS, PHIS):
            got = cpe_loss(recs, CpeConfig(temperature=tau, phi=phi, reweight=mode))
            worst = max(worst, abs(got - brute_cpe(z, u, y, tau, phi, mode)))
    elapsed = time.perf_counter() - start
    report(1, worst <= 1e-10 and elapsed < 10, f"max |diff| {worst:.2e}, {elapsed:.1f}s")
    assert worst <= 1e-10
    assert elapsed < 10


@criterion(2, "analytic gradient matches central differences, rel err < 1e-4")
def test_gradient_check():
    rng = np.random.default_rng(7)
    h = 1e-5
    start = time.perf_counter()
    worst = 0.0
    for b in range(20):
        n = int(rng.integers(2, 13))
        z, u, y = batch(rng, n, dim=6, labels=2)
        cfg = CpeConfig(temperature=TAUS[b % 3], phi=PHIS[b % 3] * 0.5, reweight=MODES[b % 3])
        _, grad = cpe_loss_and_grad(z, u, y, cfg)
        for idx in np.ndindex(*z.shape):
            zp, zm = z.copy(), z.copy()
            zp[idx] += h
            zm[idx] -= h
            fd = (cpe_loss(records(zp, u, y), cfg) - cpe_loss(records(zm, u, y), cfg)) / (2 * h)
            # relative error, floored so exactly-zero gradients compare absolutely
            rel = abs(grad[idx] - fd) / max(abs(fd), abs(grad[idx]), 1e-6)
            worst = max(worst, rel)
    elapsed = time.perf_counter() - start
    report(2, worst < 1e-4 and elapsed < 30, f"max rel err {worst:.2e}, {elapsed:.1f}s")
    assert worst < 1e-4
    assert elapsed < 30


@criterion(3, "degenerate cases are exact zeros")
def test_degenerate_cases():
    rng = np.random.default_rng(3)
    pair = records(rng.normal(size=(2, 5)), np.ones(2), [4, 4])
    assert cpe_loss(pair, CpeConfig()) == 0.0
    assert per_anchor_loss(pair, 0, 0.2) == 0.0
    z, u, _ = batch(rng, 6)
    mixed = records(z, np.ones(6), [0, 0, 1, 1, 2, 3])
    assert per_anchor_loss(mixed, 4, 0.2) == 0.0
    assert per_anchor_loss(mixed, 5, 0.07) == 0.0
    assert per_anchor_loss(mixed, 0, 0.2) > 0.0
    for phi in (0.5, 0.7):
        low = records(z, np.full(6, phi - 0.01), [0, 0, 1, 1, 2, 2])
        assert cpe_loss(low, CpeConfig(phi=phi, reweight="one")) == 0.0
    assert cpe_loss(records(z, u, np.arange(6)), CpeConfig(phi=0.0)) == 0.0
    report(3, True, "pair, singleton and all-filtered batches give 0.0")


@criterion(4, "CPE and cosine-logit invariances")
def test_invariances():
    rng = np.random.default_rng(4)
    start = time.perf_counter()
    worst = {"perm": 0.0, "rot": 0.0, "scale": 0.0, "logit": 0.0}
    for b in range(60):
        n = int(rng.integers(2, 17))
        z, u, y = batch(rng, n, dim=8)
        cfg = CpeConfig(temperature=TAUS[b % 3], phi=PHIS[(b // 3) % 3], reweight=MODES[b % 3])
        base = cpe_loss(records(z, u, y), cfg)
        p = rng.permutation(n)
        worst["perm"] = max(worst["perm"], abs(cpe_loss(records(z[p], u[p], y[p]), cfg) - base))
        q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
        worst["rot"] = max(worst["rot"], abs(cpe_loss(records(z @ q.T, u, y), cfg) - base))
        s = rng.uniform(1e-2, 1e2, size=(n, 1))
        worst["scale"] = max(worst["scale"], abs(cpe_loss(records(z * s, u, y), cfg) - base))
        x = np.abs(rng.normal(size=32)) + 1e-3
        w = CosineClassifierWeights(rng.normal(size=(5, 32)), 20.0)
        a = cosine_logits(x, w)
        c = cosine_logits(x * rng.uniform(1e-3, 1e3), w)
        worst["logit"] = max(worst["logit"], float(np.abs(a - c).max()))
        assert np.all(np.abs(a) <= w.scale)
    elapsed = time.perf_counter() - start
    ok = (worst["perm"] <= 1e-9 and worst["rot"] <= 1e-8 and worst["scale"] <= 1e-8
          and worst["logit"] <= 1e-6 and elapsed < 10)
    report(4, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f}s")
    assert worst["perm"] <= 1e-9
    assert worst["rot"] <= 1e-8
    assert worst["scale"] <= 1e-8
    assert worst["logit"] <= 1e-6
    assert elapsed < 10


@criterion(5, "AP engine matches PR enumeration; hand cases exact")
def test_ap_engine():
    start = time.perf_counter()
    gt1 = (np.array([[0.0, 0.0, 10.0, 10.0]]), [0])
    assert average_precision([[([0, 0, 10, 9], 0, 0.9)]], [gt1], 0.5) == {0: 1.0}
    assert average_precision([[([30, 30, 40, 40], 0, 0.9)]], [gt1], 0.5) == {0: 0.0}
    gt2 = (np.array([[0.0, 0.0, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0]]), [0, 0])
    dets = [[([0, 0, 10, 10], 0, 0.9), ([50, 50, 60, 60], 0, 0.8), ([20, 20, 30, 30], 0, 0.7)]]
    assert average_precision(dets, [gt2], 0.5)[0] == enumerate_ap([0.9, 0.8, 0.7], [True, False, True], 2)

    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        n_img = int(rng.integers(1, 3))
        scene_dets, scene_gts, flat, gts_by_img = [], [], [], {}
        for img in range(n_img):
            n_gt = int(rng.integers(1, 3 if n_img == 2 else 6))  # at most 5 GT per scene
            xy = rng.uniform(0, 40, size=(n_gt, 2))
            g = np.concatenate([xy, xy + rng.uniform(5, 15, size=(n_gt, 2))], axis=1)
            scene_gts.append((g, [0] * n_gt))
            gts_by_img[img] = g.tolist()
            d = []
            for _ in range(int(rng.integers(0, 6))):
                src = g[int(rng.integers(n_gt))] if rng.random() < 0.6 else np.r_[rng.uniform(0, 40, 2), 0, 0]
                lo = src[:2] + rng.normal(scale=2.0, size=2)
                box = np.r_[lo, np.maximum(src[2:] + rng.normal(scale=2.0, size=2), lo + 1.0)]
                score = float(rng.random())
                d.append((box, 0, score))
                flat.append((img, box.tolist(), score))
            scene_dets.append(d)
        num_gt = sum(len(g[0]) for g in scene_gts)
        for thr in (0.5, 0.75):
            labels = greedy_labels(flat, gts_by_img, thr)
            want = enumerate_ap([f[2] for f in flat], labels, num_gt) if flat else 0.0
            got = average_precision(scene_dets, scene_gts, thr)[0]
            worst = max(worst, abs(got - want))
    elapsed = time.perf_counter() - start
    report(5, worst <= 1e-12 and elapsed < 10, f"max |diff| {worst:.1e} over 50 scenes, {elapsed:.1f}s")
    assert worst <= 1e-12
    assert elapsed < 10


# ------------------------------------------------------------------ shared benchmark for 6-9

class Benchmark:
    def __init__(self):
        self.base = {}
        self.pools = {}
        self.tests = {}
        self.splits = {}
        self.runs = {}  # (seed, K, variant) -> dict
        self.base_seconds = 0.0
        self.finetune_seconds = 0.0


def _variants(cfg):
    return {
        "cpe": (strong_baseline_config(cfg, FINETUNE_STEPS), CpeConfig(temperature=0.2, phi=0.7, loss_weight=0.5)),
        "strong": (strong_baseline_config(cfg, FINETUNE_STEPS), CpeConfig(loss_weight=0.0)),
        "frozen": (frozen_baseline_config(cfg, FINETUNE_STEPS), CpeConfig(loss_weight=0.0)),
    }


@pytest.fixture(scope="session")
def bench():
    torch.set_num_threads(1)
    b = Benchmark()
    cfg = DetectorConfig(steps=BASE_STEPS)
    for seed in SEEDS:
        pool = generate_synthetic(POOL_IMAGES, seed=1000 + seed)
        base_train = generate_synthetic(BASE_IMAGES, seed=2000 + seed, draw_classes=pool.base_ids)
        b.pools[seed] = pool
        b.tests[seed] = generate_synthetic(TEST_IMAGES, seed=3000 + seed)
        t = time.perf_counter()
        b.base[seed] = train_base(base_train, cfg, seed=seed)
        b.base_seconds += time.perf_counter() - t
        for k in KS:
            b.splits[seed, k] = build_kshot_split(pool, pool.novel_ids, k, seed).dataset
    t = time.perf_counter()
    for seed in SEEDS:
        for k in KS:
            for name, (ft_cfg, cpe_cfg) in _variants(cfg).items():
                state = fine_tune(b.base[seed], b.splits[seed, k], ft_cfg, cpe_cfg, seed=seed)
                rep = evaluate(state, b.tests[seed], (0.5,))
                stats = cluster_statistics(export_embeddings(state, b.tests[seed], TEST_IMAGES, seed=seed))
                b.runs[seed, k, name] = {"state": state, "nAP50": rep.aggregates["nAP50"],
                                         "bAP50": rep.aggregates["bAP50"],
                                         "within": stats.mean_within(sorted(b.tests[seed].novel_ids)),
                                         "cross": stats.cross}
                print(f"seed {seed} K {k} {name}: nAP50 {rep.aggregates['nAP50']:.4f} "
                      f"bAP50 {rep.aggregates['bAP50']:.4f} within {b.runs[seed, k, name]['within']:.4f} "
                      f"cross {stats.cross:.4f}")
    b.finetune_seconds = time.perf_counter() - t
    return b


@pytest.mark.slow
@criterion(6, "doubling the post-NMS cap adds >= 10% foreground proposals (median of 3 seeds)")
def test_strong_baseline_statistic(bench):
    start = time.perf_counter()
    gains = {}
    for k in KS:
        per_seed = []
        for seed in SEEDS:
            state = bench.base[seed]
            lo = collect_stats(state, bench.splits[seed, k], state.cfg)
            hi = collect_stats(state, bench.splits[seed, k], state.cfg.replace(rpn_post_nms_cap=2 * state.cfg.rpn_post_nms_cap))
            per_seed.append(hi.mean_foreground_proposals / lo.mean_foreground_proposals - 1.0)
        gains[k] = statistics.median(per_seed)
        print(f"K={k}: relative gains {[round(g, 4) for g in per_seed]}, median {gains[k]:.4f}")
    elapsed = time.perf_counter() - start
    ok = all(g >= 0.10 for g in gains.values()) and elapsed < 300
    report(6, ok, ", ".join(f"K={k} +{100 * g:.1f}%" for k, g in gains.items()) + f", {elapsed:.1f}s")
    assert all(g >= 0.10 for g in gains.values())
    assert elapsed < 300


@pytest.mark.slow
@criterion(7, "median nAP50: CPE >= strong baseline >= frozen baseline")
def test_fsce_beats_baselines(bench):
    total = bench.base_seconds + bench.finetune_seconds
    for (seed, k, name), run in sorted(bench.runs.items()):
        print(f"seed {seed} K={k} {name:6s} nAP50 {run['nAP50']:.4f} bAP50 {run['bAP50']:.4f} "
              f"within {run['within']:.4f} cross {run['cross']:.4f}")
    ok = True
    details = []
    for k in KS:
        med = {v: statistics.median(bench.runs[s, k, v]["nAP50"] for s in SEEDS) for v in ("cpe", "strong", "frozen")}
        details.append(f"K={k} cpe {med['cpe']:.4f} strong {med['strong']:.4f} frozen {med['frozen']:.4f}")
        ok &= med["cpe"] >= med["strong"] >= med["frozen"]
    report(7, ok and total < 1800, "; ".join(details) + f"; {total / 60:.1f} min")
    for k in KS:
        med = {v: statistics.median(bench.runs[s, k, v]["nAP50"] for s in SEEDS) for v in ("cpe", "strong", "frozen")}
        assert med["cpe"] >= med["strong"], f"K={k}: CPE {med['cpe']:.4f} < strong {med['strong']:.4f}"
        assert med["strong"] >= med["frozen"], f"K={k}: strong {med['strong']:.4f} < frozen {med['frozen']:.4f}"
    assert total < 1800


@pytest.mark.slow
@criterion(8, "CPE tightens novel clusters and separates classes in >= 2 of 3 seeds")
def test_embedding_geometry(bench):
    details = []
    ok = True
    for k in KS:
        wins = 0
        for seed in SEEDS:
            c, s = bench.runs[seed, k, "cpe"], bench.runs[seed, k, "strong"]
            wins += c["within"] > s["within"] and c["cross"] < s["cross"]
        details.append(f"K={k}: {wins}/3 seeds")
        ok &= wins >= 2
    report(8, ok, ", ".join(details))
    assert ok


@pytest.mark.slow
@criterion(9, "bit-identical reruns and frozen backbone")
def test_determinism_and_freeze(bench, tmp_path):
    seed = SEEDS[0]
    pool = bench.pools[seed]
    small = generate_synthetic(30, seed=99, draw_classes=pool.base_ids)
    cfg = DetectorConfig(steps=10)
    h = [save_checkpoint(train_base(small, cfg, seed=3), tmp_path / f"b{i}.ckpt") for i in range(2)]
    assert h[0] == h[1]
    ft_cfg = strong_baseline_config(cfg, 10)
    base = train_base(small, cfg, seed=3)
    split = bench.splits[seed, 5]
    f = [save_checkpoint(fine_tune(base, split, ft_cfg, CpeConfig(), seed=3), tmp_path / f"f{i}.ckpt")
         for i in range(2)]
    assert f[0] == f[1]
    frozen_ok = True
    for (s, k, name), run in bench.runs.items():
        before = bench.base[s].component_arrays("backbone")
        after = run["state"].component_arrays("backbone")
        frozen_ok &= before.keys() == after.keys() and all(np.array_equal(before[n], after[n]) for n in before)
    report(9, frozen_ok, f"checkpoint sha256 {h[0][:12]} / {f[0][:12]} reproduced; backbone frozen in "
                         f"{len(bench.runs)} fine-tunes")
    assert frozen_ok


# ------------------------------------------------------------------ 10: ablation harness

@criterion(10, "ablation harness emits well-formed temperature/dimension and re-weighting grids")
def test_ablation_harness(tmp_path):
    pool = generate_synthetic(120, seed=41)
    base_train = generate_synthetic(40, seed=42, draw_classes=pool.base_ids)
    test = generate_synthetic(20, seed=43)
    save_dataset(build_kshot_split(pool, pool.novel_ids, 3, 0).dataset, tmp_path / "split")
    save_dataset(test, tmp_path / "test")
    save_checkpoint(train_base(base_train, DetectorConfig(steps=20, warmup_steps=5), seed=0), tmp_path / "base.ckpt")
    shapes = {}
    for grid, rows in (("tau-dim", 6), ("reweight", 4)):
        out = tmp_path / grid
        code = cli_main(["ablate", "--grid", grid, "--checkpoint", str(tmp_path / "base.ckpt"),
                         "--data", str(tmp_path / "split"), "--test", str(tmp_path / "test"), "--out", str(out),
                         "--seeds", "0,1", "--steps", "5", "--thresholds", "0.5,0.75"])
        assert code == 0
        payload = json.loads((out / "ablation.json").read_text())
        assert len(payload["rows"]) == rows
        for r in payload["rows"]:
            assert set(r["per_seed"]) == {"0", "1"} and not r["errors"]
            assert {"nAP50", "nAP75"} <= set(r["median"])
            assert all(math.isfinite(v) for v in r["median"].values())
        lines = (out / "ablation.txt").read_text().splitlines()
        assert len(lines) == rows + 1
        assert len({len(line.split()) for line in lines}) == 1
        shapes[grid] = (len(lines) - 1, len(lines[0].split()))
    assert cli_main(["ablate", "--grid", "empty", "--out", str(tmp_path / "empty")]) == 0
    rw = json.loads((tmp_path / "reweight" / "ablation.json").read_text())["rows"]
    assert [(r["phi"], r["reweight"]) for r in rw] == [(0.7, "one"), (0.5, "one"), (0.0, "linear"), (0.0, "expm1")]
    td = json.loads((tmp_path / "tau-dim" / "ablation.json").read_text())["rows"]
    assert sorted((r["temperature"], r["embed_dim"]) for r in td) == sorted(
        itertools.product((0.07, 0.2, 0.5), (128, 256)))
    report(10, True, f"tau-dim {shapes['tau-dim']}, reweight {shapes['reweight']} (rows, columns); empty grid ok")

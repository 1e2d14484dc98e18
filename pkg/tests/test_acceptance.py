"""Acceptance criteria 1-10, one PASS/FAIL line each.

Criteria 6 and 7 train the toy network end to end and dominate the runtime
of the whole test suite (several minutes on one core).
"""

import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES, small_run_config, small_scene
from test_layers import randomize, weights_of

import oracles
from gelatto import checks
from gelatto import geometry as G
from gelatto.config import toy_config
from gelatto.data import SceneSpec, VoteAccumulator, coverage_sampler, generate_scene
from gelatto.layers import GeLatto, SharedMLP, multi_head_attention_reference, vector_attention
from gelatto.metrics import compute
from gelatto.network import SegmentationNet, TrainConfig, composite_loss
from gelatto.tensor import Tensor
from gelatto.training import Trainer, evaluate, predict_block, softmax_np


def report(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_1_gradient_suite():
    report_ = checks.run_suite(seed=0)
    layer_worst = max(r.error for r in report_.results if r.tol == checks.LAYER_TOL)
    net = next(r for r in report_.results if r.name == "micro_network")
    ok = (report_.passed and layer_worst < 1e-5 and net.error < 1e-4 and report_.seconds < 60.0
          and all(r.error < 1e-4 for r in report_.results))
    report(1, ok, f"{len(report_.results)} checks, worst layer {layer_worst:.2e}, "
                  f"network {net.error:.2e}, {report_.seconds:.1f}s (limit 60s)")


def test_criterion_2_multi_head_special_case():
    rng = np.random.default_rng(2)
    identical = 0
    for _ in range(100):
        d = int(rng.integers(1, 17))
        shape = (int(rng.integers(1, 6)), int(rng.integers(1, 9)), d)
        vals = Tensor(rng.normal(size=shape))
        scorer = SharedMLP(d, d, rng)
        scorer.bias.data = rng.normal(size=d)
        a, _ = vector_attention(vals, scorer, 1)
        b = multi_head_attention_reference(vals, scorer, d)
        identical += bool(np.array_equal(a.data, b.data))
    report(2, identical == 100, f"{identical}/100 bit-identical instances")


def test_criterion_3_group_constancy():
    rng = np.random.default_rng(3)
    checked, broken = 0, 0
    for group in (2, 4, 8):
        for heads in ("both", "geometric", "latent"):
            layer = randomize(GeLatto(16, rng, group_size=group, heads=heads), rng)
            parent = rng.uniform(0, 1, (20, 3))
            nb = rng.integers(0, 20, (5, 6))
            _, trace = layer(parent[:5], nb, parent, Tensor(rng.normal(size=(5, 16))),
                             Tensor(rng.normal(size=(20, 16))))
            for scores in (trace.geometric, trace.latent):
                if scores is None:
                    continue
                grouped = scores.reshape(5, 6, 16 // group, group)
                checked += 1
                broken += not np.all(grouped == grouped[..., :1])
    report(3, checked == 12 and broken == 0, f"D' in {{2,4,8}}: {checked - broken}/{checked} score tensors group-constant")


def test_criterion_4_permutation_invariance():
    cfg = toy_config()
    model = SegmentationNet(cfg.network, seed=4)
    cloud = small_scene(4, 512)
    base, _, _ = model(cloud.positions, cloud.features())
    rng = np.random.default_rng(4)
    worst, labels_equal = 0.0, True
    for _ in range(3):
        perm = rng.permutation(512)
        out, _, _ = model(cloud.positions[perm], cloud.features()[perm])
        worst = max(worst, float(np.abs(out.data[0] - base.data[0][perm]).max()))
        labels_equal &= bool(np.array_equal(out.data[0].argmax(-1), base.data[0][perm].argmax(-1)))
    report(4, labels_equal and worst <= 1e-9,
           f"3 permutations of 512 points: labels identical={labels_equal}, max logit diff {worst:.1e}")


def test_criterion_5_oracle_equivalence():
    rng = np.random.default_rng(5)
    fps_ok = radius_ok = 0
    for _ in range(200):
        n = int(rng.integers(1, 513))
        pts = rng.uniform(-1, 1, (n, 3))
        m = int(rng.integers(1, min(n, 64) + 1))
        fps_ok += set(G.farthest_point_sample(pts, m).tolist()) == set(oracles.fps(pts, m))
        q = pts[rng.choice(n, min(n, 6), replace=False)]
        radius = float(rng.uniform(0.05, 0.8))
        k = int(rng.integers(1, 33))
        nb = G.radius_neighbors(q, pts, radius, k).neighbors
        full = G.radius_neighbors(q, pts, radius, n).neighbors
        radius_ok += all(
            set(nb[i].tolist()) == set(oracles.nearest_in_ball(q[i], pts, radius, k))
            and set(full[i].tolist()) == set(oracles.ball(q[i], pts, radius))
            for i in range(len(q))
        )
    worst = 0.0
    for _ in range(200):
        layer = randomize(GeLatto(1, rng, heads=str(rng.choice(["both", "geometric", "latent"]))), rng)
        parent = rng.uniform(0, 1, (3, 3))
        nb = rng.integers(0, 3, (1, 2))
        r, feats = rng.normal(size=(1, 1)), rng.normal(size=(3, 1))
        out, _ = layer(parent[:1], nb, parent, Tensor(r), Tensor(feats))
        o = oracles.gelatto_single(parent[0], parent[nb[0]], r[0], feats[nb[0]], weights_of(layer),
                                   layer.heads)
        worst = max(worst, float(np.abs(out.data[0] - o).max()))
    ok = fps_ok == 200 and radius_ok == 200 and worst <= 1e-12
    report(5, ok, f"FPS {fps_ok}/200, radius {radius_ok}/200, attention oracle max diff {worst:.1e}")


def toy_data(num_train: int, num_test: int):
    train = [generate_scene(SceneSpec(seed=i)) for i in range(num_train)]
    test = [generate_scene(SceneSpec(seed=100_000 + i)) for i in range(num_test)]
    return train, test


@pytest.mark.slow
def test_criterion_6_toy_training():
    train, test = toy_data(64, 16)
    cfg = toy_config()
    cfg.train.epochs = 50
    cfg.run.target_miou = 0.90
    trainer = Trainer(cfg)
    initial = evaluate(trainer.model, train, 2048, 2.0).compute().miou
    start = time.perf_counter()
    trainer.fit(train, test)
    minutes = (time.perf_counter() - start) / 60
    best = max(r.val_miou for r in trainer.history)
    final = evaluate(trainer.model, train, 2048, 2.0).compute().miou
    ok = best >= 0.90 and minutes < 15.0 and final > initial
    report(6, ok, f"test mIoU {best:.4f} after {len(trainer.history)} epochs in {minutes:.1f} min "
                  f"(1 core); training mIoU {initial:.3f} -> {final:.3f}")


ABLATION_SEEDS = (0, 1, 2)
ABLATION_EPOCHS = 10


@pytest.mark.slow
def test_criterion_7_ablation_direction():
    train, test = toy_data(64, 16)
    means = {}
    for heads in ("both", "geometric", "latent", "pool"):
        scores = []
        for seed in ABLATION_SEEDS:
            cfg = toy_config()
            cfg.network.heads = heads
            cfg.train.seed = cfg.run.seed = seed
            trainer = Trainer(cfg)
            trainer.fit(train, epochs=ABLATION_EPOCHS)
            scores.append(evaluate(trainer.model, test, 2048, 2.0, seed).compute().miou)
        means[heads] = float(np.mean(scores))
    ok = (means["both"] >= means["geometric"] and means["both"] >= means["latent"]
          and all(means[h] >= means["pool"] - 0.02 for h in ("both", "geometric", "latent")))
    detail = ", ".join(f"{h} {v:.4f}" for h, v in means.items())
    report(7, ok, f"mean test mIoU over 3 seeds: {detail}")


def _ce(logits, labels, eps):
    c = logits.shape[-1]
    z = logits.reshape(-1, c)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    t = np.full(z.shape, eps / (c - 1))
    t[np.arange(len(z)), labels.reshape(-1)] = 1 - eps
    return -(t * logp).sum() / len(z)


def test_criterion_8_auxiliary_loss():
    cfg = small_run_config()
    model = SegmentationNet(cfg.network, seed=8)
    cloud = small_scene(8)
    main, aux, pyramid = model(cloud.positions, cloud.features())
    terms = composite_loss(main, aux, cloud.labels[None], pyramid, TrainConfig(aux_weights=(0.4, 0.4)))
    idx, per_level = np.arange(len(cloud)), []
    for lv in pyramid.levels:
        if lv.sample_index is not None:
            idx = idx[lv.sample_index[0]]
        per_level.append(cloud.labels[idx])
    hand = _ce(main.data, per_level[0], 0.1)
    hand += sum(0.4 * _ce(a.data, per_level[len(aux) - i], 0.1) for i, a in enumerate(aux))
    diff = abs(float(terms.total.data) - hand)

    scenes = [small_scene(s) for s in range(4)]
    zero = Trainer(small_run_config(run__deterministic=True, train__aux_weights=(0.0, 0.0)))
    only = Trainer(small_run_config(run__deterministic=True), main_only=True)
    zero.fit(scenes, epochs=2)
    only.fit(scenes, epochs=2)
    same = all(np.array_equal(p.data, q.data) for p, q in zip(zero.model.parameters(), only.model.parameters()))
    same &= [r.main for r in zero.history] == [r.main for r in only.history]
    report(8, diff <= 1e-12 and same,
           f"|loss - hand sum| = {diff:.1e}; alpha=0 vs main-only parameters identical={same}")


def test_criterion_9_voting():
    rng = np.random.default_rng(9)
    windows = coverage_sampler(10_000, 6144, 9)
    acc = VoteAccumulator.create(10_000, 3)
    for w in windows:
        acc.update(w, rng.dirichlet(np.ones(3), size=len(w)))
    covered = bool(np.all(acc.coverage >= 1)) and all(len(w) == 6144 for w in windows)
    acc.finalize()

    cfg = small_run_config()
    model = SegmentationNet(cfg.network, seed=9)
    block = small_scene(9, 6144)
    voted = predict_block(model, block, 6144, seed=9).finalize()
    direct, _, _ = model(block.positions, block.features())
    single = np.array_equal(voted, softmax_np(direct.data[0]).argmax(-1))
    report(9, covered and single,
           f"N=10000,n=6144: {len(windows)} windows cover all={covered}; single window equals direct argmax={single}")


def test_criterion_10_metrics():
    s = compute([[1, 1], [0, 2]])
    fixture = (s.oa == 0.75 and abs(s.miou - 0.5833) <= 1e-4
               and s.acc.tolist() == [0.5, 1.0] and np.allclose(s.iou, [0.5, 2 / 3]))
    rng = np.random.default_rng(10)
    bad = 0
    for _ in range(1000):
        c = int(rng.integers(2, 8))
        cm = rng.integers(0, 50, (c, c)) * (rng.random((c, c)) < 0.7)
        if cm.sum() == 0:
            cm[0, 0] = 1
        r = compute(cm)
        bad += not (r.miou <= r.macc + 1e-15)
    report(10, fixture and bad == 0, f"fixture OA {s.oa} mIoU {s.miou:.4f}; mIoU <= mAcc violated {bad}/1000")

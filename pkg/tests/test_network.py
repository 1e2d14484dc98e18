import numpy as np
import pytest

import oracles
from gelatto import tensor as T
from gelatto.network import (
    Adam,
    ClassificationNet,
    LayerConfig,
    NetworkConfig,
    ResnetBlock,
    SegmentationNet,
    TrainConfig,
    adam_step,
    classification_forward,
    composite_loss,
    decoder_forward,
    encoder_forward,
    resnet_block_same,
    resnet_block_strided,
)
from gelatto.geometry import PointCloud
from gelatto.tensor import Tensor

TWO_LEVEL = [LayerConfig(16, 0.4, 6, 8, 2), LayerConfig(8, 0.8, 6, 8, 2)]


def tiny_net(layers=None, **kw) -> NetworkConfig:
    return NetworkConfig(num_classes=3, stem_width=8, layers=layers or TWO_LEVEL, **kw)


def cloud(rng, n=32, colors=True):
    pos = rng.uniform(0, 1, (n, 3))
    return PointCloud(pos, rng.uniform(0, 1, (n, 3)) if colors else None, rng.integers(0, 3, n))


# -- configuration --------------------------------------------------------------------


def test_radius_doubling_enforced():
    with pytest.raises(ValueError):
        tiny_net([LayerConfig(16, 0.4, 6, 8, 2), LayerConfig(8, 0.7, 6, 8, 2)]).validate()
    with pytest.raises(ValueError):
        tiny_net([LayerConfig(16, 0.4, 6, 8, 2), LayerConfig(16, 0.8, 6, 8, 2)]).validate()
    with pytest.raises(ValueError):
        NetworkConfig(num_classes=1).validate()


def test_train_config_defaults():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.beta1, cfg.beta2, cfg.eps) == (1e-4, 0.9, 0.98, 1e-9)
    assert cfg.batch_size == 2 and cfg.dropout == 0.5
    assert cfg.aux_weights == (0.4, 0.4, 0.4, 0.4)
    with pytest.raises(ValueError):
        TrainConfig(aux_weights=(-0.1,)).validate()
    with pytest.raises(ValueError):
        TrainConfig(label_smoothing=1.0).validate()


# -- blocks -------------------------------------------------------------------------------


def test_strided_block_toy_cloud(rng):
    pts = rng.uniform(0, 1, (32, 3))
    cfg = LayerConfig(12, 0.4, 5, 16, 4)
    block = ResnetBlock(8, cfg, True, tiny_net(), rng)
    feats = Tensor(rng.normal(size=(32, 8)))
    out_pts, out, _, nb = resnet_block_strided(pts, feats, cfg, block)
    assert out.shape == (12, 16) and out_pts.shape == (12, 3)
    expected = {tuple(pts[i]) for i in oracles.fps(pts, 12)}
    assert {tuple(p) for p in out_pts} == expected
    for row, c in zip(nb.neighbors, out_pts):
        assert set(row.tolist()) <= set(oracles.ball(c, pts, 0.4))
    with pytest.raises(T.ContractError):
        resnet_block_strided(pts, feats, LayerConfig(40, 0.4, 5, 16, 4), block)


def test_same_block_neighbours_match_oracle(rng):
    pts = rng.uniform(0, 1, (20, 3))
    cfg = LayerConfig(20, 0.2, 6, 8, 2)
    block = ResnetBlock(8, cfg, False, tiny_net(), rng)
    assert block.shortcut is None
    _, out, _, nb = resnet_block_same(pts, Tensor(rng.normal(size=(20, 8))), cfg, block)
    assert out.shape == (20, 8)
    for i in range(20):
        assert nb.neighbors[i].tolist() == oracles.nearest_in_ball(pts[i], pts, 0.4, 6)


def _zero_exit(block):
    block.exit.weight.data[...] = 0.0
    block.exit.bias.data[...] = 0.0


def test_zero_main_path_strided(rng):
    pts = rng.uniform(0, 1, (24, 3))
    cfg = LayerConfig(10, 0.5, 4, 8, 2)
    block = ResnetBlock(8, cfg, True, tiny_net(), rng)
    _zero_exit(block)
    feats = Tensor(rng.normal(size=(24, 8)))
    _, out, _, nb = resnet_block_strided(pts, feats, cfg, block)
    pooled = feats.data[nb.neighbors].max(axis=1)
    residual = block.shortcut(Tensor(pooled)).data
    assert np.allclose(out.data, np.maximum(residual, 0.0), atol=1e-14)


def test_zero_main_path_same_is_relu_identity(rng):
    pts = rng.uniform(0, 1, (12, 3))
    cfg = LayerConfig(12, 0.3, 4, 8, 2)
    block = ResnetBlock(8, cfg, False, tiny_net(), rng)
    _zero_exit(block)
    feats = Tensor(rng.normal(size=(12, 8)))
    _, out, _, _ = resnet_block_same(pts, feats, cfg, block)
    assert np.array_equal(out.data, np.maximum(feats.data, 0.0))


def test_degenerate_self_neighbourhoods(rng):
    pts = rng.uniform(0, 10, (6, 3))
    cfg = LayerConfig(6, 1e-3, 3, 8, 2)
    block = ResnetBlock(8, cfg, True, tiny_net(), rng)
    _, out, _, nb = resnet_block_strided(pts, Tensor(rng.normal(size=(6, 8))), cfg, block)
    assert all(len(set(row)) == 1 for row in nb.neighbors.tolist())
    same = ResnetBlock(8, cfg, False, tiny_net(), rng)
    _, one, _, _ = resnet_block_same(pts[:1], Tensor(rng.normal(size=(1, 8))), cfg, same)
    assert np.all(np.isfinite(one.data))


# -- encoder / decoder ------------------------------------------------------------------------


def test_level_sizes_default_network():
    net = SegmentationNet(NetworkConfig())
    c = cloud(np.random.default_rng(0), 6144)
    pyramid = encoder_forward(c, net)
    assert pyramid.level_sizes() == [6144, 4096, 2048, 512, 128]
    assert [lv.features.shape[-1] for lv in pyramid.levels] == [32, 64, 128, 256, 512]


def test_level_sizes_clamp_for_small_input(rng):
    net = SegmentationNet(tiny_net([LayerConfig(64, 0.3, 4, 8, 2), LayerConfig(32, 0.6, 4, 8, 2)]))
    sizes = encoder_forward(cloud(rng, 40), net).level_sizes()
    assert sizes == [40, 40, 32]
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))
    with pytest.raises(T.ContractError):
        encoder_forward(cloud(rng, 7), net)


def test_rgb_absent_uses_zero_channels(rng):
    net = SegmentationNet(tiny_net())
    c = cloud(rng, 24, colors=False)
    main, _, _ = net(c.positions, c.features())
    assert main.shape == (1, 24, 3)


def test_permuted_input_equivariant(rng):
    net = SegmentationNet(tiny_net())
    c = cloud(rng, 40)
    perm = rng.permutation(40)
    a = encoder_forward(c, net)
    b = encoder_forward(c.subset(perm), net)
    for la, lb in zip(a.levels[1:], b.levels[1:]):
        pa = {tuple(p): i for i, p in enumerate(la.points[0])}
        assert set(pa) == {tuple(p) for p in lb.points[0]}
        order = [pa[tuple(p)] for p in lb.points[0]]
        assert np.allclose(la.features.data[0][order], lb.features.data[0], atol=1e-9)
    ma, _, _ = net(c.positions, c.features())
    mb, _, _ = net(c.positions[perm], c.features()[perm])
    assert np.allclose(ma.data[0][perm], mb.data[0], atol=1e-9)


def test_decoder_shapes_and_determinism(rng):
    layers = [LayerConfig(24, 0.2, 4, 8, 2), LayerConfig(12, 0.4, 4, 8, 2),
              LayerConfig(6, 0.8, 4, 8, 2), LayerConfig(3, 1.6, 2, 8, 2)]
    net = SegmentationNet(tiny_net(layers))
    c = cloud(rng, 48)
    main, aux, _ = net(c.positions, c.features())
    assert main.shape == (1, 48, 3)
    assert [a.shape for a in aux] == [(1, 3, 3), (1, 6, 3), (1, 12, 3), (1, 24, 3)]
    again, _, _ = net(c.positions, c.features())
    assert np.array_equal(main.data, again.data)


def test_constant_encoder_features_give_constant_logits(rng):
    net = SegmentationNet(tiny_net())
    c = cloud(rng, 30)
    pyramid = encoder_forward(c, net)
    for lv in pyramid.levels:
        shape = lv.features.shape
        lv.features = Tensor(np.broadcast_to(rng.normal(size=shape[-1]), shape).copy())
    main, _ = decoder_forward(pyramid, net)
    assert np.allclose(main.data[0], main.data[0, :1], atol=1e-12)


def test_training_mode_differs_only_through_bn_and_dropout(rng):
    net = SegmentationNet(tiny_net())
    c = cloud(rng, 24)
    a, _, _ = net(c.positions, c.features(), training=True, dropout_rate=0.5,
                  rng=np.random.default_rng(0))
    b, _, _ = net(c.positions, c.features(), training=True, dropout_rate=0.5,
                  rng=np.random.default_rng(1))
    assert not np.array_equal(a.data, b.data)
    with pytest.raises(T.ContractError):
        net(c.positions, c.features(), training=True, dropout_rate=0.5)


def test_batched_forward_matches_single(rng):
    net = SegmentationNet(tiny_net())
    clouds = [cloud(rng, 32), cloud(rng, 32)]
    pos = np.stack([c.positions for c in clouds])
    feats = np.stack([c.features() for c in clouds])
    batched, _, _ = net(pos, feats)
    for i, c in enumerate(clouds):
        single, _, _ = net(c.positions, c.features())
        assert np.allclose(batched.data[i], single.data[0], atol=1e-12)


# -- classification ---------------------------------------------------------------------------


def test_classification_duplication_invariance(rng):
    layers = [LayerConfig(8, 5.0, 24, 8, 2), LayerConfig(4, 10.0, 16, 8, 2)]
    net = ClassificationNet(tiny_net(layers))
    c = cloud(rng, 12)
    twice = PointCloud(np.concatenate([c.positions] * 2), np.concatenate([c.colors] * 2))
    a = classification_forward(c, net).data
    b = classification_forward(twice, net).data
    assert a.shape == (3,)
    assert np.allclose(a, b, atol=1e-9)


def test_classification_permutation_invariance(rng):
    net = ClassificationNet(tiny_net())
    c = cloud(rng, 30)
    perm = rng.permutation(30)
    assert np.allclose(classification_forward(c, net).data,
                       classification_forward(c.subset(perm), net).data, atol=1e-9)


def test_classification_head_on_constant(rng):
    net = ClassificationNet(tiny_net())
    const = Tensor(np.tile(rng.normal(size=8), (5, 1)))
    pooled = T.reduce(const, 0, "mean")
    assert np.allclose(net.head(pooled).data, net.head(const).data[0], atol=1e-14)


# -- loss --------------------------------------------------------------------------------------


def _ce(logits, labels, eps):
    c = logits.shape[-1]
    z = logits.reshape(-1, c)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    t = np.full(z.shape, eps / (c - 1))
    t[np.arange(len(z)), labels.reshape(-1)] = 1 - eps
    return -(t * logp).sum() / len(z)


def test_composite_loss_decomposition(rng):
    net = SegmentationNet(tiny_net())
    c = cloud(rng, 32)
    main, aux, pyramid = net(c.positions, c.features())
    labels = c.labels[None]
    cfg = TrainConfig(aux_weights=(0.4, 0.4))
    terms = composite_loss(main, aux, labels, pyramid, cfg)
    per_level = []
    idx = np.arange(32)
    for lv in pyramid.levels:
        if lv.sample_index is not None:
            idx = idx[lv.sample_index[0]]
        per_level.append(c.labels[idx])
    assert [len(p) for p in per_level] == pyramid.level_sizes()
    assert all(np.array_equal(a[0], b) for a, b in zip(pyramid.level_labels(labels), per_level))
    expected = _ce(main.data, per_level[0], 0.1)
    expected += 0.4 * _ce(aux[0].data, per_level[2], 0.1) + 0.4 * _ce(aux[1].data, per_level[1], 0.1)
    assert abs(float(terms.total.data) - expected) < 1e-12
    zero = composite_loss(main, aux, labels, pyramid, TrainConfig(aux_weights=(0.0, 0.0)))
    assert float(zero.total.data) == zero.main and len(zero.aux) == 2
    with pytest.raises(T.ContractError):
        composite_loss(main, aux, np.full((1, 32), 3), pyramid, cfg)


# -- Adam ------------------------------------------------------------------------------------------


def test_adam_zero_gradient_keeps_parameters():
    p = Tensor([1.0, -2.0], requires_grad=True)
    opt = Adam([p])
    p.grad = np.zeros(2)
    adam_step(opt)
    assert p.data.tolist() == [1.0, -2.0]


def test_adam_constant_gradient_sign_step():
    p = Tensor([0.0, 0.0], requires_grad=True)
    opt = Adam([p], lr=1e-3)
    for _ in range(500):
        before = p.data.copy()
        p.grad = np.array([3.0, -0.02])
        opt.step()
    assert np.allclose(p.data - before, [-1e-3, 1e-3], rtol=1e-6)


def test_adam_quadratic_convergence():
    x = Tensor([1.0], requires_grad=True)
    opt = Adam([x], lr=1e-2)
    for step in range(2000):
        opt.zero_grad()
        with T.Tape() as tape:
            loss = T.sum_all(T.mul(x, x))
        tape.backward(loss)
        opt.step()
        if abs(x.data[0]) < 1e-3:
            break
    assert abs(x.data[0]) < 1e-3


def test_adam_rejects_nan_gradient():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.array([np.nan])
    with pytest.raises(T.NumericError):
        Adam([p]).step()
    assert p.data.tolist() == [1.0]


def test_parameter_names_are_unique(rng):
    net = SegmentationNet(tiny_net())
    names = [n for n, _ in net.named_parameters()]
    assert len(names) == len(set(names))
    assert any(n.startswith("encoder.blocks.0.attn.f_g_att") for n in names)


import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrdesc import dataset as ds
from mrdesc import network, tensor as T
from mrdesc import patchpipe as pp
from mrdesc import train as tr
from mrdesc.network import Architecture

SMALL = Architecture(bank_widths=(2, 3, 4), fusion_widths=(4, 2), out_dim=8, view_size=16)


def reference_loss(d, y, m):
    return 0.5 * y * d ** 2 + 0.5 * (1 - y) * max(0.0, m - d) ** 2


def grads_of(net):
    return {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in net.params.items()}


def loss_and_grads(net, triples, ra, rb, labels, margin):
    net.zero_grad()
    loss = tr.batch_loss(tr.pair_distances(net, triples, ra, rb), labels, margin)
    T.backward(loss)
    return float(loss.data), grads_of(net)


# loss

def test_loss_examples():
    assert tr.contrastive_loss(0.0, 1, 2.0) == 0.0
    assert tr.contrastive_loss(2.0, 0, 2.0) == 0.0
    assert tr.contrastive_loss(1.0, 1, 2.0) == 0.5
    assert tr.contrastive_loss(1.0, 0, 2.0) == 0.5
    with pytest.raises(ValueError):
        tr.contrastive_loss(-0.1, 1, 2.0)


def test_loss_grid_exact():
    for m in (0.5, 1.0, 2.0, 3.7):
        for d in np.linspace(0, 5, 41):
            for y in (0, 1):
                assert tr.contrastive_loss(d, y, m) == reference_loss(float(d), y, m)


def test_batch_loss_is_mean():
    d = np.array([0.0, 0.5, 1.0, 2.5, 3.0])
    y = np.array([1, 0, 1, 0, 0])
    node = tr.batch_loss(T.Tensor(d), y, 2.0)
    assert float(node.data) == pytest.approx(np.mean([reference_loss(a, b, 2.0) for a, b in zip(d, y)]), abs=1e-15)


def test_loss_gradient_in_d():
    rng = np.random.default_rng(0)
    d = rng.uniform(0.1, 4.0, 32)
    d = d[np.abs(d - 2.0) > 1e-3]
    y = rng.integers(0, 2, len(d))
    t = T.Tensor(d.copy(), requires_grad=True)
    T.backward(tr.batch_loss(t, y, 2.0))
    expected = np.where(y == 1, d, -np.maximum(0.0, 2.0 - d)) / len(d)
    np.testing.assert_allclose(t.grad, expected, rtol=1e-12)
    eps = 1e-6
    for k in range(len(d)):
        up, down = d.copy(), d.copy()
        up[k] += eps
        down[k] -= eps
        fd = (tr.contrastive_loss(up, y, 2.0).mean() - tr.contrastive_loss(down, y, 2.0).mean()) / (2 * eps)
        assert abs(t.grad[k] - fd) / max(1.0, abs(fd)) < 1e-6


# subnormal d would square to zero, so distances are exactly 0 or comfortably normal
DIST = st.one_of(st.just(0.0), st.floats(1e-100, 5))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(DIST, st.integers(0, 1)), min_size=1, max_size=20), st.floats(0.1, 4))
def test_loss_zero_iff_separated(pairs, m):
    d = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    separated = np.all(np.where(y == 1, d == 0, d >= m))
    assert (tr.contrastive_loss(d, y, m).sum() == 0) == separated


def test_config_defaults_and_decay():
    c = tr.TrainConfig()
    assert (c.margin, c.batch_size, c.batches_per_epoch, c.learning_rate, c.momentum) == (2.0, 64, 1000, 0.01, 0.9)
    assert c.lr_at(0) == c.lr_at(9) == 0.01
    assert c.lr_at(10) == pytest.approx(0.009)
    assert c.lr_at(25) == pytest.approx(0.0081)
    with pytest.raises(ValueError):
        tr.TrainConfig(margin=0)


# steps

@pytest.fixture
def small_batch():
    rng = np.random.default_rng(1)
    triples = rng.standard_normal((6, 3, 16, 16))
    return triples, np.array([0, 1, 2]), np.array([3, 4, 5]), np.array([1, 0, 0])


def test_lr_zero_leaves_parameters(small_batch):
    net = network.init(2, SMALL, precision="64")
    before = {k: p.data.tobytes() for k, p in net.params.items()}
    state = tr.TrainState.fresh(net)
    cfg = tr.TrainConfig(learning_rate=0.0, precision="64")
    for _ in range(3):
        tr.train_step(state, *small_batch, cfg)
    assert {k: p.data.tobytes() for k, p in net.params.items()} == before
    assert all(p.grad is None for p in net.params.values())


def test_velocity_mirrors_parameters(small_batch):
    state = tr.TrainState.fresh(network.init(2, SMALL, precision="64"))
    tr.train_step(state, *small_batch, tr.TrainConfig(precision="64"))
    assert all(state.velocity[k].shape == p.shape for k, p in state.net.params.items())


def first_order_ratio(net, triples, lr):
    ra, rb, y = np.array([0]), np.array([1]), np.array([1])
    loss0, grads = loss_and_grads(net, triples, ra, rb, y, 2.0)
    predicted = lr * sum(float((g * g).sum()) for g in grads.values())
    tr.train_step(tr.TrainState.fresh(net), triples, ra, rb, y, tr.TrainConfig(learning_rate=lr, precision="64"))
    loss1, _ = loss_and_grads(net, triples, ra, rb, y, 2.0)
    assert predicted > 0
    return (loss0 - loss1) / predicted


def test_first_order_decrease_small_net():
    rng = np.random.default_rng(0)
    for seed in range(3):
        ratio = first_order_ratio(network.init(seed, SMALL, precision="64"), rng.standard_normal((2, 3, 16, 16)), 1e-4)
        assert abs(ratio - 1) < 0.1


def test_first_order_decrease_full_net(scene):
    # at init a full-size pair has |grad d|^2 near 1e4, so lr must be small for the linear regime
    triples = pp.make_triples(scene.patches[[0, 5]])
    assert abs(first_order_ratio(network.init(3, precision="64"), triples, 1e-6) - 1) < 0.1


def test_duplicated_batch_same_gradient(small_batch):
    net = network.init(4, SMALL, precision="64")
    triples, ra, rb, y = small_batch
    _, one = loss_and_grads(net, triples, ra[:1], rb[:1], y[:1], 2.0)
    _, many = loss_and_grads(net, triples, np.repeat(ra[:1], 64), np.repeat(rb[:1], 64), np.repeat(y[:1], 64), 2.0)
    for k in one:
        np.testing.assert_allclose(many[k], one[k], rtol=1e-10, atol=1e-14)


def test_non_finite_reports_pairs(small_batch):
    triples, ra, rb, y = small_batch
    triples = triples.copy()
    triples[4] = np.nan
    state = tr.TrainState.fresh(network.init(5, SMALL, precision="64"))
    with pytest.raises(tr.DivergenceError) as info:
        tr.train_step(state, triples, ra, rb, y, tr.TrainConfig(precision="64"))
    assert info.value.pairs == [1]


def test_dedupe_without_perturbation(scene):
    batch = ds.PairBatch(np.array([0, 0, 1]), np.array([1, 2, 2]), np.array([1, 1, 1]))
    patches, ra, rb = tr.batch_patches(scene, batch, tr.TrainConfig(perturb=False), 0, 0)
    assert len(patches) == 3
    np.testing.assert_array_equal(patches[ra], scene.patches[[0, 0, 1]])
    np.testing.assert_array_equal(patches[rb], scene.patches[[1, 2, 2]])


def test_perturbed_patches_keyed_by_slot(scene):
    batch = ds.PairBatch(np.array([0, 0]), np.array([1, 1]), np.array([1, 1]))
    cfg = tr.TrainConfig()
    p1, _, _ = tr.batch_patches(scene, batch, cfg, 0, 0)
    p2, _, _ = tr.batch_patches(scene, batch, cfg, 0, 0)
    assert p1.tobytes() == p2.tobytes()
    assert not np.array_equal(p1[0], p1[1])


# fit

TINY = dict(epochs=2, batches_per_epoch=2, batch_size=16, subset_size=24, seed=3)


def scene_digest(s):
    return hashlib.sha256(s.patches.tobytes() + s.matches.tobytes() + s.point_ids.tobytes()).hexdigest()


def test_fit_deterministic(tmp_path, scene):
    cfg = tr.TrainConfig(**TINY)
    digest = scene_digest(scene)
    tr.fit(cfg, [scene], checkpoint_path=tmp_path / "a.ckpt")
    tr.fit(cfg, [scene], checkpoint_path=tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert scene_digest(scene) == digest
    tr.fit(tr.TrainConfig(**{**TINY, "seed": 4}), [scene], checkpoint_path=tmp_path / "c.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() != (tmp_path / "c.ckpt").read_bytes()


def test_run_log_and_periodic_checkpoints(tmp_path, scene):
    cfg = tr.TrainConfig(**{**TINY, "checkpoint_every": 1, "perturb": False})
    state = tr.fit(cfg, [scene], run_log=tmp_path / "run.log", checkpoint_path=tmp_path / "net.ckpt")
    lines = (tmp_path / "run.log").read_text().splitlines()
    config_lines = [ln for ln in lines if ln.startswith("# ") and " = " in ln]
    assert [ln.split(" = ")[0][2:] for ln in config_lines] == [k for k, _ in cfg.items()]
    rows = [ln.split("\t") for ln in lines if not ln.startswith("#")]
    assert [int(r[0]) for r in rows] == [0, 1] and all(len(r) == 6 for r in rows)
    assert float(rows[0][1]) == pytest.approx(state.stats[0].mean_loss, abs=1e-6)
    assert (tmp_path / "net.ckpt.epoch0001").exists() and (tmp_path / "net.ckpt.epoch0002").exists()
    assert network.load(tmp_path / "net.ckpt.epoch0002").params["head.bias"].data.tobytes() == \
        state.net.params["head.bias"].data.tobytes()


def test_fit_zero_epochs_is_init(tmp_path, scene):
    tr.fit(tr.TrainConfig(epochs=0, seed=5), [scene], checkpoint_path=tmp_path / "z.ckpt")
    network.save(network.init(5), tmp_path / "i.ckpt")
    assert (tmp_path / "z.ckpt").read_bytes() == (tmp_path / "i.ckpt").read_bytes()


def test_fit_mixed_scene_kinds(scene):
    single = ds.gen_synth(6, 1, seed=2, kind="single-image")
    state = tr.fit(tr.TrainConfig(**{**TINY, "epochs": 1}), [scene, single])
    assert state.epoch == 1 and len(state.loss_history) == 2


def test_fit_needs_scene():
    with pytest.raises(ValueError):
        tr.fit(tr.TrainConfig(), [])

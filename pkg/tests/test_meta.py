import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gaitmeta import autodiff as ad
from gaitmeta.meta import (FineTuneConfig, MetaConfig, ModelLoss, fine_tune, inner_adapt, meta_epoch,
                           meta_test, meta_train, sample_episode, sgd_step, task_meta_gradient)
from gaitmeta.network import ModelConfig, ParameterSet, init_params
from gaitmeta.tasks import TaskDescriptor

TASK = TaskDescriptor(1, "LW", 0.0, 0.9)
SMALL = ModelConfig(conv_out_channels=3, conv_kernel=5, pool=20, encoder_width=6, head_width=4)


class IndexPool:
    """Stand-in dataset whose 'windows' are just their indices."""

    def __init__(self, n):
        self.n = n

    def __len__(self):
        return self.n

    def take(self, idx):
        return np.asarray(idx)


def scalar(theta):
    return ParameterSet({"theta": np.array(float(theta))})


def test_episode_sampling_is_disjoint_and_deterministic():
    ds = {TASK: IndexPool(500)}
    ep = sample_episode(TASK, ds, 80, 120, seed=3)
    assert len(ep.support) == 80 and len(ep.query) == 120
    assert len(set(ep.support) | set(ep.query)) == 200
    again = sample_episode(TASK, ds, 80, 120, seed=3)
    assert np.array_equal(ep.support, again.support) and np.array_equal(ep.query, again.query)
    with pytest.raises(ValueError, match="must be >= 1"):
        sample_episode(TASK, ds, 0, 120, seed=3)
    with pytest.raises(ValueError, match="has 500 windows, need n\\+m = 600"):
        sample_episode(TASK, ds, 300, 300, seed=3)


def test_episodes_from_real_windows_share_no_window(small_bench):
    pools = small_bench.task_pools([1], stride=10)
    task = sorted(pools)[0]
    ep = sample_episode(task, pools, 80, 120, seed=0)
    assert not set(ep.support.uid) & set(ep.query.uid)


def _quad(w, batch):
    return ad.square(w["theta"])


def test_inner_adapt_closed_forms():
    theta = scalar(1.0)
    assert inner_adapt(theta, None, 0.1, 1, _quad)["theta"] == pytest.approx(0.8, abs=1e-15)
    assert inner_adapt(theta, None, 0.1, 2, _quad)["theta"] == pytest.approx((1 - 2 * 0.1) ** 2, abs=1e-15)
    assert inner_adapt(theta, None, 1e-300, 1, _quad)["theta"] == 1.0
    assert theta["theta"] == 1.0
    with pytest.raises(ValueError):
        inner_adapt(theta, None, 0.0, 1, _quad)


@given(st.floats(0.01, 0.45), st.integers(1, 4), st.floats(-3, 3))
@settings(max_examples=30, deadline=None)
def test_repeated_inner_steps_on_quadratic(alpha, steps, theta0):
    got = inner_adapt(scalar(theta0), None, alpha, steps, _quad)["theta"]
    assert got == pytest.approx((1 - 2 * alpha) ** steps * theta0, rel=1e-12, abs=1e-15)


def _two_level(w, batch):
    # support episodes hold one index, query episodes two
    return ad.square(ad.sub(w["theta"], 1.0)) if len(batch) == 1 else ad.square(w["theta"])


def test_two_level_quadratic_meta_gradient():
    ds = {TASK: IndexPool(3)}
    cfg = MetaConfig(alpha=0.25, beta=1.0, n=1, m=2)
    theta = scalar(0.0)
    ep = sample_episode(TASK, ds, 1, 2, 0)
    g, s_loss, q_loss = task_meta_gradient(theta, ep, cfg, _two_level)
    assert abs(g["theta"] - 0.5) <= 1e-10
    assert (s_loss, q_loss) == (1.0, 0.25)
    new, stats = meta_epoch(theta, [TASK], ds, cfg, 1, _two_level)
    assert abs(new["theta"] + 0.5) <= 1e-10


def test_meta_update_sums_task_gradients():
    tasks = [TASK, TaskDescriptor(2, "LW", 0.0, 0.9)]
    ds = {t: IndexPool(3) for t in tasks}
    cfg = MetaConfig(alpha=0.25, beta=1.0, n=1, m=2)
    new, _ = meta_epoch(scalar(0.0), tasks, ds, cfg, 1, _two_level)
    assert abs(new["theta"] + 1.0) <= 1e-10


def test_first_and_second_order_agree_when_the_loss_is_linear():
    r = np.random.default_rng(0)
    data = r.normal(size=(40, 6))
    ds = {TASK: IndexPool(40)}

    def linear(w, batch):
        return ad.sum(ad.matmul(data[batch], ad.reshape(w["theta"], (6, 1))))

    theta = ParameterSet({"theta": r.normal(size=6)})
    ep = sample_episode(TASK, ds, 10, 20, 1)
    g2 = task_meta_gradient(theta, ep, MetaConfig(alpha=0.3, first_order=False), linear)[0]["theta"]
    g1 = task_meta_gradient(theta, ep, MetaConfig(alpha=0.3, first_order=True), linear)[0]["theta"]
    assert np.max(np.abs(g2 - g1)) <= 1e-10


def test_first_order_differs_on_curved_losses():
    ds = {TASK: IndexPool(3)}
    ep = sample_episode(TASK, ds, 1, 2, 0)
    g1 = task_meta_gradient(scalar(0.0), ep, MetaConfig(alpha=0.25, first_order=True, n=1, m=2), _two_level)[0]
    # detached inner gradient: dQ/dθ' = 2 θ' = 1.0
    assert abs(g1["theta"] - 1.0) <= 1e-12


def test_tiny_alpha_reduces_to_pooled_query_gradient(small_bench):
    pools = small_bench.task_pools([1], stride=10)
    task = sorted(pools)[0]
    theta = init_params(SMALL, 0)
    loss_fn = ModelLoss(theta)
    cfg = MetaConfig(alpha=1e-300, n=20, m=30)
    ep = sample_episode(task, pools, 20, 30, 5)
    g = task_meta_gradient(theta, ep, cfg, loss_fn)[0]
    tr = ad.Trace()
    leaves = {k: tr.leaf(v) for k, v in theta.weights.items()}
    gm = ad.backward(loss_fn(leaves, ep.query), list(leaves.values()))
    for k, t in leaves.items():
        assert np.allclose(g[k], gm[t.node].value, rtol=1e-12, atol=1e-15)


def test_non_finite_loss_aborts_with_context():
    ds = {TASK: IndexPool(3)}

    def bad(w, batch):
        return ad.div(w["theta"], 0.0)

    with pytest.raises(FloatingPointError, match=r"epoch 7, task S01_LW"):
        with np.errstate(divide="ignore", invalid="ignore"):
            meta_epoch(scalar(1.0), [TASK], ds, MetaConfig(n=1, m=2), 7, bad)


def test_meta_train_zero_epochs_returns_initialisation(small_bench):
    pools = small_bench.task_pools([1, 2], stride=10)
    theta, hist = meta_train(sorted(pools), pools, MetaConfig(epochs=0, seed=4), SMALL)
    assert theta.identical(init_params(SMALL, 4)) and hist == []
    with pytest.raises(ValueError):
        meta_train([], pools, MetaConfig(epochs=1), SMALL)


def test_meta_train_is_reproducible_logs_and_learns(small_bench, tmp_path):
    pools = small_bench.task_pools([1, 2], stride=10)
    tasks = sorted(pools)[:6]
    cfg = MetaConfig(alpha=0.05, beta=0.01, epochs=12, n=20, m=30, seed=1)
    a, hist = meta_train(tasks, pools, cfg, SMALL, checkpoint_dir=tmp_path / "ck", checkpoint_every=5,
                         log_path=tmp_path / "log.csv")
    b, _ = meta_train(tasks, pools, cfg, SMALL)
    assert a.identical(b)
    rows = list(csv.DictReader(open(tmp_path / "log.csv")))
    assert len(rows) == 12 and list(rows[0]) == ["epoch", "support_loss", "query_loss", "wall_time"]
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == ["maml_epoch0005.mgait", "maml_epoch0010.mgait"]
    assert hist[-1].query_loss < hist[0].query_loss
    assert not a.identical(init_params(SMALL, 1))
    # bn running statistics follow the support sets
    assert not np.array_equal(a.buffers["bn.running_mean"], np.zeros(3))


def test_sgd_step_examples():
    p = scalar(1.0)
    assert sgd_step(p, {"theta": 2.0}, 0.1)["theta"] == pytest.approx(0.8)
    assert sgd_step(p, {"theta": 2.0}, 0.0).identical(p)
    with pytest.raises(ad.ShapeError, match="theta"):
        sgd_step(p, {"theta": np.ones(2)}, 0.1)
    net = init_params(SMALL, 0)
    g = {k: np.ones_like(v) for k, v in net.weights.items()}
    out = sgd_step(net, g, 0.5)
    assert all(np.array_equal(out.buffers[k], net.buffers[k]) for k in net.buffers)


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0, 1))
def test_sgd_steps_compose_linearly(g1, g2, lr):
    p = scalar(0.5)
    two = sgd_step(sgd_step(p, {"theta": g1}, lr), {"theta": g2}, lr)
    one = sgd_step(p, {"theta": g1 + g2}, lr)
    assert two["theta"] == pytest.approx(one["theta"], abs=1e-12)


def test_meta_test_zero_steps_and_single_step_equivalence(small_bench):
    theta = init_params(SMALL, 2)
    calib = small_bench.pool(lambda i, s: s.task.subject == 3 and s.trial == 0, 5, lambda s: (0, 350)).materialize()
    query = small_bench.pool(lambda i, s: s.task.subject == 3 and s.trial == 1, 40).materialize()
    adapted, m = meta_test(theta, calib, query, FineTuneConfig(steps=0))
    assert adapted.identical(theta) and 0 <= m.gait_acc <= 1 and m.n == len(query)
    one = fine_tune(theta, calib, 0.01, 1)
    ref = inner_adapt(theta, calib, 0.01, 1)
    assert all(np.array_equal(one.weights[k], ref.weights[k]) for k in theta.weights)
    assert all(np.array_equal(one.buffers[k], theta.buffers[k]) for k in theta.buffers)


def test_config_validation():
    with pytest.raises(ValueError):
        MetaConfig(alpha=0.0)
    with pytest.raises(ValueError):
        MetaConfig(inner_steps=0)
    with pytest.raises(ValueError):
        FineTuneConfig(steps=-1)
    assert (MetaConfig().n, MetaConfig().m, MetaConfig().epochs, MetaConfig().inner_steps) == (80, 120, 200, 1)
    assert (FineTuneConfig().learning_rate, FineTuneConfig().steps) == (3e-4, 4)

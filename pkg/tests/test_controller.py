import numpy as np
import pytest

from layerbudget import autodiff as ad
from layerbudget.autodiff import SeededRng
from layerbudget.controller import (
    N_ENV,
    BudgetLibrary,
    Controller,
    FrozenParameterError,
    check_frozen,
    naive_mask,
    train_step,
)
from layerbudget.data import SceneBatch, gen_dataset
from layerbudget.net import AdaptiveNet, BackboneSpec

import oracles

SPEC = BackboneSpec(layers=(3, 4), width=6, hidden=5, grid=(4, 4), embed_dim=4, dz=6, skip_hidden=5, prune_hidden=4)


@pytest.fixture
def net_ctl():
    net = AdaptiveNet.create(SPEC, SeededRng(0), skipgate=False, pruner=False)
    ctl = Controller.create(SPEC, SeededRng(1), net.params, budgets=(2, 4, 6), hidden=8)
    return net, ctl


@pytest.fixture
def patches():
    return SeededRng(2).normal((5, 2, 16, 9))


def test_qoi_rows_follow_sample_order(net_ctl, patches):
    _, ctl = net_ctl
    z = ctl.extract_qoi(patches).data
    perm = [3, 0, 4, 1, 2]
    np.testing.assert_allclose(ctl.extract_qoi(patches[perm]).data, z[perm], atol=1e-12)


def test_zeroed_modality_gives_bias_response(net_ctl, patches):
    _, ctl = net_ctl
    p = patches.copy()
    p[:, 1] = 0.0
    z = ctl.extract_qoi(p).data
    half = SPEC.dz // 2
    bias = np.maximum(ctl.params["ctrl.qoi.1.b2"].data + np.maximum(ctl.params["ctrl.qoi.1.b1"].data, 0)
                      @ ctl.params["ctrl.qoi.1.w2"].data, 0)
    np.testing.assert_allclose(z[:, half:], np.broadcast_to(bias, (5, half)), atol=1e-12)


def test_env_loss_uniform_and_oracle(net_ctl):
    _, ctl = net_ctl
    for k in ("w2", "b2"):
        ctl.params[f"ctrl.env.{k}"].data[...] = 0.0
    z = ad.const(SeededRng(3).normal((4, SPEC.dz)))
    assert ctl.env_loss(z, [0, 1, 2, 5]).item() == pytest.approx(np.log(N_ENV))
    ctl.params["ctrl.env.b2"].data[...] = SeededRng(4).normal(N_ENV)
    ctl.params["ctrl.env.w2"].data[...] = SeededRng(5).normal((SPEC.dz, N_ENV))
    logits = ctl.env_logits(z).data
    expected = np.mean([oracles.cross_entropy(list(r), y) for r, y in zip(logits, [0, 1, 2, 5])])
    assert ctl.env_loss(z, [0, 1, 2, 5]).item() == pytest.approx(expected, abs=1e-9)


def test_env_labels_checked(net_ctl):
    _, ctl = net_ctl
    with pytest.raises(ValueError):
        ctl.env_loss(ad.const(np.zeros((1, SPEC.dz))), [N_ENV])


def test_allocation_depends_on_budget(net_ctl, patches):
    _, ctl = net_ctl
    z = ctl.extract_qoi(patches)
    a = ctl.allocate(z, 2).values.data
    b = ctl.allocate(z, 6).values.data
    assert a.shape == (5, SPEC.L)
    assert not np.allclose(a, b)
    np.testing.assert_array_equal(ctl.allocate(z, 2).values.data, a)


def test_unknown_budget_rejected(net_ctl):
    _, ctl = net_ctl
    with pytest.raises(KeyError):
        ctl.allocate(ad.const(np.zeros((1, SPEC.dz))), 3)


def test_budget_library_validates():
    with pytest.raises(ValueError):
        BudgetLibrary((4, 4), 10)
    with pytest.raises(ValueError):
        BudgetLibrary((4, 12), 10)


def test_inference_popcount_equals_budget(net_ctl, patches):
    _, ctl = net_ctl
    for b in (2, 4, 6):
        alloc = ctl.infer_allocation(patches, b)
        assert np.all(alloc.mask.sum(axis=1) == b)
        np.testing.assert_array_equal(alloc.split.sum(axis=1), b)


def test_dominant_modality_gets_whole_budget(net_ctl, patches):
    _, ctl = net_ctl
    ctl.params["ctrl.alloc.b3"].data[:3] = 100.0
    alloc = ctl.infer_allocation(patches, 2)
    np.testing.assert_array_equal(alloc.split, np.tile([2, 0], (5, 1)))


def test_forced_first_layers(net_ctl, patches):
    _, ctl = net_ctl
    ctl.force_first = True
    ctl.params["ctrl.alloc.b3"].data[:] = np.arange(SPEC.L, dtype=float)
    mask = ctl.infer_allocation(patches, 4).mask
    assert np.all(mask[:, 0] == 1) and np.all(mask[:, 3] == 1)
    assert np.all(mask.sum(axis=1) == 4)


@pytest.mark.parametrize("b,expected", [(4, [1, 1, 0, 1, 1, 0, 0]), (5, [1, 1, 0, 1, 1, 1, 0]),
                                        (1, [0, 0, 0, 1, 0, 0, 0]), (7, [1, 1, 1, 1, 1, 1, 1])])
def test_naive_split(b, expected):
    np.testing.assert_array_equal(naive_mask(SPEC, b), expected)


def test_naive_split_spills_over():
    spec = BackboneSpec(layers=(2, 6))
    np.testing.assert_array_equal(naive_mask(spec, 6), [1, 1, 1, 1, 1, 1, 0, 0])


def test_margin_skips_forced_layers(net_ctl):
    _, ctl = net_ctl
    ctl.force_first = True
    logits = np.array([[9.0, 3.0, 1.0, 9.0, 2.5, 0.0, 0.0]])
    assert ctl.margins(logits, 3)[0] == pytest.approx(0.5)


def _frozen_setup(net_ctl):
    net, ctl = net_ctl
    net.params.freeze_all()
    net.params.set_trainable("ctrl.")
    return net, ctl


def test_train_step_gates_sum_to_budget(net_ctl):
    net, ctl = _frozen_setup(net_ctl)
    batch = SceneBatch.from_scenes(gen_dataset(SeededRng(3), 8, cfg=_cfg()))
    out = train_step(net, ctl, batch, 0.5, SeededRng(4))
    np.testing.assert_allclose(out["gate_sums"], out["budgets"], atol=1e-9)


def test_straight_through_estimator_gates_sum_to_budget(net_ctl):
    net, ctl = _frozen_setup(net_ctl)
    ctl.estimator, ctl.force_first = "st_topk", True
    batch = SceneBatch.from_scenes(gen_dataset(SeededRng(3), 8, cfg=_cfg()))
    out = train_step(net, ctl, batch, 0.5, SeededRng(4))
    np.testing.assert_allclose(out["gate_sums"], out["budgets"], atol=1e-12)


def test_train_step_refuses_unfrozen_backbone(net_ctl):
    net, ctl = net_ctl
    batch = SceneBatch.from_scenes(gen_dataset(SeededRng(3), 4, cfg=_cfg()))
    with pytest.raises(FrozenParameterError):
        train_step(net, ctl, batch, 0.5, SeededRng(4))


def test_gradient_leak_detected(net_ctl):
    net, _ = _frozen_setup(net_ctl)
    net.params["bb.0.0.w1"].grad = np.ones_like(net.params["bb.0.0.w1"].data)
    with pytest.raises(FrozenParameterError, match="received gradient"):
        check_frozen(net.params, ("ctrl.",))


def test_detached_qoi_leaves_env_loss_as_only_qoi_signal(net_ctl):
    net, ctl = _frozen_setup(net_ctl)
    batch = SceneBatch.from_scenes(gen_dataset(SeededRng(3), 8, cfg=_cfg()))
    train_step(net, ctl, batch, 0.5, SeededRng(4), alpha1=0.0, lr=0.0, detach_z=True)
    assert not np.any(net.params["ctrl.qoi.0.w1"].grad)
    assert np.any(net.params["ctrl.alloc.w1"].grad)


def test_loss_decreases_on_fixed_tiny_dataset(net_ctl):
    net, ctl = _frozen_setup(net_ctl)
    batch = SceneBatch.from_scenes(gen_dataset(SeededRng(7), 16, cfg=_cfg()))
    rng = SeededRng(8)
    losses = [train_step(net, ctl, batch, 0.5, rng, lr=3e-3)["loss"] for _ in range(200)]
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def _cfg():
    from layerbudget.data import SceneConfig

    return SceneConfig(height=4, width=4, max_targets=3)

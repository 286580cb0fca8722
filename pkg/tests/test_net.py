import itertools

import numpy as np
import pytest

from layerbudget import autodiff as ad
from layerbudget.autodiff import DiffValue, SeededRng
from layerbudget.net import (
    AdaptiveNet,
    BackboneSpec,
    SkipContext,
    detection_loss,
    f1_score,
    layerdrop_mask,
    modality_dropout,
    prune_tokens,
)

import oracles


def _compose(net, m, patches, layers):
    h = net.embed(m, patches)
    for l in layers:
        h = net.layer(m, l, h)
    return h.data


def test_block_matches_scalar_oracle(small_net, small_patches):
    p = small_net.params
    h = small_net.embed(0, small_patches[:1, 0]).data[0]
    got = small_net.layer(0, 1, DiffValue(h[None])).data[0]
    args = [p[f"bb.0.1.{k}"].data.tolist() for k in ("w1", "b1", "wc", "w2", "b2")]
    np.testing.assert_allclose(got, oracles.residual_block(h.tolist(), *args), atol=1e-12)


def test_zero_gates_return_embedding(small_net, small_patches):
    h, rec = small_net.encode_modality(1, small_patches[:, 1], np.zeros((3, 4)))
    np.testing.assert_array_equal(h.data, small_net.embed(1, small_patches[:, 1]).data)
    assert not rec.executed.any()


def test_one_gates_equal_full_stack(small_net, small_patches):
    h, _ = small_net.encode_modality(0, small_patches[:, 0], np.ones((3, 3)))
    np.testing.assert_allclose(h.data, _compose(small_net, 0, small_patches[:, 0], range(3)), atol=1e-12)


def test_every_hard_mask_equals_composition(small_spec, small_patches):
    spec = BackboneSpec(layers=(3, 3), width=4, hidden=4, grid=(4, 4), embed_dim=4, dz=4)
    net = AdaptiveNet.create(spec, SeededRng(8))
    worst = 0.0
    for bits in itertools.product((0, 1), repeat=6):
        gates = [DiffValue(np.broadcast_to(np.array(g, float), (3, 3))) for g in (bits[:3], bits[3:])]
        res = net.forward(small_patches, gates)
        for m in range(2):
            ref = _compose(net, m, small_patches[:, m], np.flatnonzero(bits[3 * m : 3 * m + 3]))
            worst = max(worst, np.max(np.abs(res.features[m].data - ref)))
    assert worst <= 1e-9


def test_per_sample_gates_are_independent(small_net, small_patches):
    gates = np.array([[1, 0, 1], [0, 1, 1], [1, 1, 1]], float)
    h, _ = small_net.encode_modality(0, small_patches[:, 0], gates)
    for i, row in enumerate(gates):
        ref = _compose(small_net, 0, small_patches[i : i + 1, 0], np.flatnonzero(row))
        np.testing.assert_allclose(h.data[i], ref[0], atol=1e-12)


def test_gate_shape_checked(small_net, small_patches):
    with pytest.raises(ad.ShapeError):
        small_net.encode_modality(0, small_patches[:, 0], DiffValue(np.ones((3, 4))))


def test_layerdrop_rate_zero_keeps_everything():
    spec = BackboneSpec(layerdrop_rate=0.0)
    assert all(m.bits.all() for m in layerdrop_mask(spec, SeededRng(0)))


def test_layerdrop_keep_frequency():
    spec = BackboneSpec(layerdrop_rate=0.2)
    masks = layerdrop_mask(spec, SeededRng(1), batch=10_000)
    kept = sum(m.bits.sum(axis=1) for m in masks).mean()
    assert kept == pytest.approx(0.8 * spec.L, abs=0.05)


def test_layerdrop_is_seeded():
    spec = BackboneSpec()
    a = layerdrop_mask(spec, SeededRng(3), batch=4)
    b = layerdrop_mask(spec, SeededRng(3), batch=4)
    assert all(np.array_equal(x.bits, y.bits) for x, y in zip(a, b))


def test_modality_dropout_rates():
    grids = SeededRng(0).normal((50, 2, 4, 4)) + 5.0
    same, dropped = modality_dropout(grids, SeededRng(1), 0.0)
    np.testing.assert_array_equal(same, grids)
    assert np.all(dropped == -1)
    out, dropped = modality_dropout(grids, SeededRng(1), 1.0)
    for i in range(50):
        zeroed = [m for m in range(2) if not out[i, m].any()]
        assert zeroed == [dropped[i]]


def test_skipgate_logit_is_pure_and_sees_remaining_count(small_net):
    z = SeededRng(2).normal(small_net.spec.dz)
    hbar = SeededRng(3).normal(small_net.spec.width)
    a = small_net.skipgate_logit(0, hbar, 1, 2, 3, z).item()
    assert small_net.skipgate_logit(0, hbar, 1, 2, 3, z).item() == a
    assert small_net.skipgate_logit(0, hbar, 1, 1, 3, z).item() != a


def test_embedding_index_range(small_net):
    with pytest.raises(IndexError):
        small_net.embedding(small_net.spec.L_max + 1)


def test_skipgate_gradient_reaches_mlp(small_net, small_patches):
    spec = small_net.spec
    z = SeededRng(4).normal((3, spec.dz))
    target = np.zeros((3, spec.n_tokens))
    gates = [np.ones((3, n)) for n in spec.layers]

    def f(_):
        res = small_net.forward(small_patches, gates, skip=SkipContext(z, tau=1.0, noise=False))
        return detection_loss(res.logits, target)

    rep = ad.grad_check(f, small_net.params["skip.0.w2"], step=1e-4, points=4)
    assert np.abs(rep.analytic).max() > 0
    assert ad.relative_error(rep.analytic, rep.numeric, floor=1e-3 * np.abs(rep.numeric).max()) < 1e-5


def test_hard_skip_executes_only_positive_logits(small_net, small_patches):
    spec = small_net.spec
    z = SeededRng(5).normal((3, spec.dz))
    small_net.params["skip.1.b2"].data[...] = -10.0
    res = small_net.forward(small_patches, [np.ones((3, 3)), np.ones((3, 4))], skip=SkipContext(z, hard=True))
    assert not res.records[1].executed.any()
    assert res.records[1].selected.all()
    np.testing.assert_array_equal(res.features[1].data, small_net.embed(1, small_patches[:, 1]).data)


def test_zero_scorer_gives_half(small_net, small_patches):
    for k in ("w1", "b1", "w2", "b2"):
        small_net.params[f"prune.0.{k}"].data[...] = 0.0
    h = small_net.embed(0, small_patches[:, 0])
    s = small_net.token_scores(0, h)
    assert s.shape == (3, small_net.spec.n_tokens)
    np.testing.assert_array_equal(s.data, 0.5)


def test_token_scorer_gradient(small_net, small_patches):
    h = ad.const(small_net.embed(0, small_patches[:, 0]).data)
    w = SeededRng(9).normal(small_net.spec.n_tokens)
    rep = ad.grad_check(lambda _: ad.sum_axis(ad.mul(small_net.token_scores(0, h), ad.const(w))),
                        small_net.params["prune.0.w1"], step=1e-4, points=4)
    assert ad.relative_error(rep.analytic, rep.numeric, floor=1e-3 * np.abs(rep.numeric).max()) < 1e-5


def test_prune_all_ones_is_identity():
    h = DiffValue(SeededRng(0).normal((5, 3)))
    np.testing.assert_array_equal(prune_tokens(h, np.ones(5), "soft").data, h.data)
    kept = prune_tokens(h, np.ones(5), "hard")
    np.testing.assert_array_equal(kept.tokens.data, h.data)


def test_prune_all_zeros_falls_back_to_best_token():
    h = DiffValue(SeededRng(0).normal((5, 3)))
    kept = prune_tokens(h, np.zeros(5), "hard", scores=np.array([0.1, 0.4, 0.3, 0.2, 0.0]))
    assert kept.fallback and kept.positions.tolist() == [1]


def test_prune_keeps_popcount():
    h = DiffValue(SeededRng(0).normal((6, 3)))
    kept = prune_tokens(h, np.array([1, 0, 1, 1, 0, 0]), "hard")
    assert kept.positions.tolist() == [0, 2, 3] and not kept.fallback


def test_soft_and_hard_pruning_give_same_logits(small_net, small_patches):
    spec = small_net.spec
    gates = [np.ones((3, n)) for n in spec.layers]
    res = small_net.forward(small_patches, gates)
    keep = [(SeededRng(m).uniform((3, spec.n_tokens)) < 0.5).astype(float) for m in range(spec.M)]
    soft = small_net.head(res.features, keep).data
    for i in range(3):
        survivors = [prune_tokens(res.features[m][i], keep[m][i], "hard") for m in range(spec.M)]
        np.testing.assert_allclose(small_net.head_from_survivors(survivors).data, soft[i], atol=1e-6)


def test_head_is_order_invariant_over_token_sets(small_net, small_patches):
    spec = small_net.spec
    res = small_net.forward(small_patches, [np.ones((3, n)) for n in spec.layers])
    sets = [prune_tokens(res.features[m][0], np.ones(spec.n_tokens), "hard") for m in range(spec.M)]
    a = small_net.head_from_survivors(sets).data
    b = small_net.head_from_survivors(sets[::-1]).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_zero_tokens_give_head_bias(small_net):
    spec = small_net.spec
    feats = [ad.const(np.zeros((2, spec.n_tokens, spec.width)))] * spec.M
    np.testing.assert_allclose(small_net.head(feats).data, np.broadcast_to(small_net.params["head.b"].data, (2, 16)))


def test_detection_loss_limits_and_oracle():
    t = (SeededRng(0).uniform((4, 4)) < 0.3).astype(float)
    assert detection_loss(DiffValue(np.zeros((4, 4))), t).item() == pytest.approx(np.log(2))
    assert detection_loss(DiffValue(np.where(t > 0, 40.0, -40.0)), t).item() < 1e-12
    x = SeededRng(1).normal((4, 4), 2.0)
    expected = np.mean([oracles.bce(a, b) for a, b in zip(x.ravel(), t.ravel())])
    assert detection_loss(DiffValue(x), t).item() == pytest.approx(expected, abs=1e-9)


def test_f1_score_edge_cases():
    t = np.array([[1.0, 0.0, 0.0]])
    assert f1_score(np.array([[5.0, -5.0, -5.0]]), t) == 1.0
    assert f1_score(np.array([[-5.0, 5.0, -5.0]]), t) == 0.0
    assert f1_score(np.full((1, 3), -5.0), np.zeros((1, 3))) == 1.0

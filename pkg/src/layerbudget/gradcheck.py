"""Registered finite-difference and invariant checks with fixed seeds.

``run_suite()`` runs every check and returns a :class:`SuiteResult`; the
``gradcheck`` CLI subcommand exits nonzero when any check fails.

Gradient checks report the largest elementwise relative error, with the
denominator floored at 1e-3 of the largest numeric gradient entry so that
entries which are numerically zero do not turn rounding noise into huge
ratios.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import relax
from .autodiff import SeededRng
from .net import AdaptiveNet, BackboneSpec, SkipContext, detection_loss

GRAD_TOL = 1e-4
TAUS = (1.0, 0.1)
_REGISTRY: dict = {}


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


@dataclass
class SuiteResult:
    results: list = field(default_factory=list)

    @property
    def passed(self):
        return all(r.passed for r in self.results)

    @property
    def failures(self):
        return [r for r in self.results if not r.passed]

    def summary(self):
        lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} {r.detail} ({r.seconds:.2f}s)" for r in self.results]
        n_ok = sum(r.passed for r in self.results)
        lines.append(f"{n_ok}/{len(self.results)} checks passed")
        return "\n".join(lines)


def register(name):
    def deco(fn):
        if name in _REGISTRY:
            raise KeyError(f"check {name!r} registered twice")
        _REGISTRY[name] = fn
        return fn

    return deco


def registered():
    return tuple(_REGISTRY)


def scaled_error(analytic, numeric):
    scale = 1e-3 * max(float(np.max(np.abs(numeric))), 1e-9)
    return ad.relative_error(analytic, numeric, floor=scale)


def _grad_error(f, x: ad.DiffValue, step=1e-4):
    rep = ad.grad_check(f, x, step=step, points=4)
    return scaled_error(rep.analytic, rep.numeric)


def _tiny_spec(layers=(3, 3)):
    return BackboneSpec(layers=layers, width=4, hidden=4, grid=(3, 3), embed_dim=4, dz=4,
                        skip_hidden=5, prune_hidden=4)


def _tiny_net(seed, layers=(3, 3)):
    spec = _tiny_spec(layers)
    net = AdaptiveNet.create(spec, SeededRng(seed).child("net"))
    # the +3 gate biases used for training saturate the sigmoids at small tau
    for name in net.params.names("skip.") + net.params.names("prune."):
        if name.endswith("b2"):
            net.params[name].data[...] = SeededRng(seed).child(name).normal(net.params[name].shape, 0.3)
    patches = SeededRng(seed).child("x").normal((2, spec.M, spec.n_tokens, spec.patch**2))
    target = (SeededRng(seed).child("y").uniform((2, spec.n_tokens)) < 0.3).astype(float)
    return net, patches, target


# ---------------------------------------------------------------- relaxation values


def neuralsort_oracle(pi, tau):
    """Direct double loop over the relaxed-sort definition, no vectorisation."""
    pi = np.asarray(pi, dtype=np.float64)
    n = len(pi)
    out = np.zeros((n, n))
    for i in range(1, n + 1):
        s = np.array([(n + 1 - 2 * i) * pi[j] - sum(abs(pi[j] - pi[k]) for k in range(n)) for j in range(n)])
        s = s / tau
        e = np.exp(s - s.max())
        out[i - 1] = e / e.sum()
    return out


@register("neuralsort_values")
def check_neuralsort_values():
    worst = 0.0
    for seed in range(20):
        pi = SeededRng(seed).child("ns").normal(int(2 + seed % 7))
        for tau in TAUS:
            got = relax.neuralsort(pi, tau).matrix.data
            worst = max(worst, float(np.max(np.abs(got - neuralsort_oracle(pi, tau)))))
    return worst < 1e-10, f"max |P - oracle| = {worst:.2e}"


@register("neuralsort_row_stochastic")
def check_row_stochastic():
    worst = 0.0
    for seed in range(100):
        r = SeededRng(seed).child("rows")
        n = int(r.integers(2, 9))
        P = relax.neuralsort(r.normal(n, 3.0), float(r.uniform(None, 0.01, 2.0))).matrix.data
        worst = max(worst, float(np.max(np.abs(P.sum(axis=-1) - 1.0))))
    return worst <= 1e-9, f"max row-sum deviation {worst:.2e}"


@register("budget_gate_sum")
def check_budget_gate_sum():
    worst = 0.0
    for seed in range(100):
        r = SeededRng(seed).child("gate")
        n = int(r.integers(2, 9))
        b = int(r.integers(1, n + 1))
        P = relax.neuralsort(r.normal(n, 3.0), float(r.uniform(None, 0.01, 2.0)))
        worst = max(worst, abs(float(relax.budget_gate(P, b).gates.data.sum()) - b))
    return worst <= 1e-6, f"max |sum(g) - b| = {worst:.2e}"


@register("neuralsort_hard_limit")
def check_hard_limit():
    worst = 1.0
    for seed in range(100):
        r = SeededRng(seed).child("limit")
        n = int(r.integers(2, 9))
        pi = r.permutation(n) * 0.5 + 0.1 * r.uniform(None)
        P = relax.neuralsort(pi, 0.01).matrix.data
        order = np.argsort(-pi, kind="stable")
        if not np.array_equal(P.argmax(axis=1), order):
            return False, f"seed {seed}: argmax rows disagree with the sort order"
        worst = min(worst, float(P.max(axis=1).min()))
    return worst > 0.99, f"min row max {worst:.6f}"


# ---------------------------------------------------------------- gradients


@register("grad_neuralsort_gate")
def check_grad_gate():
    worst = 0.0
    for seed, tau in itertools.product(range(5), TAUS):
        r = SeededRng(seed).child("gg")
        n = 6
        c = r.normal(n)
        pi = ad.DiffValue(r.normal(n))
        b = 1 + seed % (n - 1)

        def f(x):
            g = relax.budget_gate(relax.neuralsort(x, tau), b).gates
            return ad.add(ad.sum_axis(ad.mul(g, ad.const(c))), ad.scale(ad.sum_axis(ad.mul(g, g)), 0.5))

        worst = max(worst, _grad_error(f, pi))
    return worst < GRAD_TOL, f"max rel err {worst:.2e}"


@register("grad_skipgate")
def check_grad_skipgate():
    worst = 0.0
    for seed, tau in itertools.product(range(2), TAUS):
        net, patches, target = _tiny_net(seed)
        spec = net.spec
        z = SeededRng(seed).child("z").normal((2, spec.dz))
        gates = [np.ones((2, n)) for n in spec.layers]
        ctx = SkipContext(z=z, tau=tau, noise=False)

        def f(_):
            res = net.forward(patches, gates, skip=ctx)
            return detection_loss(res.logits, target)

        for name in ("skip.0.w1", "skip.0.w2", "skip.1.wz"):
            worst = max(worst, _grad_error(f, net.params[name]))
    return worst < GRAD_TOL, f"max rel err {worst:.2e}"


@register("grad_token_scorer")
def check_grad_token_scorer():
    worst = 0.0
    for seed, tau in itertools.product(range(2), TAUS):
        net, patches, target = _tiny_net(seed)
        spec = net.spec
        gates = [np.ones((2, n)) for n in spec.layers]
        with ad.no_grad():
            feats = [ad.const(h.data) for h in net.forward(patches, gates).features]

        def f(_):
            keep = [net.token_scores(m, feats[m], tau=tau) for m in range(spec.M)]
            util = ad.add(ad.sum_axis(keep[0]), ad.sum_axis(keep[1]))
            return ad.add(detection_loss(net.head(feats, keep), target), ad.scale(util, 0.01))

        for name in ("prune.0.w1", "prune.0.w2", "prune.1.b1"):
            worst = max(worst, _grad_error(f, net.params[name]))
    return worst < GRAD_TOL, f"max rel err {worst:.2e}"


@register("grad_primitives")
def check_grad_primitives():
    r = SeededRng(7).child("prim")
    w = r.normal((4, 3))
    w_sq = r.normal((4, 4))
    y = np.array([0, 2, 1, 1])
    t = (r.uniform((4, 3)) < 0.5).astype(float)
    cases = {
        "matmul": lambda x: ad.sum_axis(ad.mul(ad.matmul(x, ad.const(w)), ad.matmul(x, ad.const(w)))),
        "softmax": lambda x: ad.sum_axis(ad.mul(ad.softmax_rows(x), ad.const(w_sq))),
        "ce": lambda x: ad.ce_with_logits(ad.matmul(ad.reshape(x, (4, 4)), ad.const(w)), y),
        "bce": lambda x: ad.bce_with_logits(ad.matmul(ad.reshape(x, (4, 4)), ad.const(w)), t),
        "pairwise": lambda x: ad.sum_axis(ad.mul(ad.abs_pairwise_diff(x), ad.abs_pairwise_diff(x))),
        "tanh_exp": lambda x: ad.sum_axis(ad.add(ad.tanh(x), ad.exp(ad.scale(x, 0.3)))),
        "log_sigmoid": lambda x: ad.sum_axis(ad.log(ad.sigmoid(x))),
        "take_concat": lambda x: ad.sum_axis(ad.mul(ad.concat([x[1:], x[:1]], axis=0), x)),
        "mean": lambda x: ad.sum_axis(ad.mul(ad.mean_axis(x, axis=1), ad.mean_axis(x, axis=1))),
    }
    worst, worst_name = 0.0, ""
    for name, f in cases.items():
        x = ad.DiffValue(SeededRng(3).child(name).normal((4, 4)))
        err = _grad_error(f, x)
        if err > worst:
            worst, worst_name = err, name
    return worst < GRAD_TOL, f"max rel err {worst:.2e} ({worst_name})"


# ---------------------------------------------------------------- discrete paths


@register("hard_soft_consistency")
def check_hard_soft():
    net, patches, _ = _tiny_net(11, layers=(3, 3))
    spec = net.spec
    worst = 0.0
    with ad.no_grad():
        for bits in itertools.product((0, 1), repeat=spec.L):
            mask = np.array(bits, dtype=float)
            gated = net.forward(patches, [ad.DiffValue(np.broadcast_to(g, (2, len(g)))) for g in spec.split(mask)])
            for m, g in enumerate(spec.split(mask)):
                h = net.embed(m, patches[:, m])
                for l in np.flatnonzero(g):
                    h = net.layer(m, l, h)
                worst = max(worst, float(np.max(np.abs(gated.features[m].data - h.data))))
    return worst <= 1e-9, f"max |gated - composed| = {worst:.2e} over {2 ** spec.L} masks"


@register("straight_through")
def check_straight_through():
    w = ad.DiffValue(np.array([0.2, 0.5, 0.7, 0.49]))
    out = relax.st_round(w)
    ad.backward(ad.sum_axis(ad.mul(out, ad.const([1.0, 2.0, 3.0, 4.0]))))
    ok_round = np.array_equal(out.data, [0, 1, 1, 0]) and np.allclose(w.grad, [1, 2, 3, 4])
    pi = ad.DiffValue(np.array([0.3, -1.0, 2.0, 0.9, 0.1]))
    g = relax.st_topk(pi, 2, noise=False).gates
    ok_topk = np.array_equal(g.data, [0, 0, 1, 1, 0])
    ad.backward(ad.sum_axis(g))
    ok_topk &= bool(np.all(np.isfinite(pi.grad)))
    return ok_round and ok_topk, f"st_round {'ok' if ok_round else 'wrong'}, st_topk {'ok' if ok_topk else 'wrong'}"


def run_suite(names=None) -> SuiteResult:
    """Run the named checks (all by default); exceptions count as failures."""
    names = registered() if names is None else tuple(names)
    unknown = [n for n in names if n not in _REGISTRY]
    if unknown:
        raise KeyError(f"unknown checks {unknown}; registered: {registered()}")
    suite = SuiteResult()
    for name in names:
        t0 = time.perf_counter()
        try:
            passed, detail = _REGISTRY[name]()
        except Exception as exc:  # a crashing check is a failing check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        suite.results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - t0))
    return suite

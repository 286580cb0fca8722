"""Quality-aware, budget-conditioned layer allocation controller.

The controller looks at every modality's raw input, summarises its quality
into an embedding ``z`` (trained to predict the corruption kind), appends a
fixed sinusoidal embedding of the requested budget ``b`` and emits one logit
per backbone layer. Inference activates the ``b`` largest logits; training
relaxes that choice with NeuralSort (or, for the baseline, a straight-through
top-k).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue, ParamStore, SeededRng, init_weight
from .net import AdaptiveNet, BackboneSpec, detection_loss, sinusoidal_table
from .relax import (
    LogitVector,
    SoftGateVector,
    budget_gate,
    logit_margin,
    neuralsort,
    sample_gumbel,
    st_topk,
    topk_mask,
)

N_ENV = 6


class FrozenParameterError(RuntimeError):
    """A parameter that must stay frozen is trainable or received gradient."""


class BudgetLibrary:
    """Fixed sinusoidal embedding per allowed layer budget."""

    def __init__(self, budgets, L, dim=16):
        budgets = tuple(int(b) for b in budgets)
        if any(b2 <= b1 for b1, b2 in zip(budgets, budgets[1:])):
            raise ValueError("budgets must be strictly increasing")
        if budgets[0] < 1 or budgets[-1] > L:
            raise ValueError(f"budgets must lie in [1, {L}]")
        self.budgets = budgets
        self.dim = dim
        self._table = sinusoidal_table(L + 1, dim)

    def __contains__(self, b):
        return int(b) in self.budgets

    def embed(self, b):
        b = np.atleast_1d(np.asarray(b, dtype=np.int64))
        missing = sorted(set(b.tolist()) - set(self.budgets))
        if missing:
            raise KeyError(f"no embedding for budget(s) {missing}; library has {self.budgets}")
        return self._table[b]


@dataclass
class AllocationState:
    logits: np.ndarray  # [B, L]
    budget: np.ndarray  # [B]
    mask: np.ndarray  # [B, L] {0, 1}
    split: np.ndarray  # [B, M] layers per modality

    def modality_masks(self, spec: BackboneSpec):
        return spec.split(self.mask)


class Controller:
    def __init__(self, spec: BackboneSpec, params: ParamStore, budgets=(4, 6, 8, 16), estimator="neuralsort",
                 force_first=False, hidden=64, qoi_hidden=16, emb_dim=16):
        if estimator not in ("neuralsort", "st_topk"):
            raise ValueError(f"unknown estimator {estimator!r}")
        self.spec = spec
        self.params = params
        self.library = BudgetLibrary(budgets, spec.L, emb_dim)
        self.estimator = estimator
        self.force_first = force_first
        self.hidden = hidden
        self.qoi_hidden = qoi_hidden

    @classmethod
    def create(cls, spec: BackboneSpec, rng: SeededRng, params: ParamStore, **kw):
        ctl = cls(spec, params, **kw)
        r = rng.child("controller")
        P, q = spec.patch**2, ctl.qoi_hidden
        per_mod = spec.dz // spec.M
        for m in range(spec.M):
            params.add(f"ctrl.qoi.{m}.w1", init_weight(r.child("qoi", m, 1), P, q))
            params.add(f"ctrl.qoi.{m}.b1", np.zeros(q))
            params.add(f"ctrl.qoi.{m}.w2", init_weight(r.child("qoi", m, 2), q, per_mod))
            params.add(f"ctrl.qoi.{m}.b2", np.zeros(per_mod))
        params.add("ctrl.env.w1", init_weight(r.child("env", 1), spec.dz, spec.dz))
        params.add("ctrl.env.b1", np.zeros(spec.dz))
        params.add("ctrl.env.w2", init_weight(r.child("env", 2), spec.dz, N_ENV))
        params.add("ctrl.env.b2", np.zeros(N_ENV))
        fan_in = spec.dz + ctl.library.dim
        params.add("ctrl.alloc.w1", init_weight(r.child("alloc", 1), fan_in, ctl.hidden))
        params.add("ctrl.alloc.b1", np.zeros(ctl.hidden))
        params.add("ctrl.alloc.w2", init_weight(r.child("alloc", 2), ctl.hidden, ctl.hidden))
        params.add("ctrl.alloc.b2", np.zeros(ctl.hidden))
        params.add("ctrl.alloc.w3", init_weight(r.child("alloc", 3), ctl.hidden, spec.L, gain=0.5))
        params.add("ctrl.alloc.b3", np.zeros(spec.L))
        return ctl

    @property
    def budgets(self):
        return self.library.budgets

    def extract_qoi(self, patches) -> DiffValue:
        """z = concat over modalities of mean-pooled per-token features: [B, dz]."""
        p = self.params
        patches = np.asarray(patches, dtype=np.float64)
        feats = []
        for m in range(self.spec.M):
            x = ad.const(patches[:, m])
            h = ad.relu(ad.add(ad.matmul(x, p[f"ctrl.qoi.{m}.w1"]), p[f"ctrl.qoi.{m}.b1"]))
            h = ad.relu(ad.add(ad.matmul(h, p[f"ctrl.qoi.{m}.w2"]), p[f"ctrl.qoi.{m}.b2"]))
            feats.append(ad.mean_axis(h, axis=1))
        return ad.concat(feats, axis=1)

    def env_logits(self, z) -> DiffValue:
        p = self.params
        h = ad.relu(ad.add(ad.matmul(z, p["ctrl.env.w1"]), p["ctrl.env.b1"]))
        return ad.add(ad.matmul(h, p["ctrl.env.w2"]), p["ctrl.env.b2"])

    def env_loss(self, z, y_env) -> DiffValue:
        y = np.atleast_1d(np.asarray(y_env, dtype=np.int64))
        if np.any(y < 0) or np.any(y >= N_ENV):
            raise ValueError(f"corruption labels must lie in [0, {N_ENV})")
        return ad.ce_with_logits(self.env_logits(z), y)

    def allocate(self, z, b) -> LogitVector:
        """Per-layer logits [B, L] for budget(s) ``b`` (scalar or one per sample)."""
        p = self.params
        z = ad.as_value(z)
        if z.ndim == 1:
            z = ad.reshape(z, (1, -1))
        B = z.shape[0]
        e_b = self.library.embed(np.broadcast_to(np.asarray(b), (B,)))
        x = ad.concat([z, ad.const(e_b)], axis=1)
        h = ad.relu(ad.add(ad.matmul(x, p["ctrl.alloc.w1"]), p["ctrl.alloc.b1"]))
        h = ad.relu(ad.add(ad.matmul(h, p["ctrl.alloc.w2"]), p["ctrl.alloc.b2"]))
        pi = ad.add(ad.matmul(h, p["ctrl.alloc.w3"]), p["ctrl.alloc.b3"])
        return LogitVector(pi, self.spec.layers)

    def forced_mask(self):
        forced = np.zeros(self.spec.L, dtype=bool)
        if self.force_first:
            forced[list(self.spec.offsets)] = True
        return forced

    def train_gates(self, pi: LogitVector, b, tau, rng: SeededRng | None, noise=True) -> SoftGateVector:
        """Relaxed gates used during training; each row sums to its budget."""
        if self.estimator == "st_topk":
            forced = self.forced_mask() if self.force_first else None
            return st_topk(pi, b, tau=1.0, rng=rng, noise=noise, forced=forced, sizes=self.spec.layers)
        v = pi.values
        if noise:
            v = ad.add(v, sample_gumbel(rng, v.shape))
        return budget_gate(neuralsort(v, tau), b, sizes=self.spec.layers)

    def infer_allocation(self, patches, b) -> AllocationState:
        """Hard top-b allocation without noise."""
        with ad.no_grad():
            z = self.extract_qoi(patches)
            B = z.shape[0]
            b = np.broadcast_to(np.asarray(b), (B,))
            pi = self.allocate(z, b).values.data
        forced = self.forced_mask() if self.force_first else None
        mask = topk_mask(pi, b, forced=forced).bits
        split = np.stack([s.sum(axis=1) for s in self.spec.split(mask)], axis=1)
        return AllocationState(pi, np.asarray(b), mask, split)

    def margins(self, logits, b):
        """b-th minus (b+1)-th largest logit among the layers the controller chooses freely.

        NaN where that gap does not exist (no free choice, or every layer selected).
        """
        logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
        b = np.broadcast_to(np.asarray(b), (logits.shape[0],))
        if self.force_first:
            logits = logits[:, ~self.forced_mask()]
            b = b - self.spec.M
        out = np.full(logits.shape[0], np.nan)
        ok = (b > 0) & (b < logits.shape[1])
        if ok.any():
            out[ok] = logit_margin(logits[ok], b[ok])
        return out


def naive_mask(spec: BackboneSpec, b: int) -> np.ndarray:
    """Even split of ``b`` over the first layers of each modality.

    The odd layer goes to the modality with more layers; counts that exceed a
    backbone spill over to the others.
    """
    if not 0 <= b <= spec.L:
        raise ValueError(f"budget {b} outside [0, {spec.L}]")
    order = sorted(range(spec.M), key=lambda m: (-spec.layers[m], m))
    counts = [b // spec.M] * spec.M
    for m in order[: b % spec.M]:
        counts[m] += 1
    spill = 0
    for m in range(spec.M):
        if counts[m] > spec.layers[m]:
            spill += counts[m] - spec.layers[m]
            counts[m] = spec.layers[m]
    for m in order:
        take = min(spill, spec.layers[m] - counts[m])
        counts[m] += take
        spill -= take
    mask = np.zeros(spec.L, dtype=np.int64)
    for o, c in zip(spec.offsets, counts):
        mask[o : o + c] = 1
    return mask


def check_frozen(params: ParamStore, allowed_prefixes):
    """Raise if anything outside ``allowed_prefixes`` is trainable or holds gradient."""
    allowed = tuple(allowed_prefixes)
    bad = [n for n in params.trainable_names() if not n.startswith(allowed)]
    if bad:
        raise FrozenParameterError(f"parameters must be frozen: {bad[:5]}{'...' if len(bad) > 5 else ''}")
    leaks = params.frozen_grad_leaks()
    if leaks:
        raise FrozenParameterError(f"frozen parameters received gradient: {leaks[:5]}")


def train_step(net: AdaptiveNet, ctl: Controller, batch, tau, rng: SeededRng, alpha1=1.0, lr=1e-3,
               noise=True, detach_z=False):
    """One controller update on ``batch`` with a budget drawn per sample.

    Only ``ctrl.*`` parameters may be trainable.
    """
    params = net.params
    check_frozen(params, ("ctrl.",))
    params.zero_grad()
    B = len(batch)
    b = rng.choice(np.asarray(ctl.budgets), size=B)
    z = ctl.extract_qoi(batch.patches)
    pi = ctl.allocate(ad.const(z.data) if detach_z else z, b)
    g = ctl.train_gates(pi, b, tau, rng, noise=noise)
    res = net.forward(batch.patches, g.split())
    det = detection_loss(res.logits, batch.occupancy.reshape(B, -1))
    env = ctl.env_loss(z, batch.labels)
    loss = ad.add(det, ad.scale(env, alpha1))
    ad.backward(loss)
    check_frozen(params, ("ctrl.",))
    ad.adam_step(params, lr)
    return {
        "loss": loss.item(),
        "detection": det.item(),
        "env": env.item(),
        "gate_sums": g.gates.data.sum(axis=1),
        "budgets": b,
    }

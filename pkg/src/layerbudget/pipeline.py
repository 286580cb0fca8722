"""Five-stage training recipe, evaluation grid and report files.

Stages (each writes a checkpoint under ``<out_dir>/ckpt``):

1. unimodal backbones + head, LayerDrop
2. fused network initialised from both unimodal checkpoints (modality 1
   first, then modality 0 overriding shared names), LayerDrop + modality
   dropout
3. controller only (NeuralSort); the straight-through baseline controller is
   trained alongside on the same data and noise
4. SkipGates only
5. token pruner: soft phase (pruner only), then hard phase (pruner + head)
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import autodiff as ad
from .autodiff import ParamStore, SeededRng
from .controller import Controller, check_frozen, naive_mask, train_step
from .cost import CostModel, ExecutionTrace, batch_cost, traces_from_arrays
from .data import KINDS, SceneBatch, SceneConfig, gen_batch
from .net import AdaptiveNet, BackboneSpec, SkipContext, bce_np, detection_loss, f1_score, layerdrop_mask, modality_dropout
from .relax import hinge_utilization

log = logging.getLogger(__name__)

VARIANTS = ("Naive", "SWAN-C", "SWAN-SC", "SWAN-PSC", "ADMN-baseline")
ASYMMETRIC = {"A-sparsify": 1, "B-fog": 0, "B-dark": 0}  # kind -> uncorrupted modality
CSV_COLUMNS = (
    "corruption", "budget", "variant", "n_samples", "detection_loss", "f1",
    "selected_0", "selected_1", "executed_0", "executed_1",
    "retention_0", "retention_1", "cost", "budget_ok", "executed_subset_ok",
)


class StageOrderError(RuntimeError):
    """A stage was run before its prerequisite checkpoint exists."""


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    # network
    layers: tuple = (8, 12)
    width: int = 16
    hidden: int = 16
    grid: tuple = (8, 8)
    budgets: tuple = (4, 6, 8, 16)
    project_mean: bool = False
    # data
    n_train: int = 1024
    n_eval: int = 500
    batch_size: int = 32
    train_severity: tuple = (0.4, 1.0)
    eval_severity: tuple = (0.7, 1.0)
    # stage hyperparameters
    epochs: tuple = (20, 12, 16, 16, 16, 16)  # stage 1..4, stage 5 soft, stage 5 hard
    lr: float = 1e-3
    layerdrop_rate: float = 0.2
    modality_dropout: float = 0.3
    alpha1: float = 1.0
    alpha2: float = 0.005
    alpha3: float = 0.001
    beta: float = 2.0
    beta_m: tuple | None = None  # defaults to the per-modality layer counts
    tau_controller: float = 0.5
    tau_skipgate: float = 0.25
    tau_floor: float = 0.05
    detach_z: bool = False
    retrain_head: str = "full"  # or "none": keep the head frozen in the hard pruning phase
    # cost model
    layer_costs: tuple = (1.0, 2.4)
    token_cost: float = 0.01
    controller_overhead: float = 0.5
    skipgate_overhead: float = 0.2
    pruner_overhead: float = 0.2
    # extra studies
    train_baseline: bool = True
    layerdrop_study: bool = True
    alpha3_zero_study: bool = True
    study_masks: int = 100
    write_traces: bool = True

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(v))

    @property
    def spec(self):
        return BackboneSpec(layers=self.layers, width=self.width, hidden=self.hidden, grid=self.grid,
                            layerdrop_rate=self.layerdrop_rate, project_mean=self.project_mean)

    @property
    def cost_model(self):
        return CostModel(self.layer_costs, self.token_cost, self.controller_overhead,
                         self.skipgate_overhead, self.pruner_overhead)

    @property
    def scene_config(self):
        return SceneConfig(height=self.grid[0], width=self.grid[1])

    @property
    def beta_scale(self):
        return tuple(self.beta_m) if self.beta_m is not None else tuple(float(x) for x in self.layers)

    @property
    def ckpt_dir(self):
        return Path(self.out_dir) / "ckpt"

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def anneal(numerator, epoch, floor):
    """Temperature ``max(numerator / epoch, floor)`` for 1-based ``epoch``."""
    return max(numerator / epoch, floor)


# ---------------------------------------------------------------- data


def train_data(cfg: RunConfig, corrupted: bool) -> SceneBatch:
    rng = SeededRng(cfg.seed).child("data", "train", "corrupt" if corrupted else "clean")
    kinds = KINDS if corrupted else ("clean",)
    return gen_batch(rng, cfg.n_train, kinds, cfg.train_severity, cfg.scene_config)


def eval_data(cfg: RunConfig, kind: str, n=None) -> SceneBatch:
    rng = SeededRng(cfg.seed).child("data", "eval", kind)
    return gen_batch(rng, n or cfg.n_eval, (kind,), cfg.eval_severity, cfg.scene_config)


def minibatches(n, batch_size, rng: SeededRng):
    order = rng.permutation(n)
    for lo in range(0, n - batch_size + 1, batch_size):
        yield order[lo : lo + batch_size]


# ---------------------------------------------------------------- model building


def build_net(cfg: RunConfig, params: ParamStore | None = None, modalities=None) -> AdaptiveNet:
    spec = cfg.spec
    rng = SeededRng(cfg.seed).child("init")
    net = AdaptiveNet.create(spec, rng, modalities=modalities, skipgate=False, pruner=False)
    if params is not None:
        net.params.load_from(params)
    return net


def ensure_controller(net: AdaptiveNet, cfg: RunConfig, baseline=False) -> Controller:
    kw = dict(budgets=cfg.budgets)
    if baseline:
        kw.update(estimator="st_topk", force_first=True)
    if "ctrl.alloc.w1" in net.params:
        return Controller(net.spec, net.params, **kw)
    return Controller.create(net.spec, SeededRng(cfg.seed).child("init"), net.params, **kw)


def ensure_components(net: AdaptiveNet, cfg: RunConfig, skipgate=False, pruner=False):
    from .net import init_pruner, init_skipgate

    rng = SeededRng(cfg.seed).child("init")
    for m in range(net.spec.M):
        if skipgate and not net.has_skipgate(m):
            init_skipgate(net.params, net.spec, m, rng)
        if pruner and not net.has_pruner(m):
            init_pruner(net.params, net.spec, m, rng)


def load_net(cfg: RunConfig, name) -> AdaptiveNet:
    path = cfg.ckpt_dir / f"{name}.json"
    if not path.exists():
        raise StageOrderError(f"missing checkpoint {path}")
    return AdaptiveNet(cfg.spec, ParamStore.load(path))


def _require(cfg, *names):
    for n in names:
        p = cfg.ckpt_dir / f"{n}.json"
        if not p.exists():
            raise StageOrderError(f"missing prerequisite checkpoint {p}")


def _save(net, cfg, name):
    return net.params.save(cfg.ckpt_dir / f"{name}.json")


def _log_epoch(stage, epoch, losses):
    log.info("stage %s epoch %d loss %.5f", stage, epoch, float(np.mean(losses)))


# ---------------------------------------------------------------- stages 1-2


def unimodal_logits(net: AdaptiveNet, m, patches, gates):
    h, _ = net.encode_modality(m, patches[:, m], gates)
    return net.head([h])


def stage1_train_unimodal(cfg: RunConfig, layerdrop_rate=None, tag=""):
    """Train one backbone + head per modality on clean data."""
    rate = cfg.layerdrop_rate if layerdrop_rate is None else layerdrop_rate
    spec = BackboneSpec(**{**asdict(cfg.spec), "layerdrop_rate": rate})
    data = train_data(cfg, corrupted=False)
    paths, history = [], {}
    for m in range(spec.M):
        net = build_net(cfg, modalities=[m])
        rng = SeededRng(cfg.seed).child("stage1", m)
        losses = []
        for epoch in range(1, cfg.epochs[0] + 1):
            ep = []
            for idx in minibatches(len(data), cfg.batch_size, rng):
                batch = data.subset(idx)
                B = len(batch)
                mask = layerdrop_mask(spec, rng, batch=B)[m].bits
                net.params.zero_grad()
                loss = detection_loss(unimodal_logits(net, m, batch.patches, mask), batch.occupancy.reshape(B, -1))
                ad.backward(loss)
                ad.adam_step(net.params, cfg.lr)
                ep.append(loss.item())
            losses.extend(ep)
            _log_epoch(f"1/{m}{tag}", epoch, ep)
        history[m] = losses
        paths.append(_save(net, cfg, f"stage1_m{m}{tag}"))
    return paths, history


def stage2_train_fusion(cfg: RunConfig, layerdrop_rate=None, tag=""):
    """Fuse the unimodal checkpoints; later-loaded modality 0 overrides shared names."""
    rate = cfg.layerdrop_rate if layerdrop_rate is None else layerdrop_rate
    spec = BackboneSpec(**{**asdict(cfg.spec), "layerdrop_rate": rate})
    _require(cfg, *[f"stage1_m{m}{tag}" for m in range(spec.M)])
    net = build_net(cfg)
    for m in sorted(range(spec.M), reverse=True):
        net.params.load_from(ParamStore.load(cfg.ckpt_dir / f"stage1_m{m}{tag}.json"))
    data = train_data(cfg, corrupted=False)
    rng = SeededRng(cfg.seed).child("stage2")
    losses = []
    for epoch in range(1, cfg.epochs[1] + 1):
        ep = []
        for idx in minibatches(len(data), cfg.batch_size, rng):
            batch = data.subset(idx)
            B = len(batch)
            grids, _ = modality_dropout(batch.grids, rng, cfg.modality_dropout)
            batch = batch.with_grids(grids)
            masks = [mk.bits for mk in layerdrop_mask(spec, rng, batch=B)]
            net.params.zero_grad()
            res = net.forward(batch.patches, masks)
            loss = detection_loss(res.logits, batch.occupancy.reshape(B, -1))
            ad.backward(loss)
            ad.adam_step(net.params, cfg.lr)
            ep.append(loss.item())
        losses.extend(ep)
        _log_epoch(f"2{tag}", epoch, ep)
    return _save(net, cfg, f"stage2{tag}"), losses


# ---------------------------------------------------------------- stage 3


def stage3_train_controller(cfg: RunConfig, baseline=False):
    """Train the controller (or the straight-through baseline) on corrupted data."""
    _require(cfg, "stage2")
    net = load_net(cfg, "stage2")
    ctl = ensure_controller(net, cfg, baseline=baseline)
    net.params.freeze_all()
    net.params.set_trainable("ctrl.")
    net.params.reset_optimizer()
    data = train_data(cfg, corrupted=True)
    rng = SeededRng(cfg.seed).child("stage3")
    losses = []
    for epoch in range(1, cfg.epochs[2] + 1):
        tau = anneal(cfg.tau_controller, epoch, cfg.tau_floor)
        ep = []
        for idx in minibatches(len(data), cfg.batch_size, rng):
            out = train_step(net, ctl, data.subset(idx), tau, rng, cfg.alpha1, cfg.lr, detach_z=cfg.detach_z)
            ep.append(out["loss"])
        losses.extend(ep)
        _log_epoch("3" + ("/baseline" if baseline else ""), epoch, ep)
    return _save(net, cfg, "stage3_baseline" if baseline else "stage3"), losses


# ---------------------------------------------------------------- stage 4


def sample_budgets(cfg, rng, n):
    return rng.choice(np.asarray(cfg.budgets), size=n)


def skip_loss(records, cfg: RunConfig, B):
    total = None
    for m, rec in enumerate(records):
        for d, l in zip(rec.skip_logits, rec.skip_layers):
            term = hinge_utilization(d, cfg.beta, cfg.beta_scale[m], weights=rec.selected[:, l].astype(float))
            total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / B) if total is not None else ad.const(0.0)


def stage4_train_skipgate(cfg: RunConfig, alpha2=None):
    _require(cfg, "stage3")
    alpha2 = cfg.alpha2 if alpha2 is None else alpha2
    net = load_net(cfg, "stage3")
    ctl = ensure_controller(net, cfg)
    ensure_components(net, cfg, skipgate=True)
    net.params.freeze_all()
    net.params.set_trainable("skip.")
    net.params.reset_optimizer()
    data = train_data(cfg, corrupted=True)
    rng = SeededRng(cfg.seed).child("stage4")
    losses = []
    for epoch in range(1, cfg.epochs[3] + 1):
        tau = anneal(cfg.tau_skipgate, epoch, cfg.tau_floor)
        ep = []
        for idx in minibatches(len(data), cfg.batch_size, rng):
            batch = data.subset(idx)
            B = len(batch)
            b = sample_budgets(cfg, rng, B)
            alloc = ctl.infer_allocation(batch.patches, b)
            with ad.no_grad():
                z = ctl.extract_qoi(batch.patches).data
            net.params.zero_grad()
            res = net.forward(batch.patches, alloc.modality_masks(net.spec),
                              skip=SkipContext(z, tau=tau, rng=rng, noise=True, hard=False))
            det = detection_loss(res.logits, batch.occupancy.reshape(B, -1))
            loss = ad.add(det, ad.scale(skip_loss(res.records, cfg, B), alpha2))
            ad.backward(loss)
            check_frozen(net.params, ("skip.",))
            ad.adam_step(net.params, cfg.lr)
            ep.append(loss.item())
        losses.extend(ep)
        _log_epoch("4", epoch, ep)
    return _save(net, cfg, "stage4"), losses


# ---------------------------------------------------------------- stage 5


def _frozen_context(net, ctl, batch, b):
    alloc = ctl.infer_allocation(batch.patches, b)
    with ad.no_grad():
        z = ctl.extract_qoi(batch.patches).data
    return alloc, SkipContext(z, hard=True)


def stage5_train_pruner(cfg: RunConfig, alpha3=None, tag=""):
    """Soft phase (pruner only, zeroed tokens stay) then hard phase (pruner + head)."""
    _require(cfg, "stage4")
    alpha3 = cfg.alpha3 if alpha3 is None else alpha3
    net = load_net(cfg, "stage4")
    ctl = ensure_controller(net, cfg)
    ensure_components(net, cfg, pruner=True)
    data = train_data(cfg, corrupted=True)
    rng = SeededRng(cfg.seed).child("stage5")
    losses = {"soft": [], "hard": []}
    phases = [("soft", ("prune.",), cfg.epochs[4])]
    hard_trainable = ("prune.", "head.") if cfg.retrain_head == "full" else ("prune.",)
    phases.append(("hard", hard_trainable, cfg.epochs[5]))
    for phase, trainable, n_epochs in phases:
        net.params.freeze_all()
        net.params.set_trainable(trainable)
        net.params.reset_optimizer()
        for epoch in range(1, n_epochs + 1):
            ep = []
            for idx in minibatches(len(data), cfg.batch_size, rng):
                batch = data.subset(idx)
                B = len(batch)
                alloc, skip = _frozen_context(net, ctl, batch, sample_budgets(cfg, rng, B))
                net.params.zero_grad()
                res = net.forward(batch.patches, alloc.modality_masks(net.spec), skip=skip, prune=phase)
                det = detection_loss(res.logits, batch.occupancy.reshape(B, -1))
                util = ad.sum_axis(res.keep[0])
                for k in res.keep[1:]:
                    util = ad.add(util, ad.sum_axis(k))
                util = ad.scale(util, 1.0 / B)
                loss = ad.add(det, ad.scale(util, alpha3))
                ad.backward(loss)
                check_frozen(net.params, trainable)
                ad.adam_step(net.params, cfg.lr)
                ep.append(loss.item())
            losses[phase].extend(ep)
            _log_epoch(f"5/{phase}{tag}", epoch, ep)
    return _save(net, cfg, f"stage5{tag}"), losses


def train_all(cfg: RunConfig):
    """Run every stage (plus the configured twin runs) in order."""
    t0 = time.time()
    stage1_train_unimodal(cfg)
    stage2_train_fusion(cfg)
    if cfg.layerdrop_study:
        stage1_train_unimodal(cfg, layerdrop_rate=0.0, tag="_nodrop")
        stage2_train_fusion(cfg, layerdrop_rate=0.0, tag="_nodrop")
    stage3_train_controller(cfg)
    if cfg.train_baseline:
        stage3_train_controller(cfg, baseline=True)
    stage4_train_skipgate(cfg)
    stage5_train_pruner(cfg)
    if cfg.alpha3_zero_study:
        stage5_train_pruner(cfg, alpha3=0.0, tag="_alpha0")
    log.info("training finished in %.1fs", time.time() - t0)


def train_stage(cfg: RunConfig, stage: int, force=False):
    """CLI entry: one stage plus its configured twins. Order is enforced unless ``force``."""
    prereq = {2: ["stage1_m0", "stage1_m1"], 3: ["stage2"], 4: ["stage3"], 5: ["stage4"]}
    if not force:
        _require(cfg, *prereq.get(stage, []))
    if stage == 1:
        stage1_train_unimodal(cfg)
        if cfg.layerdrop_study:
            stage1_train_unimodal(cfg, layerdrop_rate=0.0, tag="_nodrop")
    elif stage == 2:
        stage2_train_fusion(cfg)
        if cfg.layerdrop_study:
            stage2_train_fusion(cfg, layerdrop_rate=0.0, tag="_nodrop")
    elif stage == 3:
        stage3_train_controller(cfg)
        if cfg.train_baseline:
            stage3_train_controller(cfg, baseline=True)
    elif stage == 4:
        stage4_train_skipgate(cfg)
    elif stage == 5:
        stage5_train_pruner(cfg)
        if cfg.alpha3_zero_study:
            stage5_train_pruner(cfg, alpha3=0.0, tag="_alpha0")
    else:
        raise ValueError(f"stage must be 1..5, got {stage}")


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalCell:
    corruption: str
    budget: int
    variant: str
    n_samples: int
    detection_loss: float
    f1: float
    selected: list
    executed: list
    retention: list
    cost: float
    budget_ok: bool
    executed_subset_ok: bool
    margin: float | None = None

    def row(self):
        return [
            self.corruption, self.budget, self.variant, self.n_samples, self.detection_loss, self.f1,
            *self.selected, *self.executed, *self.retention, self.cost, self.budget_ok, self.executed_subset_ok,
        ]


@dataclass
class EvalReport:
    cells: list
    studies: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def cell(self, corruption, budget, variant) -> EvalCell:
        for c in self.cells:
            if (c.corruption, c.budget, c.variant) == (corruption, budget, variant):
                return c
        raise KeyError((corruption, budget, variant))

    def to_dict(self):
        return {"config": self.config, "cells": [asdict(c) for c in self.cells], "studies": self.studies}

    @classmethod
    def from_dict(cls, d):
        return cls([EvalCell(**c) for c in d["cells"]], d.get("studies", {}), d.get("config", {}))


@dataclass
class VariantRun:
    logits: np.ndarray
    selected: list
    executed: list
    tokens: list
    components: tuple
    margins: np.ndarray | None = None


def run_variant(variant, nets, cfg: RunConfig, batch: SceneBatch, b) -> VariantRun:
    """Inference for one variant at budget ``b`` over ``batch`` (no gradients)."""
    spec = cfg.spec
    B = len(batch)
    N = spec.n_tokens
    with ad.no_grad():
        if variant == "Naive":
            mask = np.broadcast_to(naive_mask(spec, b), (B, spec.L))
            net = nets["stage2"]
            res = net.forward(batch.patches, spec.split(mask))
            return VariantRun(res.logits.data, [r.selected for r in res.records], [r.executed for r in res.records],
                              [np.full(B, N)] * spec.M, ())
        key = {"SWAN-C": "stage3", "SWAN-SC": "stage4", "SWAN-PSC": "stage5", "ADMN-baseline": "stage3_baseline"}[variant]
        net = nets[key]
        ctl = Controller(spec, net.params, budgets=cfg.budgets,
                         **({"estimator": "st_topk", "force_first": True} if variant == "ADMN-baseline" else {}))
        alloc = ctl.infer_allocation(batch.patches, b)
        skip = prune = None
        components = ("controller",)
        if variant in ("SWAN-SC", "SWAN-PSC"):
            skip = SkipContext(ctl.extract_qoi(batch.patches).data, hard=True)
            components += ("skipgate",)
        if variant == "SWAN-PSC":
            prune = "hard"
            components += ("pruner",)
        res = net.forward(batch.patches, alloc.modality_masks(spec), skip=skip, prune=prune)
        tokens = [np.full(B, N)] * spec.M if prune is None else [k.data.sum(axis=1).astype(int) for k in res.keep]
        return VariantRun(res.logits.data, [r.selected for r in res.records], [r.executed for r in res.records],
                          tokens, components, ctl.margins(alloc.logits, b))


def load_eval_nets(cfg: RunConfig):
    names = ["stage2", "stage3", "stage4", "stage5"] + (["stage3_baseline"] if cfg.train_baseline else [])
    _require(cfg, *names)
    return {n: load_net(cfg, n) for n in names}


def evaluate(cfg: RunConfig, nets=None, trace_sink=None) -> EvalReport:
    """Grid over corruption kind x budget x variant."""
    spec = cfg.spec
    if max(cfg.budgets) > spec.L:
        raise ValueError(f"budget {max(cfg.budgets)} exceeds {spec.L} layers")
    nets = nets or load_eval_nets(cfg)
    cm = cfg.cost_model
    variants = [v for v in VARIANTS if v != "ADMN-baseline" or "stage3_baseline" in nets]
    cells = []
    for kind in KINDS:
        batch = eval_data(cfg, kind)
        target = batch.occupancy.reshape(len(batch), -1)
        for b in cfg.budgets:
            for variant in variants:
                run = run_variant(variant, nets, cfg, batch, b)
                per_sample = bce_np(run.logits, target).mean(axis=1)
                cost = batch_cost(run.executed, run.tokens, run.components, cm)
                selected_total = sum(s.sum(axis=1) for s in run.selected)
                subset_ok = all(np.all(~e | s) for s, e in zip(run.selected, run.executed))
                cells.append(EvalCell(
                    kind, int(b), variant, len(batch),
                    float(per_sample.mean()), f1_score(run.logits, target),
                    [float(s.sum(axis=1).mean()) for s in run.selected],
                    [float(e.sum(axis=1).mean()) for e in run.executed],
                    [float(np.mean(t) / spec.n_tokens) for t in run.tokens],
                    float(cost.mean()),
                    bool(np.all(selected_total <= b)),
                    bool(subset_ok),
                    _finite_mean(run.margins),
                ))
                if trace_sink is not None:
                    for tr in traces_from_arrays(run.selected, run.executed, run.tokens, b, run.components, cm,
                                                 losses={"detection": per_sample},
                                                 meta={"corruption": kind, "variant": variant}):
                        trace_sink(tr)
    report = EvalReport(cells, config=cfg.to_dict())
    report.studies["estimator_comparison"] = estimator_comparison(report)
    return report


def _finite_mean(x):
    if x is None or not np.any(np.isfinite(x)):
        return None
    return float(np.mean(x[np.isfinite(x)]))


def estimator_comparison(report: EvalReport):
    """NeuralSort controller vs straight-through baseline: logit margins and b=4 losses."""
    base = [c for c in report.cells if c.variant == "ADMN-baseline"]
    if not base:
        return {}
    swan = [c for c in report.cells if c.variant == "SWAN-C"]
    b_min = min(c.budget for c in swan)
    losses = {
        kind: {
            "SWAN-C": report.cell(kind, b_min, "SWAN-C").detection_loss,
            "ADMN-baseline": report.cell(kind, b_min, "ADMN-baseline").detection_loss,
        }
        for kind in ASYMMETRIC
    }
    # budgets where either estimator has no margin (e.g. b = L) are left out of both means
    paired = [(c.margin, report.cell(c.corruption, c.budget, "ADMN-baseline").margin) for c in swan]
    paired = [(a, b) for a, b in paired if a is not None and b is not None]
    return {
        "margin_swan": float(np.mean([a for a, _ in paired])) if paired else None,
        "margin_baseline": float(np.mean([b for _, b in paired])) if paired else None,
        "budget": b_min,
        "loss_at_min_budget": losses,
        "swan_wins": int(sum(v["SWAN-C"] <= v["ADMN-baseline"] for v in losses.values())),
    }


def layerdrop_study(cfg: RunConfig, n_samples=200):
    """Mean clean-data loss over random half-budget masks: LayerDrop model vs rate-0 twin."""
    _require(cfg, "stage2", "stage2_nodrop")
    spec = cfg.spec
    batch = eval_data(cfg, "clean", n_samples)
    target = batch.occupancy.reshape(len(batch), -1)
    rng = SeededRng(cfg.seed).child("study", "layerdrop")
    masks = []
    for _ in range(cfg.study_masks):
        m = np.zeros(spec.L, dtype=np.int64)
        m[rng.choice(spec.L, size=spec.L // 2, replace=False)] = 1
        masks.append(m)
    out = {}
    for name in ("stage2", "stage2_nodrop"):
        net = load_net(cfg, name)
        vals = []
        with ad.no_grad():
            for m in masks:
                res = net.forward(batch.patches, spec.split(np.broadcast_to(m, (len(batch), spec.L))))
                vals.append(float(bce_np(res.logits.data, target).mean()))
        out[name] = float(np.mean(vals))
    return {"layerdrop_loss": out["stage2"], "no_layerdrop_loss": out["stage2_nodrop"], "n_masks": len(masks)}


def alpha3_zero_study(cfg: RunConfig, nets):
    """Token retention and F1 of the pruner trained without utilization pressure."""
    _require(cfg, "stage5_alpha0")
    nets = dict(nets)
    nets["stage5"] = load_net(cfg, "stage5_alpha0")
    ret, f1s = [], []
    for kind in KINDS:
        batch = eval_data(cfg, kind)
        target = batch.occupancy.reshape(len(batch), -1)
        for b in cfg.budgets:
            run = run_variant("SWAN-PSC", nets, cfg, batch, b)
            ret.append(np.mean([np.mean(t) / cfg.spec.n_tokens for t in run.tokens]))
            f1s.append(f1_score(run.logits, target))
    return {"retention": float(np.mean(ret)), "f1": float(np.mean(f1s))}


def run_studies(cfg: RunConfig, report: EvalReport, nets=None):
    nets = nets or load_eval_nets(cfg)
    if cfg.layerdrop_study:
        report.studies["layerdrop"] = layerdrop_study(cfg)
    if cfg.alpha3_zero_study:
        report.studies["alpha3_zero"] = alpha3_zero_study(cfg, nets)
    return report


# ---------------------------------------------------------------- reports


def write_metrics_csv(report: EvalReport, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for c in report.cells:
            w.writerow([repr(x) if isinstance(x, float) else x for x in c.row()])
    return path


def utilization_rows(report: EvalReport, variants=("SWAN-C", "SWAN-SC")):
    rows = []
    for c in report.cells:
        if c.variant in variants:
            rows.append([c.corruption, c.budget, c.variant, *c.selected, *c.executed])
    return rows


def write_report(report: EvalReport, out_dir):
    """metrics.csv, report.json and utilization.csv under ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(report, out / "metrics.csv")
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1))
        with (out / "utilization.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            n_mod = len(report.cells[0].selected) if report.cells else 0
            w.writerow(["corruption", "budget", "variant"]
                       + [f"selected_{m}" for m in range(n_mod)] + [f"executed_{m}" for m in range(n_mod)])
            w.writerows([[repr(x) if isinstance(x, float) else x for x in r] for r in utilization_rows(report)])
    except OSError as exc:
        raise OSError(f"could not write report under {out}: {exc}") from exc
    return out


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def run_pipeline(cfg: RunConfig, train=True):
    """Train every stage, evaluate the grid, run the studies and write all report files."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    if train:
        train_all(cfg)
    nets = load_eval_nets(cfg)
    fh = (out / "traces.jsonl").open("w") if cfg.write_traces else None
    try:
        sink = (lambda tr: fh.write(tr.to_json() + "\n")) if fh else None
        report = evaluate(cfg, nets, trace_sink=sink)
    finally:
        if fh:
            fh.close()
    run_studies(cfg, report, nets)
    write_report(report, out)
    return report


def read_traces(path):
    with Path(path).open() as fh:
        return [ExecutionTrace.from_json(line) for line in fh if line.strip()]

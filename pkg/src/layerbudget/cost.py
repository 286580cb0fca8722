"""Analytic cost accounting and budget checks for execution traces.

Costs are abstract units. Modality 0 (range-sensor-like) layers cost 1 and
modality 1 (camera-like) layers 2.4 by default.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class CostModel:
    layer_costs: tuple = (1.0, 2.4)
    token_cost: float = 0.01
    controller_overhead: float = 0.5
    skipgate_overhead: float = 0.2
    pruner_overhead: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "layer_costs", tuple(float(c) for c in self.layer_costs))
        vals = self.layer_costs + (self.token_cost, self.controller_overhead, self.skipgate_overhead, self.pruner_overhead)
        if min(vals) <= 0:
            raise ValueError("all costs must be positive")

    def overheads(self, components):
        table = {
            "controller": self.controller_overhead,
            "skipgate": self.skipgate_overhead,
            "pruner": self.pruner_overhead,
        }
        return sum(table[c] for c in components)


@dataclass
class ExecutionTrace:
    """What one forward pass did.

    ``layers[m]`` lists ``(index, selected, executed)`` per layer of modality m;
    ``tokens[m]`` is the number of modality-m tokens that reached the head.
    """

    layers: list
    tokens: list
    components: tuple = ()
    budget: int | None = None
    cost: float | None = None
    losses: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def selected_counts(self):
        return [sum(1 for _, s, _ in mod if s) for mod in self.layers]

    def executed_counts(self):
        return [sum(1 for _, _, e in mod if e) for mod in self.layers]

    def consistent(self):
        """Executed layers are a subset of selected ones."""
        return all(s or not e for mod in self.layers for _, s, e in mod)

    def to_json(self):
        d = asdict(self)
        d["layers"] = [[list(x) for x in mod] for mod in self.layers]
        d["components"] = list(self.components)
        return json.dumps(d)

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        d["layers"] = [[tuple(x) for x in mod] for mod in d["layers"]]
        d["components"] = tuple(d["components"])
        return cls(**d)


def cost_of_trace(trace: ExecutionTrace, cm: CostModel) -> float:
    layer_part = sum(cm.layer_costs[m] * n for m, n in enumerate(trace.executed_counts()))
    return layer_part + cm.token_cost * sum(trace.tokens) + cm.overheads(trace.components)


def assert_budget(trace: ExecutionTrace, b=None) -> bool:
    """True iff the controller selected at most ``b`` layers (b defaults to trace.budget)."""
    b = trace.budget if b is None else b
    return sum(trace.selected_counts()) <= b


def traces_from_arrays(selected, executed, tokens, budget, components=(), cm: CostModel | None = None,
                       losses=None, meta=None):
    """Per-sample traces from batched arrays.

    selected/executed: per modality [B, L_m] bool; tokens: per modality [B] counts.
    """
    B = selected[0].shape[0]
    budget = np.broadcast_to(np.asarray(budget), (B,))
    out = []
    for i in range(B):
        layers = [
            [(l, bool(sel[i, l]), bool(exe[i, l])) for l in range(sel.shape[1])]
            for sel, exe in zip(selected, executed)
        ]
        tr = ExecutionTrace(
            layers,
            [int(t[i]) for t in tokens],
            tuple(components),
            int(budget[i]),
            losses={k: float(v[i]) for k, v in (losses or {}).items()},
            meta=dict(meta or {}),
        )
        if cm is not None:
            tr.cost = cost_of_trace(tr, cm)
        out.append(tr)
    return out


def batch_cost(executed, tokens, components, cm: CostModel):
    """Vectorised :func:`cost_of_trace` over a batch: returns [B]."""
    total = sum(cm.layer_costs[m] * np.asarray(e).sum(axis=1) for m, e in enumerate(executed))
    return total + cm.token_cost * sum(np.asarray(t) for t in tokens) + cm.overheads(components)


def cost_topk_mask(logits, layer_costs, budget_cost):
    """Activate layers in descending-logit order until the next one would exceed ``budget_cost``.

    Budget mode for non-uniform layer costs; ``layer_costs`` is one value per layer.
    """
    v = np.asarray(logits, dtype=np.float64)
    c = np.asarray(layer_costs, dtype=np.float64)
    bits = np.zeros(v.shape, dtype=np.int64)
    spent = 0.0
    for j in np.argsort(-v, kind="stable"):
        if spent + c[j] > budget_cost + 1e-12:
            break
        bits[j] = 1
        spent += c[j]
    return bits


def cost_budget_gate(P, layer_costs, budget_cost):
    """Soft counterpart of :func:`cost_topk_mask`: add relaxed-permutation rows
    while the expected cost of the rows taken so far stays within budget.

    ``P`` is a :class:`~layerbudget.relax.RelaxedPermutation` over one logit vector.
    """
    mat = P.matrix
    c = np.asarray(layer_costs, dtype=np.float64)
    row_cost = mat.data @ c
    n_rows = int(np.searchsorted(np.cumsum(row_cost), budget_cost + 1e-12, side="right"))
    sel = np.zeros((1, mat.shape[-1]))
    sel[0, :n_rows] = 1.0
    return ad.reshape(ad.matmul(ad.const(sel), mat), (mat.shape[-1],)), n_rows

"""Budget-constrained layer allocation for two-modality networks.

The package is pure numpy/scipy: a small reverse-mode autodiff engine
(:mod:`~layerbudget.autodiff`), differentiable top-k relaxations
(:mod:`~layerbudget.relax`), a synthetic two-sensor detection task
(:mod:`~layerbudget.data`), the gated network with SkipGates and a token
pruner (:mod:`~layerbudget.net`), the quality-aware controller
(:mod:`~layerbudget.controller`), cost accounting (:mod:`~layerbudget.cost`)
and the staged training/evaluation driver (:mod:`~layerbudget.pipeline`).
"""

from .autodiff import DiffValue, ParamStore, SeededRng, backward, grad_check
from .controller import Controller, naive_mask
from .cost import CostModel, ExecutionTrace, assert_budget, cost_of_trace
from .data import KINDS, SceneBatch, corrupt, gen_dataset, gen_scene
from .net import AdaptiveNet, BackboneSpec
from .pipeline import EvalReport, RunConfig, run_pipeline
from .relax import budget_gate, neuralsort, st_topk, topk_mask

__version__ = "0.1.0"

__all__ = [
    "AdaptiveNet", "BackboneSpec", "Controller", "CostModel", "DiffValue", "EvalReport", "ExecutionTrace",
    "KINDS", "ParamStore", "RunConfig", "SceneBatch", "SeededRng", "assert_budget", "backward", "budget_gate",
    "corrupt", "cost_of_trace", "gen_dataset", "gen_scene", "grad_check", "naive_mask", "neuralsort",
    "run_pipeline", "st_topk", "topk_mask",
]

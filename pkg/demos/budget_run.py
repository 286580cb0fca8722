"""Train a deliberately tiny configuration end to end and print the report.

It finishes in seconds. The numbers are not meaningful
at this size; the point is to see the stages, the evaluation grid and the
budget audit working together. For a real run use ``layerbudget run``.
"""

import sys
import tempfile

from layerbudget import RunConfig, run_pipeline

out_dir = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="layerbudget-demo-")
cfg = RunConfig(
    out_dir=out_dir,
    layers=(3, 4),
    width=8,
    hidden=8,
    grid=(6, 6),
    budgets=(2, 4),
    n_train=128,
    n_eval=64,
    epochs=(2, 2, 2, 2, 1, 1),
    study_masks=10,
)
report = run_pipeline(cfg)

print(f"run directory: {out_dir}")
print(f"{'corruption':<11} {'b':>2} {'variant':<14} {'loss':>7} {'selected':>11} {'budget ok':>9}")
for c in report.cells:
    sel = "/".join(f"{x:.1f}" for x in c.selected)
    print(f"{c.corruption:<11} {c.budget:>2} {c.variant:<14} {c.detection_loss:7.4f} {sel:>11} {str(c.budget_ok):>9}")
print("layerdrop study:", report.studies["layerdrop"])

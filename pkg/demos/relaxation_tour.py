"""Walk through the relaxed top-b selection on a handful of layer logits.

Run with ``python demos/relaxation_tour.py``. Nothing is trained; the
script only prints how the soft gate sharpens as the temperature drops and
how gradients reach the logits through the relaxation.
"""

import numpy as np

from layerbudget import SeededRng, budget_gate, neuralsort, st_topk, topk_mask
from layerbudget.autodiff import DiffValue, backward
from layerbudget import autodiff as ad

np.set_printoptions(precision=3, suppress=True)

logits = np.array([0.3, 1.7, -0.4, 1.1, 0.9])
budget = 2
print("layer logits:", logits)
print("hard top-2 mask:", topk_mask(logits, budget).bits.astype(int))

for tau in (2.0, 0.5, 0.1, 0.01):
    P = neuralsort(logits, tau)
    gates = budget_gate(P, budget).gates.data
    print(f"tau={tau:<5} gates={gates}  sum={gates.sum():.3f}")

# The soft gates sum to the budget at every temperature. A downstream loss
# sends gradient to logits near the selection boundary, including layers
# that the hard mask leaves out (index 4 here).
pi = DiffValue(logits)
usefulness = ad.const(np.array([0.1, 0.2, 0.9, 0.3, 0.4]))
loss = ad.sum_axis(ad.mul(budget_gate(neuralsort(pi, 0.5), budget).gates, usefulness))
backward(loss)
print("gradient of weighted gate sum w.r.t. logits:", pi.grad)

# The straight-through estimator is hard in the forward pass.
st = st_topk(DiffValue(logits), budget, rng=SeededRng(0), noise=False)
print("straight-through forward:", st.gates.data)

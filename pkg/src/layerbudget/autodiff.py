"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every tensor in the package is a :class:`DiffValue`. Operations record their
parents and a closure that pushes the upstream gradient back to them;
:func:`backward` walks the graph in reverse topological order.

Broadcasting is supported only where the models need it (elementwise ops and
batched ``matmul``); gradients are summed back to the operand shapes.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "layerbudget.paramstore"
CHECKPOINT_VERSION = 1

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


@contextlib.contextmanager
def no_grad():
    """Build values without recording the graph (inference only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class DiffValue:
    """Array node of the computation graph.

    ``grad`` always has the same shape as ``data``. Values created directly by
    the user require gradients unless ``requires_grad=False``; op results
    require gradients iff any parent does and grad recording is on.
    """

    __slots__ = ("data", "_grad", "op", "parents", "requires_grad", "_backward")
    __array_priority__ = 100

    def __init__(self, data, parents=(), op="leaf", requires_grad=True, copy=True):
        self.data = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
        self._grad = None
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = bool(requires_grad)
        self._backward = None

    @property
    def grad(self):
        # allocated on first use; most intermediate nodes never need a buffer of their own
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    def _accum(self, g):
        if self._grad is None:
            self._grad = np.array(g, dtype=np.float64).reshape(self.data.shape)
        else:
            self._grad += g

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self._grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"DiffValue(shape={self.shape}, op={self.op!r})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def const(data):
    """A value that never receives gradient (inputs, noise, masks)."""
    return DiffValue(data, requires_grad=False)


def as_value(x):
    return x if isinstance(x, DiffValue) else const(x)


def _result(data, parents, op, backward_fn):
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = DiffValue(data, parents if needs else (), op, requires_grad=needs, copy=False)
    if needs:
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_value(a), as_value(b)
    _broadcast_shape("add", a, b)
    out = None

    def _bw():
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(out.grad, b.shape))

    out = _result(a.data + b.data, (a, b), "add", _bw)
    return out


def sub(a, b):
    a, b = as_value(a), as_value(b)
    _broadcast_shape("sub", a, b)
    out = None

    def _bw():
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accum(-(_unbroadcast(out.grad, b.shape)))

    out = _result(a.data - b.data, (a, b), "sub", _bw)
    return out


def mul(a, b):
    a, b = as_value(a), as_value(b)
    _broadcast_shape("mul", a, b)
    out = None

    def _bw():
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(out.grad * a.data, b.shape))

    out = _result(a.data * b.data, (a, b), "mul", _bw)
    return out


def scale(a, c: float):
    a = as_value(a)
    c = float(c)
    out = None

    def _bw():
        a._accum(c * out.grad)

    out = _result(a.data * c, (a,), "scale", _bw)
    return out


def relu(a):
    a = as_value(a)
    mask = a.data > 0
    out = None

    def _bw():
        a._accum(out.grad * mask)

    out = _result(np.where(mask, a.data, 0.0), (a,), "relu", _bw)
    return out


def _sigmoid_np(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a):
    a = as_value(a)
    s = _sigmoid_np(a.data)
    out = None

    def _bw():
        a._accum(out.grad * s * (1.0 - s))

    out = _result(s, (a,), "sigmoid", _bw)
    return out


def tanh(a):
    a = as_value(a)
    t = np.tanh(a.data)
    out = None

    def _bw():
        a._accum(out.grad * (1.0 - t * t))

    out = _result(t, (a,), "tanh", _bw)
    return out


def exp(a):
    a = as_value(a)
    e = np.exp(a.data)
    out = None

    def _bw():
        a._accum(out.grad * e)

    out = _result(e, (a,), "exp", _bw)
    return out


def log(a):
    a = as_value(a)
    out = None

    def _bw():
        a._accum(out.grad / a.data)

    out = _result(np.log(a.data), (a,), "log", _bw)
    return out


def straight_through(a, forward_fn):
    """Apply ``forward_fn`` in the forward pass, identity Jacobian backward."""
    a = as_value(a)
    out = None

    def _bw():
        a._accum(out.grad)

    out = _result(forward_fn(a.data), (a,), "straight_through", _bw)
    return out


# ---------------------------------------------------------------- structural


def matmul(a, b):
    """Matrix product over the last two axes, batch axes broadcast."""
    a, b = as_value(a), as_value(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError("matmul", a.shape, b.shape, detail="scalars not allowed")
    a2 = a.data if a.ndim > 1 else a.data[None, :]
    b2 = b.data if b.ndim > 1 else b.data[:, None]
    if a2.shape[-1] != b2.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner dimensions differ")
    try:
        res = np.matmul(a2, b2)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dimensions") from None
    out_shape = res.shape
    if a.ndim == 1:
        out_shape = out_shape[:-2] + out_shape[-1:]
    if b.ndim == 1:
        out_shape = out_shape[:-1]
    out = None

    def _bw():
        g = out.grad.reshape(res.shape)
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b2, -1, -2))
            a._accum(_unbroadcast(ga, a2.shape).reshape(a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a2, -1, -2), g)
            b._accum(_unbroadcast(gb, b2.shape).reshape(b.shape))

    out = _result(res.reshape(out_shape), (a, b), "matmul", _bw)
    return out


def reshape(a, shape):
    a = as_value(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    out = None

    def _bw():
        a._accum(out.grad.reshape(a.shape))

    out = _result(data, (a,), "reshape", _bw)
    return out


def take(a, index):
    """Basic or advanced indexing; gradient scatters back with ``np.add.at``."""
    a = as_value(a)
    out = None

    def _bw():
        np.add.at(a.grad, index, out.grad)

    out = _result(a.data[index], (a,), "take", _bw)
    return out


def concat(values, axis=-1):
    values = [as_value(v) for v in values]
    ref = values[0].shape
    ax = axis % len(ref)
    for v in values[1:]:
        if v.ndim != len(ref) or any(
            v.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError("concat", ref, v.shape, detail=f"axis={axis}")
    sizes = [v.shape[ax] for v in values]
    bounds = np.cumsum([0] + sizes)
    out = None

    def _bw():
        for v, lo, hi in zip(values, bounds[:-1], bounds[1:]):
            if v.requires_grad:
                sl = [slice(None)] * out.grad.ndim
                sl[ax] = slice(lo, hi)
                v._accum(out.grad[tuple(sl)])

    out = _result(np.concatenate([v.data for v in values], axis=ax), values, "concat", _bw)
    return out


def sum_axis(a, axis=None, keepdims=False):
    a = as_value(a)
    out = None

    def _bw():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))

    out = _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum_axis", _bw)
    return out


def mean_axis(a, axis=None, keepdims=False):
    a = as_value(a)
    count = a.size if axis is None else a.shape[axis]
    return scale(sum_axis(a, axis, keepdims), 1.0 / count)


def softmax_rows(a):
    """Softmax over the last axis (each row of a matrix, or of a batch of them)."""
    a = as_value(a)
    if a.ndim < 2:
        raise ShapeError("softmax_rows", a.shape, detail="needs at least 2 axes")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = None

    def _bw():
        g = out.grad
        a._accum(s * (g - (g * s).sum(axis=-1, keepdims=True)))

    out = _result(s, (a,), "softmax_rows", _bw)
    return out


def abs_pairwise_diff(v):
    """``|v_i - v_j|`` for every pair along the last axis: [..., n] -> [..., n, n]."""
    v = as_value(v)
    if v.ndim < 1:
        raise ShapeError("abs_pairwise_diff", v.shape, detail="needs a vector")
    diff = v.data[..., :, None] - v.data[..., None, :]
    sign = np.sign(diff)
    out = None

    def _bw():
        gs = out.grad * sign
        v._accum(gs.sum(axis=-1) - gs.sum(axis=-2))

    out = _result(np.abs(diff), (v,), "abs_pairwise_diff", _bw)
    return out


# ---------------------------------------------------------------- losses


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy; ``targets`` is a constant array in [0, 1]."""
    logits = as_value(logits)
    t = np.asarray(targets.data if isinstance(targets, DiffValue) else targets, dtype=np.float64)
    if logits.shape != t.shape:
        raise ShapeError("bce_with_logits", logits.shape, t.shape)
    x = logits.data
    loss = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    out = None

    def _bw():
        logits._accum(out.grad * (_sigmoid_np(x) - t) / n)

    out = _result(loss.mean(), (logits,), "bce_with_logits", _bw)
    return out


def ce_with_logits(logits, labels):
    """Mean cross-entropy of [B, C] logits against integer labels [B]."""
    logits = as_value(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("ce_with_logits", logits.shape, labels.shape)
    n_cls = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError(f"ce_with_logits: labels must lie in [0, {n_cls})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(labels.size)
    out = None

    def _bw():
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        logits._accum(out.grad * p / labels.size)

    out = _result(-logp[rows, labels].mean(), (logits,), "ce_with_logits", _bw)
    return out


# ---------------------------------------------------------------- backward


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: DiffValue):
    """Accumulate d(loss)/d(value) into ``grad`` of every reachable value."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    loss.grad += 1.0
    for node in reversed(_topo_order(loss)):
        if node._backward is not None:
            node._backward()


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)


_STENCILS = {
    2: ((1.0, 1.0),),
    4: ((1.0, 8.0 / 12.0), (2.0, -1.0 / 12.0)),
}


def numeric_grad(f, x: DiffValue, step=1e-5, points=2):
    """Central finite differences of the scalar ``f(x)`` w.r.t. every entry of x.

    ``points=4`` uses the fourth-order stencil, which tolerates a larger step
    and so loses far less to rounding when gradients are small.
    """
    if points not in _STENCILS:
        raise ValueError(f"points must be one of {sorted(_STENCILS)}")
    weights = _STENCILS[points]
    flat = x.data.reshape(-1)
    num = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        acc = 0.0
        for k, w in weights:
            flat[i] = orig + k * step
            with no_grad():
                hi = _scalar(f(x))
            flat[i] = orig - k * step
            with no_grad():
                lo = _scalar(f(x))
            acc += w * (hi - lo)
        flat[i] = orig
        num[i] = acc / (2.0 * step) if points == 2 else acc / step
    return num.reshape(x.shape)


def _scalar(v):
    v = as_value(v)
    if v.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued f, got shape {v.shape}")
    return float(v.data.reshape(-1)[0])


def relative_error(analytic, numeric, floor=1e-6):
    a, n = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def grad_check(f, x: DiffValue, step=1e-5, tol=1e-5, floor=1e-6, points=2) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``f`` at ``x`` with central differences.

    ``f`` must be deterministic (seed any noise inside it). ``x.data`` is
    perturbed in place and restored.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x.requires_grad = True
    x.zero_grad()
    out = as_value(f(x))
    _scalar(out)
    backward(out)
    analytic = x.grad.copy()
    numeric = numeric_grad(f, x, step, points)
    err = relative_error(analytic, numeric, floor)
    return GradCheckReport(err, err < tol, analytic, numeric)


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Named trainable/frozen parameters plus optimizer moments."""

    def __init__(self):
        self._values: dict[str, DiffValue] = {}
        self._moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self._adam_t = 0

    def add(self, name, data, trainable=True) -> DiffValue:
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        v = DiffValue(data, op="param", requires_grad=trainable)
        self._values[name] = v
        return v

    def __getitem__(self, name) -> DiffValue:
        return self._values[name]

    def __contains__(self, name):
        return name in self._values

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def items(self):
        return self._values.items()

    def names(self, prefix=""):
        return [n for n in self._values if n.startswith(prefix)]

    def is_trainable(self, name):
        return self._values[name].requires_grad

    def set_trainable(self, prefixes, trainable=True):
        """Flag every parameter whose name starts with one of ``prefixes``."""
        if isinstance(prefixes, str):
            prefixes = (prefixes,)
        for name, v in self._values.items():
            if name.startswith(tuple(prefixes)):
                v.requires_grad = trainable

    def freeze_all(self):
        for v in self._values.values():
            v.requires_grad = False

    def trainable_names(self):
        return [n for n, v in self._values.items() if v.requires_grad]

    def zero_grad(self):
        for v in self._values.values():
            v.zero_grad()

    def reset_optimizer(self):
        self._moments.clear()
        self._adam_t = 0

    def frozen_grad_leaks(self):
        """Names of frozen parameters carrying a nonzero gradient."""
        return [n for n, v in self._values.items() if not v.requires_grad and np.any(v.grad)]

    def load_from(self, other: "ParamStore", prefixes=None):
        """Copy values of matching names from ``other`` (later loads override)."""
        copied = []
        for name, v in other.items():
            if name in self._values and (prefixes is None or name.startswith(tuple(prefixes))):
                if self._values[name].shape != v.shape:
                    raise ShapeError("load_from", self._values[name].shape, v.shape, detail=name)
                self._values[name].data = v.data.copy()
                copied.append(name)
        return copied

    def snapshot(self):
        return {n: v.data.copy() for n, v in self._values.items()}

    def save(self, path):
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "params": {
                n: {
                    "shape": list(v.shape),
                    "trainable": v.requires_grad,
                    "data": v.data.reshape(-1).tolist(),
                }
                for n, v in self._values.items()
            },
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc))
        return path

    @classmethod
    def load(cls, path) -> "ParamStore":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a parameter checkpoint")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
        store = cls()
        for name, entry in doc["params"].items():
            data = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
            store.add(name, data, trainable=entry.get("trainable", True))
        return store


def sgd_step(params: ParamStore, lr: float):
    for _, v in params.items():
        if v.requires_grad:
            v.data -= lr * v.grad


def adam_step(params: ParamStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update of every trainable entry; moments live on the store."""
    params._adam_t += 1
    t = params._adam_t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, v in params.items():
        if not v.requires_grad:
            continue
        m, s = params._moments.get(name, (np.zeros_like(v.data), np.zeros_like(v.data)))
        m = beta1 * m + (1.0 - beta1) * v.grad
        s = beta2 * s + (1.0 - beta2) * v.grad * v.grad
        params._moments[name] = (m, s)
        v.data -= lr * (m / c1) / (np.sqrt(s / c2) + eps)


def zero_grad(params: ParamStore):
    params.zero_grad()


# ---------------------------------------------------------------- rng


class SeededRng:
    """Counter-based (Philox-4x64) random stream with named child streams.

    Two instances built from the same seed produce identical draws. ``child``
    derives an independent stream keyed by integers or strings, so each
    consumer (init, data, noise) can be pinned separately.
    """

    def __init__(self, seed: int, key=()):
        self.seed = int(seed)
        self.key = tuple(key)
        words = [self.seed] + [_key_word(k) for k in self.key]
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))

    def child(self, *key) -> "SeededRng":
        return SeededRng(self.seed, self.key + tuple(key))

    def uniform(self, size=None, low=0.0, high=1.0):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None, scale=1.0):
        return self._gen.normal(0.0, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def permutation(self, n):
        return self._gen.permutation(n)

    def random(self, size=None):
        return self._gen.random(size)


def _key_word(k):
    if isinstance(k, str):
        # stable across processes, unlike hash()
        return int.from_bytes(hashlib.blake2b(k.encode(), digest_size=8).digest(), "little")
    return int(k)


def init_weight(rng: SeededRng, fan_in, fan_out, gain=1.0):
    return rng.normal((fan_in, fan_out), scale=gain / math.sqrt(fan_in))

"""Layer-adaptive two-modality backbone with gated residual execution.

Each modality embeds 3x3 input patches per token, then runs ``L_m`` residual
blocks. Block ``l`` is blended with its input by a gate ``g`` in [0, 1]::

    h_l = g * f_l(h_{l-1}) + (1 - g) * h_{l-1}

so ``g = 0`` skips the block exactly and ``g = 1`` runs it. A per-modality
SkipGate can further veto blocks inside the controller's allocation, and a
token scorer can drop backbone output tokens before the shared head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue, ParamStore, SeededRng, init_weight
from .relax import HardMask, gumbel_sigmoid, st_round


@dataclass(frozen=True)
class BackboneSpec:
    layers: tuple = (8, 12)
    width: int = 32
    hidden: int = 32
    grid: tuple = (8, 8)
    patch: int = 3
    layerdrop_rate: float = 0.2
    embed_dim: int = 16
    dz: int = 32
    skip_hidden: int = 32
    prune_hidden: int = 16
    project_mean: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(x) for x in self.layers))
        object.__setattr__(self, "grid", tuple(int(x) for x in self.grid))
        if not self.layers or min(self.layers) < 1:
            raise ValueError("every modality needs at least one layer")

    @property
    def M(self):
        return len(self.layers)

    @property
    def L(self):
        return sum(self.layers)

    @property
    def L_max(self):
        return max(self.layers)

    @property
    def n_tokens(self):
        return self.grid[0] * self.grid[1]

    @property
    def offsets(self):
        return tuple(int(x) for x in np.cumsum((0,) + self.layers)[:-1])

    def split(self, arr):
        """Split the last axis of a length-L array into per-modality slices."""
        return [arr[..., o : o + n] for o, n in zip(self.offsets, self.layers)]


def sinusoidal_table(n_positions, dim, base=10000.0):
    """Interleaved sin/cos embeddings with geometric frequencies: [n, dim]."""
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    freq = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.zeros((n_positions, dim))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table


def head_scatter(grid):
    """Constant [N*9, N] matrix mapping (token, 3x3 offset) pairs to output cells."""
    h, w = grid
    n = h * w
    S = np.zeros((n * 9, n))
    for t in range(n):
        r, c = divmod(t, w)
        for k in range(9):
            dr, dc = divmod(k, 3)
            rr, cc = r + dr - 1, c + dc - 1
            if 0 <= rr < h and 0 <= cc < w:
                S[t * 9 + k, rr * w + cc] = 1.0
    return S


# ---------------------------------------------------------------- parameters


def init_backbone(params: ParamStore, spec: BackboneSpec, m: int, rng: SeededRng):
    D, Hd, P = spec.width, spec.hidden, spec.patch**2
    r = rng.child("backbone", m)
    params.add(f"bb.{m}.embed.w", init_weight(r.child("embed"), P, D))
    params.add(f"bb.{m}.embed.b", np.zeros(D))
    for l in range(spec.layers[m]):
        rl = r.child("layer", l)
        params.add(f"bb.{m}.{l}.w1", init_weight(rl.child(1), D, Hd))
        params.add(f"bb.{m}.{l}.wc", init_weight(rl.child(2), D, Hd, gain=0.5))
        params.add(f"bb.{m}.{l}.b1", np.zeros(Hd))
        params.add(f"bb.{m}.{l}.w2", init_weight(rl.child(3), Hd, D, gain=0.5))
        params.add(f"bb.{m}.{l}.b2", np.zeros(D))


def init_head(params: ParamStore, spec: BackboneSpec, rng: SeededRng):
    params.add("head.w", init_weight(rng.child("head"), spec.width, 9, gain=0.3))
    params.add("head.b", np.array([-2.0]))


def init_skipgate(params: ParamStore, spec: BackboneSpec, m: int, rng: SeededRng):
    r = rng.child("skipgate", m)
    E, D, Hs = spec.embed_dim, spec.width, spec.skip_hidden
    if spec.project_mean:
        params.add(f"skip.{m}.wh", init_weight(r.child("wh"), D, D))
    params.add(f"skip.{m}.wz", init_weight(r.child("wz"), spec.dz, E))
    params.add(f"skip.{m}.bz", np.zeros(E))
    params.add(f"skip.{m}.w1", init_weight(r.child("w1"), D + 4 * E, Hs))
    params.add(f"skip.{m}.b1", np.zeros(Hs))
    params.add(f"skip.{m}.w2", init_weight(r.child("w2"), Hs, 1, gain=0.1))
    # start by executing every allocated layer
    params.add(f"skip.{m}.b2", np.array([3.0]))


def init_pruner(params: ParamStore, spec: BackboneSpec, m: int, rng: SeededRng):
    r = rng.child("pruner", m)
    params.add(f"prune.{m}.w1", init_weight(r.child("w1"), spec.width, spec.prune_hidden))
    params.add(f"prune.{m}.b1", np.zeros(spec.prune_hidden))
    params.add(f"prune.{m}.w2", init_weight(r.child("w2"), spec.prune_hidden, 1, gain=0.1))
    # start by keeping every token
    params.add(f"prune.{m}.b2", np.array([3.0]))


# ---------------------------------------------------------------- records


@dataclass
class ModalityRecord:
    """Per-layer decisions for one modality over a batch."""

    selected: np.ndarray  # [B, L_m] bool, controller allocation
    executed: np.ndarray  # [B, L_m] bool, layers that actually ran
    skip_logits: list = field(default_factory=list)  # DiffValue [B] per selected layer slot
    skip_layers: list = field(default_factory=list)  # layer index per skip_logits entry


@dataclass
class ForwardResult:
    logits: DiffValue  # [B, N]
    features: list  # per modality [B, N, D]
    records: list
    keep: list | None = None  # per modality [B, N] {0,1}
    scores: list | None = None  # per modality [B, N] in (0, 1)


@dataclass
class PrunedTokens:
    tokens: DiffValue  # [n_kept, D]
    positions: np.ndarray  # [n_kept] flat grid indices
    fallback: bool = False


@dataclass
class SkipContext:
    z: np.ndarray  # [B, dz]
    tau: float = 1.0
    rng: SeededRng | None = None
    noise: bool = True
    hard: bool = False


# ---------------------------------------------------------------- network


class AdaptiveNet:
    """Backbones, SkipGates, token scorers and head sharing one ParamStore."""

    def __init__(self, spec: BackboneSpec, params: ParamStore):
        self.spec = spec
        self.params = params
        self.table = sinusoidal_table(spec.L_max + 1, spec.embed_dim)
        self._scatter = head_scatter(spec.grid)

    @classmethod
    def create(cls, spec: BackboneSpec, rng: SeededRng, modalities=None, params=None, skipgate=True, pruner=True):
        params = params if params is not None else ParamStore()
        mods = range(spec.M) if modalities is None else modalities
        for m in mods:
            init_backbone(params, spec, m, rng)
        init_head(params, spec, rng)
        if skipgate:
            for m in mods:
                init_skipgate(params, spec, m, rng)
        if pruner:
            for m in mods:
                init_pruner(params, spec, m, rng)
        return cls(spec, params)

    def has_skipgate(self, m):
        return f"skip.{m}.w1" in self.params

    def has_pruner(self, m):
        return f"prune.{m}.w1" in self.params

    # -- blocks

    def embed(self, m, patches) -> DiffValue:
        p = self.params
        return ad.add(ad.matmul(ad.as_value(patches), p[f"bb.{m}.embed.w"]), p[f"bb.{m}.embed.b"])

    def layer(self, m, l, h) -> DiffValue:
        """Residual block: per-token MLP plus mean-pooled context, added to ``h``."""
        p = self.params
        pre = ad.add(ad.matmul(h, p[f"bb.{m}.{l}.w1"]), p[f"bb.{m}.{l}.b1"])
        ctx = ad.matmul(ad.mean_axis(h, axis=-2, keepdims=True), p[f"bb.{m}.{l}.wc"])
        upd = ad.add(ad.matmul(ad.relu(ad.add(pre, ctx)), p[f"bb.{m}.{l}.w2"]), p[f"bb.{m}.{l}.b2"])
        return ad.add(h, upd)

    # -- skipgate

    def embedding(self, idx):
        idx = np.asarray(idx)
        if np.any(idx < 0) or np.any(idx >= self.table.shape[0]):
            raise IndexError(f"embedding index {idx.tolist()} outside [0, {self.table.shape[0] - 1}]")
        return self.table[idx]

    def skipgate_logit(self, m, hbar, l, l_r, l_o, z) -> DiffValue:
        """Execution logit d for layer ``l`` (1-based) of modality ``m``: shape [B]."""
        p = self.params
        hbar = ad.as_value(hbar)
        if hbar.ndim == 1:
            hbar = ad.reshape(hbar, (1, -1))
        B = hbar.shape[0]
        l_r = np.broadcast_to(np.asarray(l_r), (B,))
        l_o = np.broadcast_to(np.asarray(l_o), (B,))
        z = np.broadcast_to(np.asarray(z, dtype=np.float64), (B, self.spec.dz))
        e_l = np.broadcast_to(self.embedding(l), (B, self.spec.embed_dim))
        if self.spec.project_mean:
            hbar = ad.matmul(hbar, p[f"skip.{m}.wh"])
        zproj = ad.relu(ad.add(ad.matmul(ad.const(z), p[f"skip.{m}.wz"]), p[f"skip.{m}.bz"]))
        q = ad.concat(
            [hbar, ad.const(e_l), zproj, ad.const(self.embedding(l_r)), ad.const(self.embedding(l_o))],
            axis=1,
        )
        hid = ad.relu(ad.add(ad.matmul(q, p[f"skip.{m}.w1"]), p[f"skip.{m}.b1"]))
        d = ad.add(ad.matmul(hid, p[f"skip.{m}.w2"]), p[f"skip.{m}.b2"])
        return ad.reshape(d, (B,))

    # -- modality encoder

    def encode_modality(self, m, patches, gates, selected=None, other_selected=None, skip: SkipContext | None = None):
        """Run modality ``m`` under per-sample layer gates [B, L_m].

        ``gates`` may be a DiffValue (soft, differentiable), or an array
        (hard or constant). ``selected`` marks controller-chosen layers
        (defaults to ``gates >= 0.5``); ``other_selected`` is the layer count
        allocated to the other modalities, used as SkipGate context.
        """
        Lm = self.spec.layers[m]
        patches = np.asarray(patches, dtype=np.float64)
        if patches.ndim == 2:
            patches = patches[None]
        B = patches.shape[0]
        gates = gates if isinstance(gates, DiffValue) else ad.const(np.broadcast_to(np.asarray(gates, dtype=np.float64), (B, Lm)))
        if gates.shape != (B, Lm):
            raise ad.ShapeError("encode_modality", gates.shape, (B, Lm), detail=f"gates for modality {m}")
        if selected is None:
            selected = gates.data >= 0.5
        selected = np.asarray(selected, dtype=bool)
        if skip is not None:
            if not self.has_skipgate(m):
                raise ValueError(f"modality {m} has no SkipGate parameters")
            if other_selected is None:
                raise ValueError("SkipGate needs the other modality's allocation count")
            other_selected = np.broadcast_to(np.asarray(other_selected), (B,))
        remaining = selected[:, ::-1].cumsum(axis=1)[:, ::-1]  # selected layers with index >= l
        executed = selected.copy()
        record = ModalityRecord(selected, executed)

        h = self.embed(m, patches)
        for l in range(Lm):
            if gates.requires_grad:
                g = ad.reshape(gates[:, l], (B, 1, 1))
            else:
                g = gates.data[:, l].reshape(B, 1, 1)
            if skip is not None and selected[:, l].any():
                hbar = ad.mean_axis(h, axis=1)
                d = self.skipgate_logit(m, hbar, l + 1, remaining[:, l], other_selected, skip.z)
                record.skip_logits.append(d)
                record.skip_layers.append(l)
                if skip.hard:
                    run = d.data > 0.0
                    executed[:, l] &= run
                    g = ad.mul(g, run.reshape(B, 1, 1).astype(float)) if isinstance(g, DiffValue) else g * run.reshape(B, 1, 1)
                else:
                    a = gumbel_sigmoid(d, skip.tau, skip.rng, noise=skip.noise)
                    g = ad.mul(ad.as_value(g), ad.reshape(a, (B, 1, 1)))
            if isinstance(g, DiffValue):
                h = ad.add(ad.mul(g, self.layer(m, l, h)), ad.mul(ad.sub(1.0, g), h))
            elif g.any():
                h = ad.add(ad.mul(ad.const(g), self.layer(m, l, h)), ad.mul(ad.const(1.0 - g), h))
        return h, record

    # -- token pruning

    def token_scores(self, m, h, tau=1.0) -> DiffValue:
        """Keep-probability per token: [..., N] in (0, 1), sharpened by ``tau`` < 1."""
        p = self.params
        hid = ad.relu(ad.add(ad.matmul(h, p[f"prune.{m}.w1"]), p[f"prune.{m}.b1"]))
        s = ad.add(ad.matmul(hid, p[f"prune.{m}.w2"]), p[f"prune.{m}.b2"])
        if tau != 1.0:
            s = ad.scale(s, 1.0 / tau)
        return ad.sigmoid(ad.reshape(s, s.shape[:-1]))

    # -- head

    def head(self, features, keep=None) -> DiffValue:
        """Occupancy logits [B, N] from all modalities' tokens (zeroed tokens add nothing)."""
        p = self.params
        total = None
        for i, h in enumerate(features):
            if keep is not None and keep[i] is not None:
                k = keep[i]
                k = ad.reshape(k, k.shape + (1,)) if isinstance(k, DiffValue) else np.asarray(k)[..., None]
                h = ad.mul(h, k)
            u = ad.matmul(h, p["head.w"])
            total = u if total is None else ad.add(total, u)
        B, N = total.shape[0], total.shape[1]
        flat = ad.reshape(total, (B, N * 9))
        return ad.add(ad.matmul(flat, ad.const(self._scatter)), p["head.b"])

    def head_from_survivors(self, survivors) -> DiffValue:
        """Single-sample head over physically kept tokens: list of PrunedTokens -> [N]."""
        p = self.params
        N = self.spec.n_tokens
        parts, rows = [], []
        for s in survivors:
            u = ad.matmul(s.tokens, p["head.w"])  # [n, 9]
            parts.append(ad.reshape(u, (-1,)))
            rows.append((np.asarray(s.positions)[:, None] * 9 + np.arange(9)[None, :]).reshape(-1))
        flat = ad.concat(parts, axis=0)
        S = self._scatter[np.concatenate(rows)]
        out = ad.matmul(ad.reshape(flat, (1, -1)), ad.const(S))
        return ad.add(ad.reshape(out, (N,)), p["head.b"])

    # -- full pass

    def forward(self, patches, gates, skip: SkipContext | None = None, prune=None):
        """Batched forward over all modalities.

        ``patches`` [B, M, N, 9]; ``gates`` is a list of per-modality gates.
        ``prune``: None (no pruning), "soft" or "hard". Both multiply tokens
        by the rounded keep mask; for the linear-sum head this equals
        removing them (see :meth:`head_from_survivors`).
        """
        feats, records = [], []
        counts = [np.asarray(g.data if isinstance(g, DiffValue) else g) >= 0.5 for g in gates]
        totals = [c.reshape(c.shape[0], -1).sum(axis=1) if c.ndim > 1 else np.full(patches.shape[0], c.sum()) for c in counts]
        for m in range(self.spec.M):
            other = sum(t for i, t in enumerate(totals) if i != m)
            h, rec = self.encode_modality(m, patches[:, m], gates[m], other_selected=other, skip=skip)
            feats.append(h)
            records.append(rec)
        keep = scores = None
        if prune is not None:
            scores = [self.token_scores(m, feats[m]) for m in range(self.spec.M)]
            keep = [st_round(s) for s in scores]
        logits = self.head(feats, keep)
        return ForwardResult(logits, feats, records, keep, scores)


def prune_tokens(h, w_tilde, mode="soft", scores=None):
    """Apply a binary keep grid to one sample's tokens.

    soft: multiply tokens by the mask (zeroed tokens stay in place).
    hard: keep only surviving rows and their flat grid positions. If
    nothing survives, the single highest-scoring token is kept.
    """
    h = ad.as_value(h)
    mask = np.asarray(w_tilde.data if isinstance(w_tilde, DiffValue) else w_tilde, dtype=np.float64).reshape(-1)
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValueError("prune_tokens needs a binary keep mask")
    if mode == "soft":
        w = w_tilde if isinstance(w_tilde, DiffValue) else ad.const(mask)
        return ad.mul(h, ad.reshape(w, (-1, 1)))
    if mode != "hard":
        raise ValueError(f"unknown pruning mode {mode!r}")
    kept = np.flatnonzero(mask)
    fallback = kept.size == 0
    if fallback:
        ref = mask if scores is None else np.asarray(scores.data if isinstance(scores, DiffValue) else scores).reshape(-1)
        kept = np.array([int(np.argmax(ref))])
    return PrunedTokens(ad.take(h, kept), kept, fallback)


def detection_loss(logits, target):
    return ad.bce_with_logits(logits, np.asarray(target, dtype=np.float64).reshape(ad.as_value(logits).shape))


def layerdrop_mask(spec: BackboneSpec, rng: SeededRng, batch=None):
    """Independent keep bits per layer (drop probability = layerdrop_rate)."""
    if not 0.0 <= spec.layerdrop_rate < 1.0:
        raise ValueError("layerdrop_rate must lie in [0, 1)")
    masks = []
    for Lm in spec.layers:
        shape = (Lm,) if batch is None else (batch, Lm)
        masks.append(HardMask((rng.uniform(shape) >= spec.layerdrop_rate).astype(np.int64)))
    return masks


def modality_dropout(grids, rng: SeededRng, rate):
    """Zero one uniformly chosen modality per sample with probability ``rate``.

    ``grids`` [B, M, ...]. Returns (new grids, dropped index per sample or -1).
    """
    grids = np.array(grids, dtype=np.float64, copy=True)
    B, M = grids.shape[:2]
    if M < 2:
        raise ValueError("modality dropout needs at least two modalities")
    hit = rng.uniform(B) < rate
    which = rng.integers(0, M, size=B)
    dropped = np.where(hit, which, -1)
    for i in np.flatnonzero(hit):
        grids[i, which[i]] = 0.0
    return grids, dropped


def sigmoid_np(x):
    return 1.0 / (1.0 + np.exp(-x)) if np.isscalar(x) else ad._sigmoid_np(np.asarray(x, dtype=np.float64))


def f1_score(logits, target, threshold=0.5):
    """Micro F1 of ``sigmoid(logits) > threshold`` against binary targets."""
    pred = sigmoid_np(np.asarray(logits)) > threshold
    t = np.asarray(target) > 0.5
    tp = float(np.sum(pred & t))
    fp = float(np.sum(pred & ~t))
    fn = float(np.sum(~pred & t))
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def bce_np(logits, target):
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    return np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))


def ones_gates(spec: BackboneSpec, batch):
    return [np.ones((batch, Lm)) for Lm in spec.layers]

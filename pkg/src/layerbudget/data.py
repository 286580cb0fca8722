"""Synthetic two-modality scenes with sensor-specific corruptions.

Modality A is a sharp, narrow point-spread (range-sensor-like); modality B
renders the same targets as broad, slightly textured blobs (camera-like).
Each corruption kind touches exactly one modality and never the occupancy
target.

Dataset files are JSON lines, one scene per line::

    {"format": "layerbudget.scenes", "version": 1, "grid": [8, 8]}   # header
    {"targets": [[r, c, intensity], ...], "grid_a": [...64 floats...],
     "grid_b": [...], "kind": "B-dark", "severity": 0.83}

The occupancy target is rebuilt from ``targets`` on load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .autodiff import SeededRng

KINDS = ("clean", "A-sparsify", "B-fog", "B-blur", "B-dark", "A-blur")
KIND_INDEX = {k: i for i, k in enumerate(KINDS)}
TARGETED_MODALITY = {"A-sparsify": 0, "A-blur": 0, "B-fog": 1, "B-blur": 1, "B-dark": 1}
DATASET_FORMAT = "layerbudget.scenes"


@dataclass(frozen=True)
class SceneConfig:
    height: int = 8
    width: int = 8
    max_targets: int = 5
    noise: float = 0.05
    spread_a: float = 0.7
    spread_b: float = 1.2
    texture_b: float = 0.15
    intensity: tuple = (0.3, 1.0)

    @property
    def shape(self):
        return (self.height, self.width)


@dataclass
class Scene:
    targets: np.ndarray  # [k, 3] rows (row, col, intensity)
    grid_a: np.ndarray
    grid_b: np.ndarray
    occupancy: np.ndarray
    kind: str = "clean"
    severity: float = 0.0

    @property
    def label(self):
        return KIND_INDEX[self.kind]

    @property
    def grids(self):
        return np.stack([self.grid_a, self.grid_b])


def _blob(shape, r, c, spread):
    rr, cc = np.mgrid[0 : shape[0], 0 : shape[1]]
    return np.exp(-((rr - r) ** 2 + (cc - c) ** 2) / (2.0 * spread**2))


def occupancy_from_targets(targets, shape):
    occ = np.zeros(shape)
    for r, c, _ in np.asarray(targets).reshape(-1, 3):
        occ[int(r), int(c)] = 1.0
    return occ


def gen_scene(rng: SeededRng, n_targets: int, cfg: SceneConfig = SceneConfig()) -> Scene:
    """Render ``n_targets`` targets at distinct cells in both modalities."""
    if not 0 <= n_targets <= cfg.max_targets:
        raise ValueError(f"n_targets must lie in [0, {cfg.max_targets}]")
    shape = cfg.shape
    cells = rng.choice(shape[0] * shape[1], size=n_targets, replace=False)
    lo, hi = cfg.intensity
    amps = rng.uniform(n_targets, lo, hi)
    targets = np.array(
        [[cell // shape[1], cell % shape[1], a] for cell, a in zip(cells, amps)], dtype=np.float64
    ).reshape(-1, 3)
    grid_a = rng.normal(shape, cfg.noise)
    grid_b = rng.normal(shape, cfg.noise)
    for r, c, a in targets:
        grid_a += a * _blob(shape, r, c, cfg.spread_a)
        texture = 1.0 + cfg.texture_b * rng.normal(shape)
        grid_b += a * _blob(shape, r, c, cfg.spread_b) * texture
    return Scene(targets, grid_a, grid_b, occupancy_from_targets(targets, shape))


def corrupt(scene: Scene, kind: str, severity: float, rng: SeededRng, cfg: SceneConfig = SceneConfig()) -> Scene:
    """Degrade one modality of ``scene``; severity 0 returns the scene unchanged."""
    if kind not in KIND_INDEX:
        raise ValueError(f"unknown corruption kind {kind!r}; expected one of {KINDS}")
    if not 0.0 <= severity <= 1.0:
        raise ValueError("severity must lie in [0, 1]")
    if kind == "clean" or severity == 0.0:
        return scene
    a, b = scene.grid_a.copy(), scene.grid_b.copy()
    h, w = a.shape
    if kind == "A-sparsify":
        rows = rng.choice(h, size=int(round(severity * h)), replace=False)
        a[rows, :] = 0.0
    elif kind == "A-blur":
        a = gaussian_filter(a, sigma=1.5 * severity, mode="constant")
    elif kind == "B-blur":
        b = gaussian_filter(b, sigma=1.5 * severity, mode="constant")
    elif kind == "B-fog":
        haze = gaussian_filter(rng.normal((h, w)), sigma=2.0, mode="reflect")
        haze = 0.4 + 0.3 * haze / (np.abs(haze).max() + 1e-12)
        b = (1.0 - 0.8 * severity) * b + severity * haze
    elif kind == "B-dark":
        b = (1.0 - severity) * b + severity * rng.normal((h, w), cfg.noise)
    return replace(scene, grid_a=a, grid_b=b, kind=kind, severity=float(severity))


@dataclass
class SceneBatch:
    """Stacked scenes: grids [B, M, H, W], occupancy [B, H, W], labels [B]."""

    grids: np.ndarray
    occupancy: np.ndarray
    labels: np.ndarray
    severity: np.ndarray
    n_targets: np.ndarray
    _patches: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return self.grids.shape[0]

    @property
    def patches(self):
        """3x3 zero-padded neighbourhoods per token: [B, M, H*W, 9]."""
        if self._patches is None:
            self._patches = patchify(self.grids)
        return self._patches

    def subset(self, idx):
        idx = np.asarray(idx)
        return SceneBatch(
            self.grids[idx],
            self.occupancy[idx],
            self.labels[idx],
            self.severity[idx],
            self.n_targets[idx],
            None if self._patches is None else self._patches[idx],
        )

    def with_grids(self, grids):
        return SceneBatch(grids, self.occupancy, self.labels, self.severity, self.n_targets)

    @classmethod
    def from_scenes(cls, scenes):
        return cls(
            np.stack([s.grids for s in scenes]),
            np.stack([s.occupancy for s in scenes]),
            np.array([s.label for s in scenes], dtype=np.int64),
            np.array([s.severity for s in scenes]),
            np.array([len(s.targets) for s in scenes], dtype=np.int64),
        )


def patchify(grids, size=3):
    """Flattened ``size x size`` neighbourhoods around every cell of [..., H, W]."""
    pad = size // 2
    h, w = grids.shape[-2:]
    padded = np.pad(grids, [(0, 0)] * (grids.ndim - 2) + [(pad, pad), (pad, pad)])
    cols = [padded[..., dr : dr + h, dc : dc + w] for dr in range(size) for dc in range(size)]
    return np.stack(cols, axis=-1).reshape(grids.shape[:-2] + (h * w, size * size))


def gen_dataset(
    rng: SeededRng,
    n: int,
    kinds=KINDS,
    severity=(0.4, 1.0),
    cfg: SceneConfig = SceneConfig(),
):
    """``n`` scenes, each with its own child stream so samples are order-independent.

    Kinds are drawn uniformly from ``kinds``; non-clean severities uniformly
    from the ``severity`` range.
    """
    scenes = []
    for i in range(n):
        r = rng.child(i)
        scene = gen_scene(r, int(r.integers(0, cfg.max_targets + 1)), cfg)
        kind = kinds[int(r.integers(0, len(kinds)))]
        if kind != "clean":
            scene = corrupt(scene, kind, float(r.uniform(None, *severity)), r, cfg)
        scenes.append(scene)
    return scenes


def gen_batch(rng: SeededRng, n: int, kinds=KINDS, severity=(0.4, 1.0), cfg: SceneConfig = SceneConfig()):
    return SceneBatch.from_scenes(gen_dataset(rng, n, kinds, severity, cfg))


def dump_scenes(scenes, path, cfg: SceneConfig = SceneConfig()):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write(json.dumps({"format": DATASET_FORMAT, "version": 1, "grid": list(cfg.shape)}) + "\n")
        for s in scenes:
            fh.write(
                json.dumps(
                    {
                        "targets": s.targets.tolist(),
                        "grid_a": s.grid_a.reshape(-1).tolist(),
                        "grid_b": s.grid_b.reshape(-1).tolist(),
                        "kind": s.kind,
                        "severity": s.severity,
                    }
                )
                + "\n"
            )
    return path


def load_scenes(path):
    with Path(path).open() as fh:
        header = json.loads(fh.readline())
        if header.get("format") != DATASET_FORMAT:
            raise ValueError(f"{path}: not a scene dataset")
        shape = tuple(header["grid"])
        scenes = []
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            targets = np.asarray(d["targets"], dtype=np.float64).reshape(-1, 3)
            scenes.append(
                Scene(
                    targets,
                    np.asarray(d["grid_a"]).reshape(shape),
                    np.asarray(d["grid_b"]).reshape(shape),
                    occupancy_from_targets(targets, shape),
                    d["kind"],
                    float(d["severity"]),
                )
            )
    return scenes

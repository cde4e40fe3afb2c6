"""Stand-in backbone: pairwise spatial vectors, the predicate MLP and synthetic
class-conditional object features."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import BoundingBox, SceneGraph, scene_seed
from .tensor import ParamStore, Tensor, add, constant, dropout, glorot_init, leaky_relu, matmul

LEAKY_SLOPE = 0.2


def spatial_vector(bi: BoundingBox, bj: BoundingBox) -> np.ndarray:
    """Relative position of head box ``bi`` w.r.t. tail box ``bj``.

    Offsets are normalized by the tail's width/height; sizes enter as log ratios.
    """
    for b in (bi, bj):
        if not (b.w > 0 and b.h > 0):
            raise ValueError(f"box sizes must be positive: {b}")
    return np.array([
        (bi.x - bj.x) / bj.w,
        (bi.y - bj.y) / bj.h,
        math.log(bi.w) - math.log(bj.w),  # log ratio as a difference: exactly antisymmetric
        math.log(bi.h) - math.log(bj.h),
    ])


def spatial_matrix(boxes: Sequence[BoundingBox], pairs: np.ndarray) -> np.ndarray:
    if len(pairs) == 0:
        return np.zeros((0, 4))
    return np.stack([spatial_vector(boxes[i], boxes[j]) for i, j in pairs])


def init_predicate_mlp(store: ParamStore, d: int, hidden: int = 32, seed: int = 0, prefix: str = "lambda"):
    """Register the two-layer predicate MLP (4 -> hidden -> d) in ``store``."""
    rng = np.random.default_rng(seed)
    store.add(f"{prefix}.w1", glorot_init(4, hidden, rng))
    store.add(f"{prefix}.b1", np.zeros((1, hidden)))
    store.add(f"{prefix}.w2", glorot_init(hidden, d, rng))
    store.add(f"{prefix}.b2", np.zeros((1, d)))


def predicate_init(t: np.ndarray | Tensor, store: ParamStore, prefix: str = "lambda",
                   dropout_rate: float = 0.0, rng=None, train: bool = False) -> Tensor:
    """Initial predicate-node embeddings ``MLP(t)`` for a (m, 4) batch of spatial vectors.

    The hidden layer uses a Leaky ReLU with slope 0.2.
    """
    x = t if isinstance(t, Tensor) else constant(np.atleast_2d(t))
    w1 = store[f"{prefix}.w1"]
    if x.shape[1] != w1.shape[0]:
        raise ValueError(f"spatial input has {x.shape[1]} columns, MLP expects {w1.shape[0]}")
    h = leaky_relu(add(matmul(x, w1), store[f"{prefix}.b1"]), LEAKY_SLOPE)
    h = dropout(h, dropout_rate, rng, train)
    return add(matmul(h, store[f"{prefix}.w2"]), store[f"{prefix}.b2"])


@dataclass(frozen=True)
class FeatureGenConfig:
    """Class means and noise level of the synthetic object-feature generator."""

    class_means: np.ndarray
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        cm = np.asarray(self.class_means, dtype=np.float64)
        object.__setattr__(self, "class_means", cm)
        if cm.ndim != 2 or cm.shape[1] < 2:
            raise ValueError("class_means must be (n_classes, d) with d >= 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if min_separation(cm) <= 0:
            raise ValueError("class means must be pairwise distinct")

    @property
    def dim(self) -> int:
        return self.class_means.shape[1]

    @classmethod
    def random(cls, n_classes: int, d: int, noise_sigma: float = 0.1, seed: int = 0) -> "FeatureGenConfig":
        """Unit-norm class means from Glorot-uniform draws."""
        raw = glorot_init(n_classes, d, np.random.default_rng([seed, 17]))
        means = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        return cls(means, noise_sigma, seed)


def min_separation(means: np.ndarray) -> float:
    diff = means[:, None, :] - means[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    dist[np.diag_indices(len(means))] = np.inf
    return float(dist.min()) if len(means) > 1 else math.inf


def synth_object_features(classes: Sequence[int] | SceneGraph, cfg: FeatureGenConfig,
                          scene_id: str | int = 0) -> np.ndarray:
    """Class mean plus isotropic Gaussian noise, seeded per (scene id, object index)."""
    if isinstance(classes, SceneGraph):
        classes = classes.classes
    classes = list(classes)
    out = np.empty((len(classes), cfg.dim))
    for i, c in enumerate(classes):
        if not 0 <= c < len(cfg.class_means):
            raise IndexError(f"class {c} outside generator vocabulary")
        out[i] = cfg.class_means[c]
        if cfg.noise_sigma > 0:
            rng = np.random.default_rng(scene_seed(cfg.seed, scene_id, i))
            out[i] += rng.normal(0.0, cfg.noise_sigma, size=cfg.dim)
    return out

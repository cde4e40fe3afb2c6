"""Relational reasoning: graph-transformer contextualization of SRGs, linear
classification heads and the supervised training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import SceneGraph, SceneRepresentationGraph, build_srg_topology
from .features import init_predicate_mlp, predicate_init, spatial_matrix
from .tensor import (
    ParamStore, Tensor, adam_step, add, concat_cols, concat_rows, constant, dropout,
    glorot_init, layer_norm, leaky_relu, masked_softmax_rows, matmul, no_grad, scale,
    softmax_cross_entropy, softmax_rows, take_rows, transpose,
)

log = logging.getLogger(__name__)

LAMBDA = "lambda."
GAMMA = "gt."
HEADS = "head."


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    layers: int = 2
    heads: int = 2
    ff: int = 128
    hidden: int = 32  # predicate MLP width
    obj_dropout: float = 0.2
    pred_dropout: float = 0.1
    gt_dropout: float = 0.1
    bg_ratio: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")

    @classmethod
    def large(cls, **kw) -> "ModelConfig":
        base = dict(d=512, layers=4, heads=5, ff=2048, hidden=512, obj_dropout=0.8, pred_dropout=0.1)
        base.update(kw)
        # 512 is not divisible by 5 heads; round d to the nearest multiple
        base["d"] = base["d"] - base["d"] % base["heads"]
        return cls(**base)


def init_params(cfg: ModelConfig, n_obj_classes: int, n_pred_classes: int) -> ParamStore:
    """Fresh parameter store: predicate MLP, graph transformer and both heads.

    ``n_pred_classes`` includes the background class.
    """
    store = ParamStore()
    rng = np.random.default_rng(cfg.seed)
    init_predicate_mlp(store, cfg.d, cfg.hidden, seed=int(rng.integers(2**31)))
    dh = cfg.d // cfg.heads
    for l in range(cfg.layers):
        p = f"{GAMMA}{l}."
        for h in range(cfg.heads):
            for w in ("q", "k", "v"):
                store.add(f"{p}{w}{h}", glorot_init(cfg.d, dh, rng))
        store.add(f"{p}o", glorot_init(cfg.d, cfg.d, rng))
        store.add(f"{p}ln1.g", np.ones((1, cfg.d)))
        store.add(f"{p}ln1.b", np.zeros((1, cfg.d)))
        store.add(f"{p}ff1", glorot_init(cfg.d, cfg.ff, rng))
        store.add(f"{p}ff1.b", np.zeros((1, cfg.ff)))
        store.add(f"{p}ff2", glorot_init(cfg.ff, cfg.d, rng))
        store.add(f"{p}ff2.b", np.zeros((1, cfg.d)))
        store.add(f"{p}ln2.g", np.ones((1, cfg.d)))
        store.add(f"{p}ln2.b", np.zeros((1, cfg.d)))
    store.add(f"{HEADS}obj", glorot_init(n_obj_classes, cfg.d, rng))
    store.add(f"{HEADS}pred", glorot_init(n_pred_classes, cfg.d, rng))
    return store


def reasoning_names(store: ParamStore) -> list[str]:
    """Names of the graph transformer and head parameters (everything but the MLP)."""
    return [n for n in store.names() if n.startswith(GAMMA) or n.startswith(HEADS)]


# -- batching ------------------------------------------------------------------

@dataclass
class GraphBatch:
    """Disjoint union of several SRGs, processed as one block-diagonal graph.

    Predicate inputs come either as raw spatial vectors (passed through the
    predicate MLP) or as ready embeddings.
    """

    obj_x: np.ndarray
    pairs: np.ndarray  # global object indices
    obj_labels: np.ndarray
    pred_labels: np.ndarray
    obj_weight: np.ndarray
    pred_weight: np.ndarray
    obj_offsets: np.ndarray  # per graph, length n_graphs + 1
    pred_offsets: np.ndarray
    spatial: Optional[np.ndarray] = None
    pred_x: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.obj_x.shape[0]

    @property
    def m(self) -> int:
        return self.pairs.shape[0]

    @property
    def n_graphs(self) -> int:
        return len(self.obj_offsets) - 1

    def attention_mask(self) -> np.ndarray:
        """Self loops plus object <-> predicate incidence."""
        n, m = self.n, self.m
        mask = np.eye(n + m, dtype=bool)
        if m:
            k = np.arange(m) + n
            mask[k, self.pairs[:, 0]] = True
            mask[k, self.pairs[:, 1]] = True
            mask[self.pairs[:, 0], k] = True
            mask[self.pairs[:, 1], k] = True
        return mask


def batch_from_srgs(srgs: Sequence[SceneRepresentationGraph]) -> GraphBatch:
    obj, pred, pairs, ol, pl = [], [], [], [], []
    oo, po = [0], [0]
    for g in srgs:
        obj.append(g.object_embeddings)
        pred.append(g.predicate_embeddings)
        pairs.append(g.pairs + oo[-1])
        ol.append(g.obj_labels if g.obj_labels is not None else -np.ones(g.n, dtype=np.int64))
        pl.append(g.pred_labels if g.pred_labels is not None else -np.ones(g.m, dtype=np.int64))
        oo.append(oo[-1] + g.n)
        po.append(po[-1] + g.m)
    d = srgs[0].dim
    ol_a = np.concatenate(ol).astype(np.int64)
    pl_a = np.concatenate(pl).astype(np.int64)
    return GraphBatch(
        obj_x=np.concatenate(obj),
        pairs=np.concatenate(pairs).reshape(-1, 2) if pairs else np.zeros((0, 2), np.int64),
        obj_labels=ol_a, pred_labels=pl_a,
        obj_weight=(ol_a >= 0).astype(float), pred_weight=(pl_a >= 0).astype(float),
        obj_offsets=np.array(oo), pred_offsets=np.array(po),
        pred_x=np.concatenate(pred) if pred else np.zeros((0, d)),
    )


@dataclass
class ImageScene:
    """A scene as seen by the vision path: graph plus per-object features."""

    graph: SceneGraph
    features: np.ndarray
    id: str = ""


def slot_labels(g: SceneGraph, pairs, background: int) -> np.ndarray:
    lookup = {(t.head, t.tail): t.predicate for t in g.triples}
    return np.array([lookup.get((int(i), int(j)), background) for i, j in pairs], dtype=np.int64)


def batch_from_scenes(scenes: Sequence[ImageScene], background: int,
                      bg_ratio: Optional[float] = None, rng: Optional[np.random.Generator] = None) -> GraphBatch:
    """Fully connected SRG batch from image scenes.

    With ``bg_ratio`` set, background slots beyond ``bg_ratio`` times the
    number of labelled slots get zero loss weight (chosen by ``rng``).
    """
    obj, sp, pairs, ol, pl, pw = [], [], [], [], [], []
    oo, po = [0], [0]
    for s in scenes:
        topo = build_srg_topology(s.graph.n_objects)
        pr = np.array(topo.pairs, dtype=np.int64)
        labels = slot_labels(s.graph, pr, background)
        w = np.ones(len(pr))
        if bg_ratio is not None:
            bg = np.flatnonzero(labels == background)
            keep = int(math.ceil(bg_ratio * max(1, (labels != background).sum())))
            if len(bg) > keep:
                drop = bg if rng is None else rng.permutation(bg)
                w[np.sort(drop[keep:])] = 0.0
        obj.append(s.features)
        sp.append(spatial_matrix(s.graph.boxes, pr))
        pairs.append(pr + oo[-1])
        ol.append(np.array(s.graph.classes, dtype=np.int64))
        pl.append(labels)
        pw.append(w)
        oo.append(oo[-1] + s.graph.n_objects)
        po.append(po[-1] + len(pr))
    ol_a = np.concatenate(ol)
    return GraphBatch(
        obj_x=np.concatenate(obj), pairs=np.concatenate(pairs),
        obj_labels=ol_a, pred_labels=np.concatenate(pl),
        obj_weight=np.ones(len(ol_a)), pred_weight=np.concatenate(pw),
        obj_offsets=np.array(oo), pred_offsets=np.array(po),
        spatial=np.concatenate(sp),
    )


# -- model ---------------------------------------------------------------------

@dataclass
class Contextualized:
    z_obj: Tensor
    z_pred: Tensor
    attention: list[np.ndarray] = field(default_factory=list)


def embed_inputs(batch: GraphBatch, store: ParamStore, cfg: ModelConfig, train: bool = False,
                 rng: Optional[np.random.Generator] = None, obj_input: Optional[np.ndarray] = None,
                 pred_input: Optional[np.ndarray] = None) -> tuple[Tensor, Tensor]:
    x_obj = constant(batch.obj_x if obj_input is None else obj_input)
    x_obj = dropout(x_obj, cfg.obj_dropout, rng, train)
    if pred_input is not None:
        x_pred = constant(pred_input)
    elif batch.spatial is not None:
        x_pred = predicate_init(batch.spatial, store, "lambda", cfg.pred_dropout, rng, train)
    else:
        x_pred = constant(batch.pred_x)
    return x_obj, x_pred


def forward(x_obj: Tensor, x_pred: Tensor, mask: np.ndarray, store: ParamStore, cfg: ModelConfig,
            train: bool = False, rng: Optional[np.random.Generator] = None,
            keep_attention: bool = False) -> Contextualized:
    """Run the graph-transformer layers over object and predicate nodes.

    Each layer: multi-head attention restricted to ``mask``, residual, layer
    norm, two-layer feed-forward, residual, layer norm.
    """
    n = x_obj.shape[0]
    if x_obj.shape[1] != cfg.d or x_pred.shape[1] != cfg.d:
        raise ValueError(f"node dimension {x_obj.shape[1]}/{x_pred.shape[1]} != model d={cfg.d}")
    if mask.shape != (n + x_pred.shape[0],) * 2:
        raise ValueError("attention mask does not match node count")
    x = concat_rows([x_obj, x_pred])
    inv = 1.0 / math.sqrt(cfg.d // cfg.heads)
    att_log = []
    for l in range(cfg.layers):
        p = f"{GAMMA}{l}."
        outs = []
        for h in range(cfg.heads):
            q = matmul(x, store[f"{p}q{h}"])
            k = matmul(x, store[f"{p}k{h}"])
            v = matmul(x, store[f"{p}v{h}"])
            a = masked_softmax_rows(scale(matmul(q, transpose(k)), inv), mask)
            if keep_attention:
                att_log.append(a.data)
            outs.append(matmul(a, v))
        att = matmul(concat_cols(outs) if len(outs) > 1 else outs[0], store[f"{p}o"])
        x = layer_norm(add(x, dropout(att, cfg.gt_dropout, rng, train)), store[f"{p}ln1.g"], store[f"{p}ln1.b"])
        ff = add(matmul(leaky_relu(add(matmul(x, store[f"{p}ff1"]), store[f"{p}ff1.b"]), 0.2),
                        store[f"{p}ff2"]), store[f"{p}ff2.b"])
        x = layer_norm(add(x, dropout(ff, cfg.gt_dropout, rng, train)), store[f"{p}ln2.g"], store[f"{p}ln2.b"])
    m = x_pred.shape[0]
    z_obj = take_rows(x, np.arange(n))
    z_pred = take_rows(x, np.arange(n, n + m))
    return Contextualized(z_obj, z_pred, att_log)


def logits(z: Contextualized, store: ParamStore) -> tuple[Tensor, Tensor]:
    return (matmul(z.z_obj, transpose(store[f"{HEADS}obj"])),
            matmul(z.z_pred, transpose(store[f"{HEADS}pred"])))


def classify(z: Contextualized, store: ParamStore) -> tuple[np.ndarray, np.ndarray]:
    """Class distributions for every object and predicate node."""
    lo, lp = logits(z, store)
    return softmax_rows(lo).data, softmax_rows(lp).data


def batch_loss(batch: GraphBatch, store: ParamStore, cfg: ModelConfig, train: bool = False,
               rng: Optional[np.random.Generator] = None, obj_input=None, pred_input=None,
               obj_weight=None, pred_weight=None) -> tuple[Tensor, float, float]:
    """``l_o + l_p`` for a batch, returned with the two components."""
    x_obj, x_pred = embed_inputs(batch, store, cfg, train, rng, obj_input, pred_input)
    z = forward(x_obj, x_pred, batch.attention_mask(), store, cfg, train, rng)
    lo, lp = logits(z, store)
    ow = batch.obj_weight if obj_weight is None else obj_weight
    pw = batch.pred_weight if pred_weight is None else pred_weight
    l_o = softmax_cross_entropy(lo, np.maximum(batch.obj_labels, 0), ow)
    l_p = softmax_cross_entropy(lp, np.maximum(batch.pred_labels, 0), pw)
    return add(l_o, l_p), l_o.item(), l_p.item()


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr: float = 1e-3
    seed: int = 0


def train_supervised(scenes: Sequence[ImageScene], store: ParamStore, cfg: ModelConfig,
                     tcfg: TrainConfig, background: int) -> list[tuple[float, float]]:
    """Minimize ``l_o + l_p`` over mini-batches; returns per-epoch mean (l_o, l_p)."""
    if not scenes:
        raise ValueError("no training scenes")
    rng = np.random.default_rng([tcfg.seed, 101])
    store.unfreeze()
    history = []
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(scenes))
        los, lps = [], []
        for start in range(0, len(order), tcfg.batch_size):
            chunk = [scenes[i] for i in order[start:start + tcfg.batch_size]]
            batch = batch_from_scenes(chunk, background, cfg.bg_ratio, rng)
            loss, l_o, l_p = batch_loss(batch, store, cfg, train=True, rng=rng)
            loss.backward()
            adam_step(store, tcfg.lr)
            los.append(l_o)
            lps.append(l_p)
        history.append((float(np.mean(los)), float(np.mean(lps))))
        log.debug("supervised epoch %d: l_o=%.4f l_p=%.4f", epoch, *history[-1])
    return history


@dataclass
class ScenePrediction:
    obj_probs: np.ndarray
    pred_probs: np.ndarray
    pairs: np.ndarray


def predict(scenes: Sequence[ImageScene], store: ParamStore, cfg: ModelConfig, background: int,
            batch_size: int = 8) -> list[ScenePrediction]:
    out = []
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        batch = batch_from_scenes(chunk, background)
        with no_grad():
            x_obj, x_pred = embed_inputs(batch, store, cfg)
            z = forward(x_obj, x_pred, batch.attention_mask(), store, cfg)
            po, pp = classify(z, store)
        for g in range(batch.n_graphs):
            o0, o1 = batch.obj_offsets[g], batch.obj_offsets[g + 1]
            p0, p1 = batch.pred_offsets[g], batch.pred_offsets[g + 1]
            out.append(ScenePrediction(po[o0:o1], pp[p0:p1], batch.pairs[p0:p1] - o0))
    return out

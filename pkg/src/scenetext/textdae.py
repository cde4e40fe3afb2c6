"""Denoising-autoencoder fine-tuning of the reasoner from text-derived triples."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import ClassVocab
from .grounding import CanonicalEmbeddings, SkipReport, embed_triples
from .reasoner import (
    GraphBatch, ModelConfig, batch_from_srgs, batch_loss, classify, embed_inputs, forward,
    reasoning_names,
)
from .tensor import ParamStore, adam_step, no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskConfig:
    mask_rate: float = 0.2
    exact_count: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mask_rate < 1.0:
            raise ValueError(f"mask_rate must lie in [0, 1), got {self.mask_rate}")


@dataclass
class MaskRecord:
    obj: np.ndarray  # bool per object node
    pred: np.ndarray  # bool per predicate node

    @property
    def count(self) -> int:
        return int(self.obj.sum() + self.pred.sum())


def draw_mask(n: int, rate: float, rng: np.random.Generator, exact_count: bool) -> np.ndarray:
    if exact_count:
        mask = np.zeros(n, dtype=bool)
        mask[rng.choice(n, size=int(round(rate * n)), replace=False)] = True
        return mask
    return rng.random(n) < rate


def mask_graph(batch: GraphBatch, cfg: MaskConfig, rng: Optional[np.random.Generator] = None
               ) -> tuple[np.ndarray, np.ndarray, MaskRecord]:
    """Zero each object node and predicate node independently with ``cfg.mask_rate``.

    Returns masked copies of the object and predicate inputs; labels in
    ``batch`` are left untouched. With ``exact_count`` the rate is realized
    exactly (rounded) over all elements of the batch.
    """
    if batch.n + batch.m == 0:
        raise ValueError("cannot mask an empty batch")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    allm = draw_mask(batch.n + batch.m, cfg.mask_rate, rng, cfg.exact_count)
    rec = MaskRecord(allm[:batch.n], allm[batch.n:])
    obj = batch.obj_x.copy()
    pred = batch.pred_x.copy()
    obj[rec.obj] = 0.0
    pred[rec.pred] = 0.0
    return obj, pred, rec


@dataclass
class FinetuneConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    mask: MaskConfig = MaskConfig()
    masked_only_loss: bool = False
    seed: int = 0


@dataclass
class FinetuneResult:
    history: list[tuple[int, float, float]]  # (epoch, reconstruction loss, masked-element accuracy)
    report: SkipReport
    n_fragments: int


def finetune_from_triples(sentences: Sequence[Iterable[tuple[str, str, str]]], vocab: ClassVocab,
                          emb: CanonicalEmbeddings, store: ParamStore, cfg: ModelConfig,
                          fcfg: FinetuneConfig) -> FinetuneResult:
    """Fine-tune the graph transformer and heads on masked, embedded text graphs.

    The canonical embeddings and the predicate MLP are never updated.
    """
    if not sentences:
        raise ValueError("no text graphs to fine-tune on")
    frags, report = embed_triples(sentences, vocab, emb)
    if report.skipped_triples:
        log.info("skipped %d triple(s) with unknown symbols", report.skipped_triples)
    if not frags:
        raise ValueError("every text graph was skipped; nothing to fine-tune on")
    trainable = reasoning_names(store)
    rng = np.random.default_rng([fcfg.seed, 303])
    history = []
    for epoch in range(fcfg.epochs):
        order = rng.permutation(len(frags))
        losses, hit, tot = [], 0, 0
        for start in range(0, len(order), fcfg.batch_size):
            batch = batch_from_srgs([frags[i] for i in order[start:start + fcfg.batch_size]])
            obj_in, pred_in, rec = mask_graph(batch, fcfg.mask, rng)
            ow = pw = None
            if fcfg.masked_only_loss:
                ow, pw = rec.obj.astype(float), rec.pred.astype(float)
            loss, _, _ = batch_loss(batch, store, cfg, train=True, rng=rng, obj_input=obj_in,
                                    pred_input=pred_in, obj_weight=ow, pred_weight=pw)
            loss.backward()
            adam_step(store, fcfg.lr, only=trainable)
            losses.append(loss.item())
            if rec.count:
                po, pp = _eval_probs(batch, store, cfg, obj_in, pred_in)
                hit += int((po.argmax(1)[rec.obj] == batch.obj_labels[rec.obj]).sum())
                hit += int((pp.argmax(1)[rec.pred] == batch.pred_labels[rec.pred]).sum())
                tot += rec.count
        history.append((epoch, float(np.mean(losses)), hit / tot if tot else float("nan")))
        log.debug("finetune epoch %d: loss=%.4f masked-acc=%.3f", *history[-1])
    return FinetuneResult(history, report, len(frags))


def _eval_probs(batch: GraphBatch, store: ParamStore, cfg: ModelConfig, obj_in, pred_in):
    with no_grad():
        x_obj, x_pred = embed_inputs(batch, store, cfg, obj_input=obj_in, pred_input=pred_in)
        return classify(forward(x_obj, x_pred, batch.attention_mask(), store, cfg), store)

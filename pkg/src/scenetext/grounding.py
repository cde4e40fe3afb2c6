"""Image-grounded canonical class embeddings and the symbol -> embedding map."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import ClassVocab, SceneRepresentationGraph
from .tensor import ParamStore, adam_step, constant, glorot_init, matmul, softmax_cross_entropy, transpose

log = logging.getLogger(__name__)


@dataclass
class CanonicalEmbeddings:
    """``obj`` is |C^o| x d, ``pred`` is |C^p| x d (real predicates only)."""

    obj: np.ndarray
    pred: np.ndarray
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.obj.shape[1] != self.pred.shape[1]:
            raise ValueError("object and predicate embeddings differ in dimension")

    @property
    def dim(self) -> int:
        return self.obj.shape[1]

    def copy(self) -> "CanonicalEmbeddings":
        return CanonicalEmbeddings(self.obj.copy(), self.pred.copy(), list(self.warnings))


def _fit_classifier(x: np.ndarray, y: np.ndarray, n_classes: int, epochs: int, lr: float,
                    rng: np.random.Generator, init: Optional[np.ndarray], batch_size: int,
                    name: str, mode: str) -> tuple[np.ndarray, list[str]]:
    store = ParamStore()
    if init is None:
        init = glorot_init(n_classes, x.shape[1], rng)
        if mode == "mean":
            for c in np.unique(y):
                init[c] = x[y == c].mean(axis=0)
    e = store.add(name, init)
    warnings = [f"{name}: class {c} has no training features; its embedding is ungrounded"
                for c in sorted(set(range(n_classes)) - set(np.unique(y).tolist()))]
    for w in warnings:
        log.warning(w)
    if len(x) == 0:
        return e.data.copy(), warnings
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            loss = softmax_cross_entropy(matmul(constant(x[idx]), transpose(e)), y[idx])
            loss.backward()
            adam_step(store, lr)
    return e.data.copy(), warnings


def train_canonical(obj_x: np.ndarray, obj_y: Sequence[int], pred_x: np.ndarray, pred_y: Sequence[int],
                    n_obj: int, n_pred: int, epochs: int = 50, seed: int = 0, lr: float = 1e-2,
                    batch_size: int = 64, obj_init: Optional[np.ndarray] = None,
                    pred_init: Optional[np.ndarray] = None, init: str = "mean") -> CanonicalEmbeddings:
    """Fit linear softmax classifiers ``softmax(E x)`` on raw features.

    The classifier rows are the canonical embeddings. No graph context is used.
    ``init="mean"`` starts each row at its class's feature mean: softmax
    gradients sum to zero over rows, so a random shared component would never
    be trained away. ``init="glorot"`` starts from random rows. Explicit
    ``obj_init``/``pred_init`` arrays take precedence.
    """
    if init not in ("mean", "glorot"):
        raise ValueError(f"unknown init {init!r}")
    rng = np.random.default_rng([seed, 202])
    obj_y = np.asarray(obj_y, dtype=np.int64)
    pred_y = np.asarray(pred_y, dtype=np.int64)
    e_o, w_o = _fit_classifier(np.asarray(obj_x), obj_y, n_obj, epochs, lr, rng, obj_init, batch_size, "E_obj", init)
    e_p, w_p = _fit_classifier(np.asarray(pred_x), pred_y, n_pred, epochs, lr, rng, pred_init, batch_size,
                               "E_pred", init)
    return CanonicalEmbeddings(e_o, e_p, w_o + w_p)


def classifier_accuracy(e: np.ndarray, x: np.ndarray, y: Sequence[int]) -> float:
    if len(x) == 0:
        return float("nan")
    return float(np.mean(np.argmax(x @ e.T, axis=1) == np.asarray(y)))


def symbol_to_embedding(c: int, e: np.ndarray) -> np.ndarray:
    if not 0 <= c < e.shape[0]:
        raise IndexError(f"class {c} out of range for {e.shape[0]} embeddings")
    return e[c].copy()


@dataclass
class SkipReport:
    skipped_triples: int = 0
    skipped_sentences: int = 0
    unknown_symbols: dict[str, int] = field(default_factory=dict)

    def note(self, sym: str):
        self.unknown_symbols[sym] = self.unknown_symbols.get(sym, 0) + 1


def embed_sentence(facts: Iterable[tuple[str, str, str]], vocab: ClassVocab, emb: CanonicalEmbeddings,
                   report: Optional[SkipReport] = None) -> Optional[SceneRepresentationGraph]:
    """One sentence's facts as an SRG fragment embedded with canonical vectors.

    Entity symbols repeated across facts map to a single object node. Facts
    with an unknown symbol are dropped; returns None if nothing is left.
    """
    report = report if report is not None else SkipReport()
    obj_idx = {n: i for i, n in enumerate(vocab.object_names)}
    pred_idx = {n: i for i, n in enumerate(vocab.predicate_names)}
    nodes: dict[str, int] = {}
    pairs, plabels = [], []
    for h, p, t in sorted(set(facts)):
        bad = [s for s, table in ((h, obj_idx), (p, pred_idx), (t, obj_idx)) if s not in table]
        if bad or h == t:
            for s in bad:
                report.note(s)
            report.skipped_triples += 1
            continue
        for s in (h, t):
            nodes.setdefault(s, len(nodes))
        pairs.append((nodes[h], nodes[t]))
        plabels.append(pred_idx[p])
    if not pairs:
        report.skipped_sentences += 1
        return None
    olabels = np.array([obj_idx[s] for s in nodes], dtype=np.int64)
    return SceneRepresentationGraph(
        object_embeddings=emb.obj[olabels].copy(),
        predicate_embeddings=emb.pred[np.array(plabels)].copy(),
        pairs=np.array(pairs),
        obj_labels=olabels,
        pred_labels=np.array(plabels, dtype=np.int64),
    )


def embed_triples(sentences: Sequence[Iterable[tuple[str, str, str]]], vocab: ClassVocab,
                  emb: CanonicalEmbeddings) -> tuple[list[SceneRepresentationGraph], SkipReport]:
    report = SkipReport()
    frags = []
    for facts in sentences:
        g = embed_sentence(facts, vocab, emb, report)
        if g is not None:
            frags.append(g)
    return frags, report


def export_embeddings(e: np.ndarray, names: Sequence[str]) -> str:
    """CSV text: header ``class,e0..e{d-1}`` then one full-precision row per class."""
    if len(names) != e.shape[0]:
        raise ValueError(f"{len(names)} names for {e.shape[0]} rows")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class"] + [f"e{j}" for j in range(e.shape[1])])
    for name, row in zip(names, e):
        w.writerow([name] + [repr(float(v)) for v in row])
    return buf.getvalue()


def import_embeddings(text: str) -> tuple[list[str], np.ndarray]:
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    d = len(header) - 1
    names = [r[0] for r in body]
    e = np.array([[float(v) for v in r[1:]] for r in body]).reshape(len(body), d)
    return names, e

"""Triple ranking and recall metrics for SGCls / PredCls / ObjCls."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import SceneGraph

TASKS = ("SGCls", "PredCls", "ObjCls")
SETUPS = ("constrained", "unconstrained")


@dataclass
class RankedPrediction:
    """Candidate triples of one scene, sorted by descending score."""

    heads: np.ndarray
    head_cls: np.ndarray
    preds: np.ndarray
    tails: np.ndarray
    tail_cls: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return len(self.scores)

    def keys(self, task: str, k: Optional[int] = None) -> list[tuple]:
        sl = slice(None, k)
        if task == "PredCls":
            cols = (self.heads, self.preds, self.tails)
        else:
            cols = (self.heads, self.head_cls, self.preds, self.tails, self.tail_cls)
        return list(zip(*(c[sl].tolist() for c in cols)))

    def to_dict(self) -> dict:
        return {"triples": [[int(h), int(hc), int(p), int(t), int(tc), float(s)] for h, hc, p, t, tc, s in
                            zip(self.heads, self.head_cls, self.preds, self.tails, self.tail_cls, self.scores)]}

    @classmethod
    def from_dict(cls, d: dict) -> "RankedPrediction":
        rows = np.array(d["triples"], dtype=float).reshape(-1, 6)
        ints = rows[:, :5].astype(np.int64)
        return cls(ints[:, 0], ints[:, 1], ints[:, 2], ints[:, 3], ints[:, 4], rows[:, 5])


def rank_triples(obj_probs: np.ndarray, pred_probs: np.ndarray, pairs: np.ndarray, task: str,
                 setup: str, background: Optional[int] = None,
                 gt_classes: Optional[Sequence[int]] = None) -> RankedPrediction:
    """Score candidate triples as p(head) * p(predicate) * p(tail) and sort.

    SGCls uses each object's argmax class; PredCls uses ``gt_classes`` with
    unit object factors. The background column is never emitted. Ties are
    broken by (pair index, predicate index).
    """
    if task not in ("SGCls", "PredCls"):
        raise ValueError(f"rank_triples handles SGCls/PredCls, not {task!r}")
    if setup not in SETUPS:
        raise ValueError(f"unknown setup {setup!r}")
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    n_pred = pred_probs.shape[1]
    if task == "PredCls":
        if gt_classes is None:
            raise ValueError("PredCls ranking needs ground-truth object classes")
        cls = np.asarray(gt_classes, dtype=np.int64)
        oscore = np.ones(len(cls))
    else:
        cls = np.argmax(obj_probs, axis=1)
        oscore = obj_probs[np.arange(len(cls)), cls]
    allowed = np.array([c for c in range(n_pred) if c != background], dtype=np.int64)
    pp = pred_probs[:, allowed]
    if setup == "constrained":
        best = np.argmax(pp, axis=1)
        pair_idx = np.arange(len(pairs))
        pred_idx = allowed[best]
        pscore = pp[pair_idx, best]
    else:
        pair_idx = np.repeat(np.arange(len(pairs)), len(allowed))
        pred_idx = np.tile(allowed, len(pairs))
        pscore = pp.reshape(-1)
    h, t = pairs[pair_idx, 0], pairs[pair_idx, 1]
    score = oscore[h] * pscore * oscore[t]
    order = np.lexsort((pred_idx, pair_idx, -score))
    return RankedPrediction(h[order], cls[h][order], pred_idx[order], t[order], cls[t][order], score[order])


def gt_keys(g: SceneGraph, task: str) -> list[tuple]:
    cls = g.classes
    seen, out = set(), []
    for tr in g.triples:
        key = (tr.head, tr.predicate, tr.tail) if task == "PredCls" else (
            tr.head, cls[tr.head], tr.predicate, tr.tail, cls[tr.tail])
        if key not in seen:
            seen.add(key)
            out.append(key)
    return out


def _predicate_of(key: tuple, task: str) -> int:
    return key[1] if task == "PredCls" else key[2]


def scene_matches(pred: RankedPrediction, g: SceneGraph, k: int, task: str) -> list[tuple[int, bool]]:
    """(GT predicate, matched in top-k) for each ground-truth triple."""
    if k < 1:
        raise ValueError("K must be >= 1")
    top = set(pred.keys(task, k))
    return [(_predicate_of(key, task), key in top) for key in gt_keys(g, task)]


@dataclass
class RecallResult:
    value: float
    n_scenes: int
    n_skipped: int


def recall_at_k(preds: Sequence[RankedPrediction], gts: Sequence[SceneGraph], k: int, task: str) -> RecallResult:
    """Mean over scenes of the matched fraction of GT triples; empty-GT scenes are skipped."""
    vals, skipped = [], 0
    for p, g in zip(preds, gts, strict=True):
        m = scene_matches(p, g, k, task)
        if not m:
            skipped += 1
            continue
        vals.append(sum(hit for _, hit in m) / len(m))
    return RecallResult(math.fsum(vals) / len(vals) if vals else float("nan"), len(vals), skipped)


def per_predicate_recall(matches: Iterable[Iterable[tuple[int, bool]]]) -> dict[int, tuple[int, float]]:
    """predicate -> (support, recall) pooled over the whole set."""
    hits: dict[int, int] = {}
    support: dict[int, int] = {}
    for scene in matches:
        for p, hit in scene:
            support[p] = support.get(p, 0) + 1
            hits[p] = hits.get(p, 0) + int(hit)
    return {p: (support[p], hits[p] / support[p]) for p in sorted(support)}


def mean_recall_at_k(matches: Iterable[Iterable[tuple[int, bool]]]) -> float:
    """Unweighted mean over predicates present in GT of their pooled recall."""
    per = per_predicate_recall(matches)
    if not per:
        raise ValueError("mean recall needs at least one ground-truth triple")
    return math.fsum(r for _, r in per.values()) / len(per)


def objcls_top1(obj_probs: Sequence[np.ndarray], gts: Sequence[Sequence[int]]) -> float:
    """Fraction of objects whose argmax class (lowest index on ties) is correct."""
    hit = total = 0
    for p, y in zip(obj_probs, gts, strict=True):
        y = np.asarray(y)
        hit += int((np.argmax(p, axis=1) == y).sum())
        total += len(y)
    return hit / total if total else float("nan")


def per_class_report(per_class: dict[int, tuple[int, float]], names: Sequence[str]) -> str:
    """CSV ``class,support,recall``, one row per class present in GT."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "support", "recall"])
    for c, (sup, rec) in sorted(per_class.items()):
        w.writerow([names[c], sup, f"{rec:.6f}"])
    return buf.getvalue()


def objcls_per_class(obj_probs: Sequence[np.ndarray], gts: Sequence[Sequence[int]]) -> dict[int, tuple[int, float]]:
    matches = [[(int(c), bool(a == c)) for a, c in zip(np.argmax(p, axis=1), y)]
               for p, y in zip(obj_probs, gts)]
    return per_predicate_recall(matches)


def metric_record(task: str, setup: str, k: Optional[int], value: float, n_scenes: int,
                  metric: str = "R") -> dict:
    return {"task": task, "setup": setup, "K": k, "metric": metric, "value": round(float(value), 10),
            "n_scenes": int(n_scenes)}


def evaluate(obj_probs: Sequence[np.ndarray], pred_probs: Sequence[np.ndarray], pairs: Sequence[np.ndarray],
             gts: Sequence[SceneGraph], background: int, ks: Sequence[int] = (50, 100)) -> tuple[list[dict], dict]:
    """All metric records plus per-class tables for a test set."""
    records = []
    tables = {}
    for task in ("SGCls", "PredCls"):
        for setup in SETUPS:
            ranked = [rank_triples(po, pp, pr, task, setup, background, g.classes)
                      for po, pp, pr, g in zip(obj_probs, pred_probs, pairs, gts)]
            for k in ks:
                r = recall_at_k(ranked, gts, k, task)
                records.append(metric_record(task, setup, k, r.value, r.n_scenes, "R"))
                matches = [scene_matches(p, g, k, task) for p, g in zip(ranked, gts)]
                if any(matches):
                    records.append(metric_record(task, setup, k, mean_recall_at_k(matches), r.n_scenes, "mR"))
                    tables[f"{task}_{setup}_R@{k}"] = per_predicate_recall(matches)
    acc = objcls_top1(obj_probs, [g.classes for g in gts])
    records.append(metric_record("ObjCls", "top1", None, acc, len(gts), "acc"))
    tables["ObjCls_top1"] = objcls_per_class(obj_probs, [g.classes for g in gts])
    return records, tables


def find(records: Sequence[dict], task: str, setup: str, k: Optional[int], metric: str = "R") -> float:
    for r in records:
        if (r["task"], r["setup"], r["K"], r["metric"]) == (task, setup, k, metric):
            return r["value"]
    raise KeyError((task, setup, k, metric))

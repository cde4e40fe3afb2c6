"""Synthetic relational worlds: scenes with boxes, rule-labelled triples and
templated descriptions, and the parallel / text / test split design."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import BoundingBox, ClassVocab, Dataset, Scene, SceneGraph, Triple

OBJECTS = (
    "man", "woman", "child", "dog", "horse", "cow", "dress", "hat", "shirt", "cup",
    "table", "chair", "bike", "car", "tree", "sky", "grass", "ski slope", "street", "building",
)
PREDICATES = (
    "above", "below", "left of", "right of", "inside", "near", "larger than",
    "wearing", "holding", "riding",
)
FILLERS = ("there", "is", "we", "see", "also", "clearly", "here", "with", "some")


def _hoverlap(a: BoundingBox, b: BoundingBox) -> float:
    return min(a.x + a.w, b.x + b.w) - max(a.x, b.x)


def _voverlap(a: BoundingBox, b: BoundingBox) -> float:
    return min(a.y + a.h, b.y + b.h) - max(a.y, b.y)


def _inside(a, b):
    return a.x >= b.x and a.y >= b.y and a.x + a.w <= b.x + b.w and a.y + a.h <= b.y + b.h


def _above(a, b):
    return a.cy < b.cy and _hoverlap(a, b) > 0 and -0.1 < _voverlap(a, b) <= 0


def _below(a, b):
    return _above(b, a)


def _left_of(a, b):
    return a.cx < b.cx and _voverlap(a, b) > 0 and -0.1 < _hoverlap(a, b) <= 0


def _right_of(a, b):
    return _left_of(b, a)


def _larger_than(a, b):
    return a.area > 4.0 * b.area and _hoverlap(a, b) > 0 and _voverlap(a, b) > 0


def _near(a, b):
    return math.hypot(a.cx - b.cx, a.cy - b.cy) < 0.12


CONDITIONS: dict[str, Callable[[BoundingBox, BoundingBox], bool]] = {
    "inside": _inside, "above": _above, "below": _below, "left_of": _left_of,
    "right_of": _right_of, "larger_than": _larger_than, "near": _near,
}

DEFAULT_GEOMETRY = (
    ("inside", "inside"), ("above", "above"), ("below", "below"), ("left of", "left_of"),
    ("right of", "right_of"), ("larger than", "larger_than"), ("near", "near"),
)
DEFAULT_SEMANTICS = (
    ("man", "wearing", "hat", 0.8), ("woman", "wearing", "dress", 0.8),
    ("child", "wearing", "shirt", 0.8), ("man", "wearing", "shirt", 0.6),
    ("dog", "wearing", "hat", 0.5), ("cow", "wearing", "dress", 0.8),
    ("man", "riding", "horse", 0.8), ("child", "riding", "bike", 0.8),
    ("woman", "riding", "bike", 0.6), ("woman", "holding", "cup", 0.7),
    ("man", "holding", "cup", 0.6), ("child", "holding", "dog", 0.5),
)


@dataclass
class WorldSpec:
    """Vocabulary, labelling rules, box sampler and text templates of a world.

    Geometric rules are tried in order and the first match labels the pair;
    a semantic rule that fires overrides geometry, so each ordered pair
    carries at most one predicate.
    """

    object_names: tuple[str, ...] = OBJECTS
    predicate_names: tuple[str, ...] = PREDICATES
    geometric_rules: tuple[tuple[str, str], ...] = DEFAULT_GEOMETRY
    semantic_rules: tuple[tuple[str, str, str, float], ...] = DEFAULT_SEMANTICS
    min_objects: int = 3
    max_objects: int = 8
    box_size: tuple[float, float] = (0.08, 0.45)
    anchor_prob: float = 0.9  # chance a scene is seeded with a semantic-rule pair
    distinct_classes: bool = True
    template: str = "a {head} {predicate} a {tail}"
    joiner: str = " and "
    filler_prob: float = 0.0
    drop_fraction: float = 0.0
    semantic_layouts: tuple[tuple[str, str], ...] = (("wearing", "worn"), ("holding", "held"), ("riding", "ridden"))
    holdout: Optional[tuple[str, str, str]] = None
    holdout_min_text: int = 5
    seed: int = 0

    @property
    def vocab(self) -> ClassVocab:
        return ClassVocab(self.object_names, self.predicate_names)

    def validate(self):
        if not self.geometric_rules and not self.semantic_rules:
            raise ValueError("world spec has no rules")
        names = set(self.predicate_names)
        objs = set(self.object_names)
        covered = {p for p, _ in self.geometric_rules} | {r[1] for r in self.semantic_rules}
        for p, cond in self.geometric_rules:
            if p not in names:
                raise ValueError(f"geometric rule for unknown predicate {p!r}")
            if cond not in CONDITIONS:
                raise ValueError(f"unknown spatial condition {cond!r}")
        for h, p, t, prob in self.semantic_rules:
            if p not in names or h not in objs or t not in objs:
                raise ValueError(f"semantic rule {(h, p, t)} uses unknown symbols")
            if not 0.0 <= prob <= 1.0:
                raise ValueError(f"rule probability {prob} outside [0, 1]")
        missing = names - covered
        if missing:
            raise ValueError(f"predicates without a generating rule: {sorted(missing)}")
        if not 2 <= self.min_objects <= self.max_objects:
            raise ValueError("need 2 <= min_objects <= max_objects")
        if self.distinct_classes and self.max_objects > len(self.object_names):
            raise ValueError("max_objects exceeds vocabulary with distinct_classes")

    def box_priors(self) -> np.ndarray:
        """Per-class (center x, center y, log size) preferences, fixed by the seed."""
        rng = np.random.default_rng([self.seed, 7])
        n = len(self.object_names)
        lo, hi = self.box_size
        return np.stack([rng.uniform(0.2, 0.8, n), rng.uniform(0.15, 0.85, n),
                         rng.uniform(math.log(lo), math.log(hi), n)], axis=1)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        d = dict(d)
        for k in ("object_names", "predicate_names", "box_size"):
            if k in d:
                d[k] = tuple(d[k])
        if "semantic_layouts" in d:
            d["semantic_layouts"] = tuple(tuple(r) for r in d["semantic_layouts"])
        if "geometric_rules" in d:
            d["geometric_rules"] = tuple(tuple(r) for r in d["geometric_rules"])
        if "semantic_rules" in d:
            d["semantic_rules"] = tuple((h, p, t, float(pr)) for h, p, t, pr in d["semantic_rules"])
        if d.get("holdout") is not None:
            d["holdout"] = tuple(d["holdout"])
        return cls(**d)


@dataclass
class GeneratedScene:
    id: str
    graph: SceneGraph
    text: str


def sample_box(rng: np.random.Generator, prior: np.ndarray) -> BoundingBox:
    cx, cy, logs = prior
    size = math.exp(logs + rng.normal(0, 0.25))
    w = float(np.clip(size * math.exp(rng.normal(0, 0.2)), 0.02, 0.95))
    h = float(np.clip(size * math.exp(rng.normal(0, 0.2)), 0.02, 0.95))
    x = float(np.clip(cx + rng.normal(0, 0.12) - w / 2, 0.0, 1.0 - w))
    y = float(np.clip(cy + rng.normal(0, 0.12) - h / 2, 0.0, 1.0 - h))
    return BoundingBox(x, y, w, h)


def _place(kind: str, head: BoundingBox, rng: np.random.Generator) -> BoundingBox:
    """Tail box laid out relative to its head for a semantic relation."""
    if kind == "worn":
        w, h = head.w * rng.uniform(0.3, 0.6), head.h * rng.uniform(0.2, 0.45)
        x, y = head.x + rng.uniform(0, head.w - w), head.y + rng.uniform(0, head.h - h)
    elif kind == "held":
        w, h = head.w * rng.uniform(0.2, 0.4), head.h * rng.uniform(0.15, 0.3)
        side = head.x + head.w if rng.random() < 0.5 else head.x
        x, y = side - w / 2, head.y + head.h * rng.uniform(0.3, 0.6)
    elif kind == "ridden":
        w, h = head.w * rng.uniform(1.1, 1.6), head.h * rng.uniform(0.5, 0.8)
        x, y = head.cx - w / 2 + rng.normal(0, 0.02), head.y + head.h * rng.uniform(0.55, 0.75)
    else:
        raise ValueError(f"unknown layout {kind!r}")
    w, h = float(np.clip(w, 0.02, 0.95)), float(np.clip(h, 0.02, 0.95))
    return BoundingBox(float(np.clip(x, 0.0, 1.0 - w)), float(np.clip(y, 0.0, 1.0 - h)), w, h)


def semantic_labels(classes: Sequence[int], spec: WorldSpec, rng: np.random.Generator) -> dict[tuple[int, int], int]:
    """Coin flips of the semantic rules for every ordered pair."""
    vocab = spec.vocab
    pidx = {p: i for i, p in enumerate(vocab.predicate_names)}
    oidx = {o: i for i, o in enumerate(vocab.object_names)}
    sem = {}
    for h, p, t, prob in spec.semantic_rules:
        sem.setdefault((oidx[h], oidx[t]), []).append((pidx[p], prob))
    out = {}
    for i, ci in enumerate(classes):
        for j, cj in enumerate(classes):
            if i == j or (j, i) in out:
                continue
            for p, prob in sem.get((ci, cj), ()):
                if rng.random() < prob:
                    out[(i, j)] = p
                    break
    return out


def label_pairs(classes: Sequence[int], boxes: Sequence[BoundingBox], spec: WorldSpec,
                semantic: dict[tuple[int, int], int]) -> list[Triple]:
    """Semantic labels where fired, else the first matching geometric rule."""
    pidx = {p: i for i, p in enumerate(spec.predicate_names)}
    triples = []
    for i in range(len(classes)):
        for j in range(len(classes)):
            if i == j:
                continue
            label = semantic.get((i, j))
            if label is None and (j, i) not in semantic:
                for p, cond in spec.geometric_rules:
                    if CONDITIONS[cond](boxes[i], boxes[j]):
                        label = pidx[p]
                        break
            if label is not None:
                triples.append(Triple(i, label, j))
    return triples


def render_text(facts: Sequence[tuple[str, str, str]], spec: WorldSpec, rng: np.random.Generator) -> str:
    clauses = []
    for h, p, t in facts:
        c = spec.template.format(head=h, predicate=p, tail=t)
        if spec.filler_prob > 0 and rng.random() < spec.filler_prob:
            c = f"{rng.choice(FILLERS)} {c}"
        clauses.append(c)
    return spec.joiner.join(clauses)


def generate_scene(spec: WorldSpec, seed, scene_id: Optional[str] = None) -> GeneratedScene:
    """Sample objects, label pairs by the rules and render a description."""
    spec.validate()
    rng = np.random.default_rng(seed)
    vocab = spec.vocab
    n_cls = vocab.n_objects
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    classes: list[int] = []
    oidx = {o: i for i, o in enumerate(vocab.object_names)}
    if spec.semantic_rules and rng.random() < spec.anchor_prob:
        h, _, t, _ = spec.semantic_rules[int(rng.integers(len(spec.semantic_rules)))]
        classes = [oidx[h], oidx[t]] if oidx[h] != oidx[t] or not spec.distinct_classes else [oidx[h]]
    while len(classes) < n:
        c = int(rng.integers(n_cls))
        if spec.distinct_classes and c in classes:
            continue
        classes.append(c)
    classes = [classes[k] for k in rng.permutation(len(classes))]
    priors = spec.box_priors()
    boxes = [sample_box(rng, priors[c]) for c in classes]
    semantic = semantic_labels(classes, spec, rng)
    layouts = dict(spec.semantic_layouts)
    placed = set()
    for (i, j), p in sorted(semantic.items()):
        kind = layouts.get(vocab.predicate_names[p])
        if kind is not None and j not in placed and i not in placed:
            boxes[j] = _place(kind, boxes[i], rng)
            placed.add(j)
    triples = label_pairs(classes, boxes, spec, semantic)
    graph = SceneGraph(tuple(zip(classes, boxes)), tuple(triples))
    facts = sorted(graph.symbolic(vocab))
    facts = [facts[k] for k in rng.permutation(len(facts))]
    if spec.drop_fraction > 0 and facts:
        keep = rng.random(len(facts)) >= spec.drop_fraction
        facts = [f for f, k in zip(facts, keep) if k]
    text = render_text(facts, spec, rng) if facts else spec.joiner.join(
        f"a {vocab.object_names[c]}" for c in classes)
    return GeneratedScene(scene_id or str(seed), graph, text)


def generate_world(spec: WorldSpec, n_scenes: int) -> list[GeneratedScene]:
    return [generate_scene(spec, np.random.SeedSequence([spec.seed, i]), f"s{i:06d}")
            for i in range(n_scenes)]


def has_pattern(graph: SceneGraph, pattern: tuple[int, int, int]) -> bool:
    return pattern in graph.class_triples()


def holdout_relation(spec: WorldSpec, predicate: str, head: str, tail: str, min_text: int = 5) -> WorldSpec:
    """Copy of ``spec`` whose (head, predicate, tail) pattern is kept out of the parallel set."""
    if not any(r[:3] == (head, predicate, tail) and r[3] > 0 for r in spec.semantic_rules):
        raise ValueError(f"pattern {(head, predicate, tail)} is not generable by this spec")
    return dataclasses.replace(spec, holdout=(head, predicate, tail), holdout_min_text=min_text)


def pattern_index(spec: WorldSpec) -> Optional[tuple[int, int, int]]:
    if spec.holdout is None:
        return None
    v = spec.vocab
    h, p, t = spec.holdout
    return v.object_index(h), v.predicate_index(p), v.object_index(t)


@dataclass(frozen=True)
class SplitSpec:
    parallel_fraction: float = 0.01
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.parallel_fraction <= 1:
            raise ValueError("parallel_fraction must lie in (0, 1]")
        if not 0 <= self.test_fraction < 1 or self.parallel_fraction + self.test_fraction > 1:
            raise ValueError("fractions must sum to at most 1")


def make_splits(scenes: Sequence[GeneratedScene], split: SplitSpec, spec: WorldSpec) -> Dataset:
    """Random disjoint parallel / text / test partition.

    Text scenes keep only their description. With a held-out pattern in
    ``spec``, parallel scenes are drawn only from scenes without it.
    """
    n = len(scenes)
    n_par = int(round(split.parallel_fraction * n))
    n_test = int(round(split.test_fraction * n))
    if n_par < 1:
        raise ValueError(f"parallel set would be empty ({split.parallel_fraction} of {n} scenes)")
    rng = np.random.default_rng([split.seed, 404])
    order = rng.permutation(n)
    pat = pattern_index(spec)
    if pat is not None:
        clean = [i for i in order if not has_pattern(scenes[i].graph, pat)]
        if len(clean) < n_par:
            raise ValueError("not enough pattern-free scenes for the parallel set")
        par = set(clean[:n_par])
    else:
        par = set(order[:n_par].tolist())
    rest = [i for i in order if i not in par]
    test = set(rest[:n_test])
    out = []
    for i, s in enumerate(scenes):
        if i in par:
            out.append(Scene(s.id, "parallel", s.graph, s.text))
        elif i in test:
            out.append(Scene(s.id, "test", s.graph, s.text))
        else:
            out.append(Scene(s.id, "text", None, s.text))
    ds = Dataset(spec.vocab, out)
    if pat is not None:
        by_id = {s.id: s for s in scenes}
        n_text = sum(has_pattern(by_id[s.id].graph, pat) for s in ds.split("text"))
        n_tst = sum(has_pattern(s.graph, pat) for s in ds.split("test"))
        if n_text < spec.holdout_min_text:
            raise ValueError(f"text set has {n_text} held-out pattern instance(s), need {spec.holdout_min_text}")
        if n_tst == 0:
            raise ValueError("test set has no held-out pattern instance")
    return ds

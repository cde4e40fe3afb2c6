"""Domain types shared across the pipeline: vocabularies, boxes, scene graphs,
scene representation graphs and datasets, plus the JSONL dataset format."""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import dataclass, field
from itertools import permutations
from typing import Iterable, Optional, Sequence

import numpy as np

BACKGROUND = "__no_relation__"
SPLITS = ("parallel", "text", "test")


class DegenerateSceneError(ValueError):
    pass


@dataclass(frozen=True)
class ClassVocab:
    """Ordered object and predicate names.

    The background "no relation" predicate is not stored here; it always takes
    index ``len(predicate_names)`` in predicate distributions.
    """

    object_names: tuple[str, ...]
    predicate_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "object_names", tuple(self.object_names))
        object.__setattr__(self, "predicate_names", tuple(self.predicate_names))
        for kind, names in (("object", self.object_names), ("predicate", self.predicate_names)):
            if not names:
                raise ValueError(f"{kind} vocabulary is empty")
            if len(set(names)) != len(names):
                raise ValueError(f"duplicate {kind} names")
            if BACKGROUND in names:
                raise ValueError(f"{BACKGROUND!r} is reserved")

    @property
    def n_objects(self) -> int:
        return len(self.object_names)

    @property
    def n_predicates(self) -> int:
        return len(self.predicate_names)

    @property
    def background(self) -> int:
        """Index of the no-relation predicate class."""
        return len(self.predicate_names)

    @property
    def n_predicate_classes(self) -> int:
        return len(self.predicate_names) + 1

    def object_index(self, name: str) -> int:
        return self.object_names.index(name)

    def predicate_index(self, name: str) -> int:
        return self.predicate_names.index(name)

    def to_dict(self) -> dict:
        return {"objects": list(self.object_names), "predicates": list(self.predicate_names)}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassVocab":
        return cls(tuple(d["objects"]), tuple(d["predicates"]))

    @classmethod
    def load(cls, path) -> "ClassVocab":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class BoundingBox:
    """Box in unit-square normalized coordinates; (x, y) is the top-left corner."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box must have positive size, got w={self.w}, h={self.h}")

    @property
    def cx(self) -> float:
        return self.x + self.w / 2

    @property
    def cy(self) -> float:
        return self.y + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True, order=True)
class Triple:
    head: int
    predicate: int
    tail: int


@dataclass(frozen=True)
class SceneGraph:
    """Objects as (class index, box) and directed triples over object ids.

    Object ids are positions in ``objects``, so two objects may share a class.
    """

    objects: tuple[tuple[int, BoundingBox], ...]
    triples: tuple[Triple, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple((int(c), b) for c, b in self.objects))
        object.__setattr__(self, "triples", tuple(self.triples))

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    @property
    def classes(self) -> list[int]:
        return [c for c, _ in self.objects]

    @property
    def boxes(self) -> list[BoundingBox]:
        return [b for _, b in self.objects]

    def class_triples(self) -> set[tuple[int, int, int]]:
        """Triples lifted to (head class, predicate, tail class)."""
        cls = self.classes
        return {(cls[t.head], t.predicate, cls[t.tail]) for t in self.triples}

    def symbolic(self, vocab: ClassVocab) -> set[tuple[str, str, str]]:
        return {
            (vocab.object_names[h], vocab.predicate_names[p], vocab.object_names[t])
            for h, p, t in self.class_triples()
        }


def validate_scene_graph(g: SceneGraph, vocab: ClassVocab) -> list[str]:
    """Return every invariant violation of ``g``; an empty list means valid."""
    problems = []
    n = g.n_objects
    for i, (c, _) in enumerate(g.objects):
        if not 0 <= c < vocab.n_objects:
            problems.append(f"object {i}: class index {c} out of range")
    seen = set()
    for t in g.triples:
        for role, node in (("head", t.head), ("tail", t.tail)):
            if not 0 <= node < n:
                problems.append(f"triple {t}: {role} id {node} not among {n} objects")
        if t.head == t.tail:
            problems.append(f"triple {t}: head equals tail")
        if not 0 <= t.predicate < vocab.n_predicates:
            problems.append(f"triple {t}: predicate index {t.predicate} out of range")
        if t in seen:
            problems.append(f"triple {t}: duplicate")
        seen.add(t)
    return problems


@dataclass(frozen=True)
class SRGTopology:
    """Predicate slots of a fully connected SRG, one per ordered object pair."""

    n_objects: int
    pairs: tuple[tuple[int, int], ...]

    @property
    def n_predicates(self) -> int:
        return len(self.pairs)

    def heads(self) -> np.ndarray:
        return np.array([p[0] for p in self.pairs], dtype=np.int64)

    def tails(self) -> np.ndarray:
        return np.array([p[1] for p in self.pairs], dtype=np.int64)

    def slot_index(self) -> dict[tuple[int, int], int]:
        return {p: k for k, p in enumerate(self.pairs)}


def build_srg_topology(n_objects: int) -> SRGTopology:
    if n_objects < 2:
        raise DegenerateSceneError(f"degenerate scene: {n_objects} object(s), need at least 2")
    return SRGTopology(n_objects, tuple(permutations(range(n_objects), 2)))


@dataclass
class SceneRepresentationGraph:
    """Object and predicate node embeddings with predicate-node adjacency.

    ``obj_labels``/``pred_labels`` hold training targets (-1 means excluded
    from the loss).
    """

    object_embeddings: np.ndarray
    predicate_embeddings: np.ndarray
    pairs: np.ndarray  # (m, 2) head/tail object index per predicate node
    obj_labels: Optional[np.ndarray] = None
    pred_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        n, d = self.object_embeddings.shape
        m = self.pairs.shape[0]
        if self.predicate_embeddings.shape != (m, d):
            raise ValueError(
                f"predicate embeddings {self.predicate_embeddings.shape} do not match ({m}, {d})"
            )
        if m and (self.pairs.min() < 0 or self.pairs.max() >= n):
            raise ValueError("pair index out of range")
        if m and np.any(self.pairs[:, 0] == self.pairs[:, 1]):
            raise ValueError("predicate node with head == tail")

    @property
    def n(self) -> int:
        return self.object_embeddings.shape[0]

    @property
    def m(self) -> int:
        return self.pairs.shape[0]

    @property
    def dim(self) -> int:
        return self.object_embeddings.shape[1]


@dataclass
class Scene:
    """One dataset record. Text-split scenes carry only ``text``."""

    id: str
    split: str
    graph: Optional[SceneGraph] = None
    text: Optional[str] = None
    features: Optional[np.ndarray] = None

    def to_json(self, include_features: bool = False) -> str:
        rec = {
            "id": self.id,
            "split": self.split,
            "objects": [] if self.graph is None else [
                {"class": c, "box": b.as_list()} for c, b in self.graph.objects
            ],
            "triples": [] if self.graph is None else [
                [t.head, t.predicate, t.tail] for t in self.graph.triples
            ],
            "text": self.text,
        }
        if include_features and self.features is not None:
            rec["features"] = encode_array(self.features)
        return json.dumps(rec)

    @classmethod
    def from_json(cls, line: str) -> "Scene":
        rec = json.loads(line)
        graph = None
        if rec.get("objects"):
            graph = SceneGraph(
                tuple((o["class"], BoundingBox(*o["box"])) for o in rec["objects"]),
                tuple(Triple(*t) for t in rec.get("triples", [])),
            )
        feats = decode_array(rec["features"]) if "features" in rec else None
        return cls(rec["id"], rec["split"], graph, rec.get("text"), feats)


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).copy()


@dataclass
class Dataset:
    vocab: ClassVocab
    scenes: list[Scene] = field(default_factory=list)

    def __post_init__(self):
        self.check()

    def check(self):
        par = {s.id for s in self.scenes if s.split == "parallel"}
        txt = {s.id for s in self.scenes if s.split == "text"}
        if par & txt:
            raise ValueError(f"parallel and text sets overlap: {sorted(par & txt)[:5]}")
        for s in self.scenes:
            if s.split not in SPLITS:
                raise ValueError(f"scene {s.id}: unknown split {s.split!r}")
            if s.split == "parallel" and (s.graph is None or s.text is None):
                raise ValueError(f"parallel scene {s.id} needs graph and text")
            if s.split == "text" and not s.text:
                raise ValueError(f"text scene {s.id} has no text")

    def split(self, name: str) -> list[Scene]:
        return [s for s in self.scenes if s.split == name]

    def save(self, path, include_features: bool = False):
        with open(path, "w") as fh:
            for s in self.scenes:
                fh.write(s.to_json(include_features) + "\n")

    @classmethod
    def load(cls, path, vocab: ClassVocab) -> "Dataset":
        with open(path) as fh:
            return cls(vocab, [Scene.from_json(ln) for ln in fh if ln.strip()])


def ordered_unique(items: Iterable) -> list:
    seen = set()
    out = []
    for it in items:
        if it not in seen:
            seen.add(it)
            out.append(it)
    return out


def scene_seed(base_seed: int, key: str | int, *extra: int) -> np.random.SeedSequence:
    """Seed sequence keyed by a scene id so per-scene draws are order independent."""
    if isinstance(key, str):
        key = int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")
    return np.random.SeedSequence([base_seed, key, *extra])


def as_index_array(xs: Sequence[int]) -> np.ndarray:
    return np.asarray(xs, dtype=np.int64)

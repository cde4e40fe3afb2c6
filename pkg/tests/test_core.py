from collections import Counter
from itertools import product

import numpy as np
import pytest

from scenetext.core import (
    BoundingBox, ClassVocab, Dataset, DegenerateSceneError, Scene, SceneGraph, SceneRepresentationGraph,
    Triple, build_srg_topology, validate_scene_graph,
)


@pytest.fixture
def vocab():
    return ClassVocab(("man", "child", "ski slope"), ("on", "standing with"))


def box(x=0.1, y=0.1, w=0.2, h=0.2):
    return BoundingBox(x, y, w, h)


def test_topology_small():
    t = build_srg_topology(2)
    assert t.n_predicates == 2
    assert set(t.pairs) == {(0, 1), (1, 0)}
    assert build_srg_topology(3).n_predicates == 6


def test_topology_matches_enumeration():
    t = build_srg_topology(5)
    brute = [(i, j) for i, j in product(range(5), range(5)) if i != j]
    assert sorted(t.pairs) == sorted(brute)
    assert len(t.pairs) == len(set(t.pairs)) == 20
    heads = Counter(i for i, _ in t.pairs)
    assert all(heads[i] == 4 for i in range(5))


@pytest.mark.parametrize("n", [0, 1])
def test_topology_degenerate(n):
    with pytest.raises(DegenerateSceneError, match="degenerate scene"):
        build_srg_topology(n)


def test_validate(vocab):
    assert validate_scene_graph(SceneGraph(()), vocab) == []
    g = SceneGraph(((0, box()), (1, box()), (2, box())), (Triple(0, 0, 7),))
    assert len(validate_scene_graph(g, vocab)) == 1
    g = SceneGraph(((0, box()), (1, box())), (Triple(0, 1, 1), Triple(0, 1, 1)))
    assert len(validate_scene_graph(g, vocab)) == 1
    g = SceneGraph(((5, box()), (1, box())), (Triple(0, 9, 1),))
    assert len(validate_scene_graph(g, vocab)) == 2


def test_vocab_invariants():
    with pytest.raises(ValueError):
        ClassVocab(("a", "a"), ("p",))
    with pytest.raises(ValueError):
        ClassVocab((), ("p",))
    v = ClassVocab(("a", "b"), ("p", "q"))
    assert v.background == 2 and v.n_predicate_classes == 3


def test_box_invariants():
    with pytest.raises(ValueError):
        BoundingBox(0, 0, 0, 1)
    with pytest.raises(ValueError):
        BoundingBox(float("nan"), 0, 1, 1)


def test_srg_shape_checks():
    with pytest.raises(ValueError):
        SceneRepresentationGraph(np.zeros((2, 4)), np.zeros((1, 3)), [(0, 1)])
    with pytest.raises(ValueError):
        SceneRepresentationGraph(np.zeros((2, 4)), np.zeros((1, 4)), [(0, 2)])


def test_dataset_jsonl_round_trip(tmp_path, vocab):
    g = SceneGraph(((0, box()), (1, box(0.5, 0.5))), (Triple(0, 1, 1),))
    feats = np.random.default_rng(0).normal(size=(2, 4))
    ds = Dataset(vocab, [
        Scene("a", "parallel", g, "man standing with child", feats),
        Scene("b", "text", None, "child on ski slope"),
        Scene("c", "test", g, "x"),
    ])
    ds.save(tmp_path / "d.jsonl", include_features=True)
    first = (tmp_path / "d.jsonl").read_text().splitlines()[0]
    assert list(__import__("json").loads(first))[:6] == ["id", "split", "objects", "triples", "text", "features"]
    back = Dataset.load(tmp_path / "d.jsonl", vocab)
    assert [s.id for s in back.scenes] == ["a", "b", "c"]
    assert back.scenes[0].graph == g
    assert back.scenes[0].features.tobytes() == feats.tobytes()
    assert back.scenes[1].graph is None


def test_dataset_disjointness(vocab):
    g = SceneGraph(((0, box()), (1, box())), ())
    with pytest.raises(ValueError, match="overlap"):
        Dataset(vocab, [Scene("a", "parallel", g, "t"), Scene("a", "text", None, "t")])
    with pytest.raises(ValueError):
        Dataset(vocab, [Scene("a", "parallel", None, "t")])

import numpy as np
import pytest

from oracles import brute_metrics, brute_ranking, random_eval_scene
from scenetext.core import BoundingBox, SceneGraph, Triple, build_srg_topology
from scenetext.evalx import (
    RankedPrediction, evaluate, find, mean_recall_at_k, objcls_top1, per_class_report, rank_triples,
    recall_at_k, scene_matches,
)

BG = 4


def _scenes(n, seed, quantize=False):
    rng = np.random.default_rng(seed)
    return [random_eval_scene(rng, quantize=quantize) for _ in range(n)]


@pytest.mark.parametrize("quantize", [False, True])
@pytest.mark.parametrize("task", ["SGCls", "PredCls"])
@pytest.mark.parametrize("setup", ["constrained", "unconstrained"])
def test_ranking_matches_enumeration(task, setup, quantize):
    for g, po, pp in _scenes(30, 1, quantize):
        n = len(g.objects)
        pairs = np.array(build_srg_topology(n).pairs)
        got = rank_triples(po, pp, pairs, task, setup, BG, g.classes).keys(task)
        assert got == brute_ranking(po, pp, n, task, setup, BG, g.classes)


@pytest.mark.parametrize("task", ["SGCls", "PredCls"])
@pytest.mark.parametrize("setup", ["constrained", "unconstrained"])
@pytest.mark.parametrize("k", [1, 3, 50])
def test_recall_matches_oracle(task, setup, k):
    scenes = [s for s in _scenes(50, 2) if s[0].triples]
    ranked, brute = [], []
    for g, po, pp in scenes:
        n = len(g.objects)
        ranked.append(rank_triples(po, pp, np.array(build_srg_topology(n).pairs), task, setup, BG, g.classes))
        brute.append(brute_ranking(po, pp, n, task, setup, BG, g.classes))
    graphs = [s[0] for s in scenes]
    r_ref, mr_ref = brute_metrics(brute, graphs, k, task)
    assert recall_at_k(ranked, graphs, k, task).value == r_ref
    assert mean_recall_at_k([scene_matches(p, g, k, task) for p, g in zip(ranked, graphs)]) == mr_ref


def test_recall_monotone_in_k():
    scenes = _scenes(40, 3)
    graphs = [s[0] for s in scenes]
    for task in ("SGCls", "PredCls"):
        for setup in ("constrained", "unconstrained"):
            ranked = [rank_triples(po, pp, np.array(build_srg_topology(len(g.objects)).pairs), task, setup, BG,
                                   g.classes) for g, po, pp in scenes]
            vals = [recall_at_k(ranked, graphs, k, task).value for k in (1, 2, 5, 10, 50)]
            assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_constrained_at_most_unconstrained_when_k_covers_candidates():
    # n <= 4 gives at most 12 pairs x 4 labels = 48 unconstrained candidates
    for g, po, pp in _scenes(40, 6):
        if not g.triples:
            continue
        pairs = np.array(build_srg_topology(len(g.objects)).pairs)
        for task in ("SGCls", "PredCls"):
            c, u = (recall_at_k([rank_triples(po, pp, pairs, task, s, BG, g.classes)], [g], 48, task).value
                    for s in ("constrained", "unconstrained"))
            assert c <= u


def test_unconstrained_can_trail_at_small_k():
    # the second label of pair 0 outranks the only candidate of pair 1
    g = SceneGraph(((0, BoundingBox(0, 0, 1, 1)), (1, BoundingBox(1, 1, 1, 1))), (Triple(1, 0, 0),))
    pp = np.array([[0.5, 0.45, 0.05], [0.4, 0.0, 0.6]])
    pairs = np.array([(0, 1), (1, 0)])
    c = recall_at_k([rank_triples(None, pp, pairs, "PredCls", "constrained", 2, g.classes)], [g], 2, "PredCls")
    u = recall_at_k([rank_triples(None, pp, pairs, "PredCls", "unconstrained", 2, g.classes)], [g], 2, "PredCls")
    assert (c.value, u.value) == (1.0, 0.0)


def two_object_scene():
    g = SceneGraph(((0, BoundingBox(0, 0, 1, 1)), (1, BoundingBox(1, 1, 1, 1))), (Triple(0, 1, 1),))
    po = np.array([[0.9, 0.1], [0.2, 0.8]])
    return g, po


def test_perfect_and_zero_recall():
    g, po = two_object_scene()
    pairs = np.array([(0, 1), (1, 0)])
    good = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    r = rank_triples(po, good, pairs, "PredCls", "constrained", 2, g.classes)
    assert recall_at_k([r], [g], 1, "PredCls").value == 1.0
    bad = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    r = rank_triples(po, bad, pairs, "PredCls", "constrained", 2, g.classes)
    assert recall_at_k([r], [g], 50, "PredCls").value == 0.0
    # background never appears among ranked predicates
    assert 2 not in r.preds.tolist()


def test_sgcls_requires_correct_object_classes():
    g, _ = two_object_scene()
    po = np.array([[0.1, 0.9], [0.2, 0.8]])  # head misclassified
    pp = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    pairs = np.array([(0, 1), (1, 0)])
    assert recall_at_k([rank_triples(po, pp, pairs, "SGCls", "constrained", 2)], [g], 50, "SGCls").value == 0.0
    assert recall_at_k([rank_triples(po, pp, pairs, "PredCls", "constrained", 2, g.classes)], [g], 50,
                       "PredCls").value == 1.0


def test_empty_gt_scenes_skipped_and_k_validated():
    g, po = two_object_scene()
    empty = SceneGraph(g.objects)
    pp = np.full((2, 3), 1 / 3)
    r = rank_triples(po, pp, np.array([(0, 1), (1, 0)]), "PredCls", "constrained", 2, g.classes)
    res = recall_at_k([r, r], [g, empty], 50, "PredCls")
    assert res.n_scenes == 1 and res.n_skipped == 1
    with pytest.raises(ValueError):
        scene_matches(r, g, 0, "PredCls")
    with pytest.raises(ValueError):
        mean_recall_at_k([[]])


def test_mean_recall_pools_over_dataset():
    # predicate 0: 1 of 3 matched across two scenes; predicate 1: 1 of 1
    matches = [[(0, True), (0, False)], [(0, False), (1, True)]]
    assert mean_recall_at_k(matches) == pytest.approx((1 / 3 + 1) / 2)


def test_objcls_top1_ties_take_lowest_index():
    assert objcls_top1([np.array([[0.5, 0.5], [0.2, 0.8]])], [[0, 1]]) == 1.0
    assert objcls_top1([np.array([[0.5, 0.5]])], [[1]]) == 0.0


def test_ranked_prediction_round_trip():
    g, po, pp = _scenes(1, 4)[0]
    r = rank_triples(po, pp, np.array(build_srg_topology(len(g.objects)).pairs), "SGCls", "unconstrained", BG)
    back = RankedPrediction.from_dict(r.to_dict())
    assert back.keys("SGCls") == r.keys("SGCls")
    np.testing.assert_array_equal(back.scores, r.scores)


def test_evaluate_records_and_per_class_support():
    scenes = _scenes(20, 5)
    graphs = [s[0] for s in scenes]
    pairs = [np.array(build_srg_topology(len(g.objects)).pairs) for g in graphs]
    records, tables = evaluate([s[1] for s in scenes], [s[2] for s in scenes], pairs, graphs, BG, ks=(5, 50))
    assert 0.0 <= find(records, "PredCls", "constrained", 50) <= 1.0
    acc = objcls_top1([s[1] for s in scenes], [g.classes for g in graphs])
    assert find(records, "ObjCls", "top1", None, "acc") == pytest.approx(acc, abs=1e-10)
    n_gt = sum(len(set(g.triples)) for g in graphs)
    csv_text = per_class_report(tables["PredCls_constrained_R@50"], [f"p{i}" for i in range(BG)])
    rows = [line.split(",") for line in csv_text.strip().splitlines()[1:]]
    assert sum(int(r[1]) for r in rows) == n_gt

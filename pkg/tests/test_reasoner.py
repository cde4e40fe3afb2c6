import numpy as np
import pytest

from scenetext.core import BoundingBox, SceneGraph, SceneRepresentationGraph, Triple, build_srg_topology
from scenetext.features import FeatureGenConfig, synth_object_features
from scenetext.reasoner import (
    GraphBatch, ImageScene, ModelConfig, TrainConfig, batch_from_scenes, batch_from_srgs, batch_loss,
    classify, forward, init_params, predict, train_supervised,
)
from scenetext.tensor import constant, grad_check
from scenetext.evalx import objcls_top1

SMALL = ModelConfig(d=8, layers=2, heads=2, ff=16, hidden=6, obj_dropout=0.0, pred_dropout=0.0, gt_dropout=0.0)


def random_srg(rng, n, d):
    topo = build_srg_topology(n)
    m = topo.n_predicates
    return SceneRepresentationGraph(rng.normal(size=(n, d)), rng.normal(size=(m, d)), np.array(topo.pairs),
                                    rng.integers(0, 3, n), rng.integers(0, 4, m))


def run(batch: GraphBatch, store, cfg, keep_attention=False, obj=None, pred=None):
    return forward(constant(batch.obj_x if obj is None else obj), constant(batch.pred_x if pred is None else pred),
                   batch.attention_mask(), store, cfg, keep_attention=keep_attention)


def test_attention_rows_normalized_and_restricted():
    rng = np.random.default_rng(0)
    store = init_params(SMALL, 3, 4)
    batch = batch_from_srgs([random_srg(rng, 4, 8), random_srg(rng, 3, 8)])
    z = run(batch, store, SMALL, keep_attention=True)
    mask = batch.attention_mask()
    for a in z.attention:
        assert np.abs(a.sum(axis=1) - 1).max() < 1e-12
        assert (a[~mask] == 0).all()
    assert not mask[:4, 4:4 + 3].any()  # no edges across graphs


def test_masked_inputs_stay_finite():
    rng = np.random.default_rng(1)
    store = init_params(SMALL, 3, 4)
    batch = batch_from_srgs([random_srg(rng, 3, 8)])
    z = run(batch, store, SMALL, obj=np.zeros_like(batch.obj_x), pred=np.zeros_like(batch.pred_x))
    assert np.isfinite(z.z_obj.data).all() and np.isfinite(z.z_pred.data).all()
    assert z.z_obj.shape == batch.obj_x.shape and z.z_pred.shape == batch.pred_x.shape


def test_permutation_equivariance():
    rng = np.random.default_rng(2)
    n, d = 4, 8
    store = init_params(SMALL, 3, 4)
    g = random_srg(rng, n, d)
    perm = rng.permutation(n)  # new position k holds old object perm[k]
    inv = np.argsort(perm)
    old_slot = {tuple(p): k for k, p in enumerate(g.pairs.tolist())}
    new_pairs = np.array(build_srg_topology(n).pairs)
    pred_src = [old_slot[(perm[i], perm[j])] for i, j in new_pairs]
    g2 = SceneRepresentationGraph(g.object_embeddings[perm], g.predicate_embeddings[pred_src], new_pairs)
    z1 = run(batch_from_srgs([g]), store, SMALL)
    z2 = run(batch_from_srgs([g2]), store, SMALL)
    np.testing.assert_allclose(z2.z_obj.data[inv], z1.z_obj.data, atol=1e-9)
    back = np.empty_like(z2.z_pred.data)
    back[pred_src] = z2.z_pred.data
    np.testing.assert_allclose(back, z1.z_pred.data, atol=1e-9)


def test_dimension_mismatch():
    store = init_params(SMALL, 3, 4)
    batch = batch_from_srgs([random_srg(np.random.default_rng(0), 3, 6)])
    with pytest.raises(ValueError):
        run(batch, store, SMALL)


def test_classify_properties():
    rng = np.random.default_rng(3)
    store = init_params(SMALL, 3, 5)
    z = run(batch_from_srgs([random_srg(rng, 3, 8)]), store, SMALL)
    po, pp = classify(z, store)
    assert np.abs(po.sum(1) - 1).max() < 1e-12 and np.abs(pp.sum(1) - 1).max() < 1e-12
    logits = z.z_pred.data @ store["head.pred"].data.T
    brute = [max(range(5), key=lambda c: row[c]) for row in logits]
    assert list(pp.argmax(1)) == brute
    store["head.obj"].data[:] = 0
    store["head.pred"].data[:] = 0
    po, pp = classify(z, store)
    np.testing.assert_allclose(po, 1 / 3)
    np.testing.assert_allclose(pp, 1 / 5)


def scene(rng, n):
    boxes = [BoundingBox(*rng.uniform(0.05, 0.5, 2), *rng.uniform(0.1, 0.4, 2)) for _ in range(n)]
    classes = rng.integers(0, 3, n)
    triples = {Triple(int(i), int(rng.integers(0, 3)), int(j))
               for i in range(n) for j in range(n) if i != j and rng.random() < 0.4}
    return SceneGraph(tuple(zip(classes, boxes)), tuple(sorted(triples)))


@pytest.mark.parametrize("seed", range(3))
def test_full_pipeline_grad_check(seed):
    rng = np.random.default_rng(seed)
    g = scene(rng, 3)
    feats = rng.normal(size=(3, 8))
    store = init_params(ModelConfig(d=8, layers=2, heads=2, ff=16, hidden=6, seed=seed), 3, 4)
    batch = batch_from_scenes([ImageScene(g, feats)], background=3)
    rep = grad_check(lambda st: batch_loss(batch, st, SMALL)[0], store, h=1e-5)
    assert rep.max_rel_error < 1e-4, (rep.worst_param, rep.max_rel_error)


def test_background_subsampling():
    rng = np.random.default_rng(4)
    g = SceneGraph(tuple((0, BoundingBox(0.1 * i, 0.1, 0.1, 0.1)) for i in range(6)), (Triple(0, 1, 2),))
    b = batch_from_scenes([ImageScene(g, rng.normal(size=(6, 8)))], 3, bg_ratio=3.0, rng=rng)
    assert b.pred_weight.sum() == 4  # one labelled slot + 3 background
    assert b.pred_weight[b.pred_labels != 3].all()


def separable_world(n_scenes, seed, feature_seed=0):
    rng = np.random.default_rng(seed)
    fcfg = FeatureGenConfig.random(3, 8, noise_sigma=0.1, seed=feature_seed)
    out = []
    for k in range(n_scenes):
        g = scene(rng, int(rng.integers(3, 5)))
        out.append(ImageScene(g, synth_object_features(g, fcfg, f"{seed}-{k}"), f"{seed}-{k}"))
    return out


def test_training_decreases_loss_and_is_deterministic():
    data = separable_world(12, 0)
    cfg = ModelConfig(d=8, layers=1, heads=2, ff=16, hidden=8)
    tcfg = TrainConfig(epochs=8, batch_size=4, lr=5e-3, seed=1)
    h1 = train_supervised(data, init_params(cfg, 3, 4), cfg, tcfg, background=3)
    h2 = train_supervised(data, init_params(cfg, 3, 4), cfg, tcfg, background=3)
    assert h1 == h2
    assert sum(h1[-1]) < sum(h1[0])
    with pytest.raises(ValueError):
        train_supervised([], init_params(cfg, 3, 4), cfg, tcfg, background=3)


def test_objcls_after_training():
    train, held = separable_world(30, 0), separable_world(20, 99)
    cfg = ModelConfig(d=8, layers=1, heads=2, ff=16, hidden=8)
    store = init_params(cfg, 3, 4)
    train_supervised(train, store, cfg, TrainConfig(epochs=10, batch_size=4, lr=5e-3), background=3)
    preds = predict(held, store, cfg, background=3)
    assert objcls_top1([p.obj_probs for p in preds], [s.graph.classes for s in held]) > 0.9

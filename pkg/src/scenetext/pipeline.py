"""End-to-end experiment: world -> splits -> supervised training -> grounding ->
text fine-tuning (per mode) -> evaluation."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Dataset
from .evalx import evaluate
from .features import FeatureGenConfig, predicate_init, spatial_matrix, synth_object_features
from .grounding import CanonicalEmbeddings, train_canonical
from .reasoner import ImageScene, ModelConfig, TrainConfig, init_params, predict, train_supervised
from .tensor import ParamStore
from .textdae import FinetuneConfig, FinetuneResult, MaskConfig, finetune_from_triples
from .textgraph import make_extractor
from .worldgen import GeneratedScene, SplitSpec, WorldSpec, generate_world, holdout_relation, make_splits

log = logging.getLogger(__name__)

MODES = ("BASE", "TXM", "GT", "FULL")


@dataclass
class GroundConfig:
    epochs: int = 30
    lr: float = 1e-2
    batch_size: int = 64
    init: str = "mean"  # or "glorot"


@dataclass
class ExperimentConfig:
    modes: tuple[str, ...] = ("BASE", "TXM", "GT")
    seed: int = 0
    n_scenes: int = 1000
    world: WorldSpec = field(default_factory=WorldSpec)
    split: SplitSpec = field(default_factory=SplitSpec)
    noise_sigma: float = 0.15
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ground: GroundConfig = field(default_factory=GroundConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    extractor: str = "rules"
    ks: tuple[int, ...] = (50, 100)

    def __post_init__(self):
        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise ValueError(f"unknown mode(s) {bad}; expected a subset of {MODES}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {sorted(unknown)}")
        kw = {}
        if "modes" in d:
            kw["modes"] = tuple(d["modes"])
        for k in ("seed", "n_scenes", "noise_sigma", "extractor"):
            if k in d:
                kw[k] = d[k]
        if "ks" in d:
            kw["ks"] = tuple(int(k) for k in d["ks"])
        if "world" in d:
            w = dict(d["world"])
            hold = w.pop("holdout", None)
            kw["world"] = WorldSpec.from_dict(w)
            if hold is not None:
                kw["world"] = holdout_relation(kw["world"], hold[1], hold[0], hold[2],
                                               w.get("holdout_min_text", 5))
        if "split" in d:
            kw["split"] = SplitSpec(**d["split"])
        if "model" in d:
            kw["model"] = ModelConfig(**d["model"])
        if "train" in d:
            kw["train"] = TrainConfig(**d["train"])
        if "ground" in d:
            kw["ground"] = GroundConfig(**d["ground"])
        if "finetune" in d:
            f = dict(d["finetune"])
            mask = f.pop("mask", {})
            kw["finetune"] = FinetuneConfig(mask=MaskConfig(**mask), **f)
        return cls(**kw)


def to_image_scenes(scenes, fcfg: FeatureGenConfig) -> list[ImageScene]:
    return [ImageScene(s.graph, synth_object_features(s.graph, fcfg, s.id), s.id) for s in scenes]


def predicate_features(scenes: Sequence[ImageScene], store: ParamStore) -> tuple[np.ndarray, np.ndarray]:
    """MLP(t) features and labels of every annotated pair (background excluded)."""
    feats, labels = [], []
    for s in scenes:
        if not s.graph.triples:
            continue
        pairs = np.array([(t.head, t.tail) for t in s.graph.triples])
        feats.append(predicate_init(spatial_matrix(s.graph.boxes, pairs), store).data)
        labels.extend(t.predicate for t in s.graph.triples)
    d = store["lambda.w2"].shape[1]
    return (np.concatenate(feats) if feats else np.zeros((0, d))), np.array(labels, dtype=np.int64)


def ground(scenes: Sequence[ImageScene], store: ParamStore, n_obj: int, n_pred: int,
           gcfg: GroundConfig, seed: int) -> CanonicalEmbeddings:
    ox = np.concatenate([s.features for s in scenes])
    oy = np.concatenate([s.graph.classes for s in scenes])
    px, py = predicate_features(scenes, store)
    return train_canonical(ox, oy, px, py, n_obj, n_pred, gcfg.epochs, seed, gcfg.lr, gcfg.batch_size,
                           init=gcfg.init)


@dataclass
class ModeResult:
    mode: str
    records: list[dict]
    tables: dict
    store: ParamStore
    loss_log: list
    extra: dict = field(default_factory=dict)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    dataset: Dataset
    world: list[GeneratedScene]
    embeddings: CanonicalEmbeddings
    modes: dict[str, ModeResult]
    timings: dict[str, float]


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    t0 = time.perf_counter()
    timings = {}
    spec = cfg.world
    vocab = spec.vocab
    world = generate_world(spec, cfg.n_scenes)
    ds = make_splits(world, cfg.split, spec)
    by_id = {s.id: s for s in world}
    fcfg = FeatureGenConfig.random(vocab.n_objects, cfg.model.d, cfg.noise_sigma, cfg.seed)
    parallel = to_image_scenes(ds.split("parallel"), fcfg)
    test = to_image_scenes(ds.split("test"), fcfg)
    timings["data"] = time.perf_counter() - t0

    def evaluate_store(store):
        preds = predict(test, store, cfg.model, vocab.background)
        return evaluate([p.obj_probs for p in preds], [p.pred_probs for p in preds],
                        [p.pairs for p in preds], [s.graph for s in test], vocab.background, cfg.ks)

    base = init_params(cfg.model, vocab.n_objects, vocab.n_predicate_classes)
    tcfg = dataclasses.replace(cfg.train, seed=cfg.train.seed + cfg.seed)
    hist = train_supervised(parallel, base, cfg.model, tcfg, vocab.background)
    timings["supervised"] = time.perf_counter() - t0
    emb = ground(parallel, base, vocab.n_objects, vocab.n_predicates, cfg.ground, cfg.seed)
    timings["ground"] = time.perf_counter() - t0

    results: dict[str, ModeResult] = {}
    recs, tabs = evaluate_store(base)
    results["BASE"] = ModeResult("BASE", recs, tabs, base, [(e, lo, lp) for e, (lo, lp) in enumerate(hist)])

    text_scenes = ds.split("text")
    fcfg_ft = dataclasses.replace(cfg.finetune, seed=cfg.finetune.seed + cfg.seed)
    for mode in cfg.modes:
        if mode == "BASE":
            continue
        if mode == "FULL":
            full = to_image_scenes([by_id[s.id] for s in ds.scenes if s.split != "test"], fcfg)
            store = init_params(cfg.model, vocab.n_objects, vocab.n_predicate_classes)
            h = train_supervised(full, store, cfg.model, tcfg, vocab.background)
            recs, tabs = evaluate_store(store)
            results[mode] = ModeResult(mode, recs, tabs, store, [(e, lo, lp) for e, (lo, lp) in enumerate(h)])
        else:
            if mode == "TXM":
                extractor = make_extractor(cfg.extractor, vocab)
                sentences = [extractor(s.text) for s in text_scenes]
            else:
                sentences = [by_id[s.id].graph.symbolic(vocab) for s in text_scenes]
            store = base.copy()
            ft: FinetuneResult = finetune_from_triples(sentences, vocab, emb, store, cfg.model, fcfg_ft)
            recs, tabs = evaluate_store(store)
            results[mode] = ModeResult(mode, recs, tabs, store, ft.history,
                                       {"fragments": ft.n_fragments,
                                        "skipped_triples": ft.report.skipped_triples,
                                        "skipped_sentences": ft.report.skipped_sentences})
        timings[mode] = time.perf_counter() - t0
    return ExperimentResult(cfg, ds, world, emb, results, timings)

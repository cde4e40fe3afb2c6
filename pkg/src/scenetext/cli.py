"""Command-line entry points: run, extract, datagen, eval.

Set ``SCENETEXT_LOG`` (e.g. ``INFO``) to change the log level.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
from importlib import metadata
from pathlib import Path

import numpy as np
import yaml

from .core import ClassVocab, Dataset
from .evalx import (
    SETUPS, find, mean_recall_at_k, metric_record, objcls_top1, per_class_report, rank_triples, recall_at_k,
    scene_matches,
)
from .features import FeatureGenConfig, synth_object_features
from .grounding import export_embeddings
from .pipeline import MODES, ExperimentConfig, ExperimentResult, run_experiment, to_image_scenes
from .reasoner import predict
from .tensor import save_checkpoint
from .textgraph import EXTRACTORS, extraction_prf, make_extractor, read_corpus_line, serialize, to_text
from .worldgen import generate_world, make_splits

log = logging.getLogger("scenetext")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class ConfigError(Exception):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def load_config(path, mode: str | None = None, seed: int | None = None) -> ExperimentConfig:
    """Read a YAML (or JSON) experiment config, applying command-line overrides."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from e
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    raw = dict(raw)
    raw.pop("out", None)
    if mode is not None:
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
        raw["modes"] = ["BASE"] if mode == "BASE" else ["BASE", mode]
    if seed is not None:
        raw["seed"] = seed
    try:
        cfg = ExperimentConfig.from_dict(raw)
        cfg.world.validate()
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"invalid config: {e}") from e
    if cfg.extractor not in EXTRACTORS:
        raise ConfigError(f"unknown extractor {cfg.extractor!r}")
    return cfg


def config_hash(cfg: ExperimentConfig) -> str:
    canon = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _version(pkg: str) -> str:
    try:
        return metadata.version(pkg)
    except metadata.PackageNotFoundError:
        return "unknown"


def manifest(cfg: ExperimentConfig) -> dict:
    return {
        "config_hash": config_hash(cfg),
        "config": cfg.to_dict(),
        "seeds": {
            "experiment": cfg.seed,
            "world": cfg.world.seed,
            "split": cfg.split.seed,
            "train": cfg.train.seed + cfg.seed,
            "finetune": cfg.finetune.seed + cfg.seed,
            "model_init": cfg.model.seed,
        },
        "versions": {
            "artifact": _version("artifact"),
            "python": platform.python_version(),
            "numpy": np.__version__,
            "pyyaml": yaml.__version__,
        },
    }


def _loss_csv(mode: str, rows) -> str:
    header = "epoch,l_o,l_p" if mode in ("BASE", "FULL") else "epoch,loss,masked_acc"
    return header + "\n" + "".join(f"{int(e)},{a!r},{b!r}\n" for e, a, b in rows)


SUMMARY_COLUMNS = (
    ("PredCls", "constrained", 50, "R"), ("PredCls", "constrained", 100, "R"),
    ("SGCls", "constrained", 50, "R"), ("SGCls", "constrained", 100, "R"),
    ("PredCls", "constrained", 50, "mR"), ("ObjCls", "top1", None, "acc"),
)


def _col_name(task, setup, k, metric) -> str:
    return f"{task} {metric}" if k is None else f"{task} {metric}@{k}"


def summarize(res: ExperimentResult) -> tuple[dict, str]:
    """Mode comparison as JSON plus an aligned text table; deltas are against BASE."""
    base = res.modes["BASE"].records
    rows = []
    for mode, mr in res.modes.items():
        row = {"mode": mode}
        for col in SUMMARY_COLUMNS:
            try:
                v = find(mr.records, *col)
            except KeyError:
                continue
            row[_col_name(*col)] = v
            if mode != "BASE":
                row[f"delta {_col_name(*col)}"] = round(v - find(base, *col), 10)
        rows.append(row)
    cols = [_col_name(*c) for c in SUMMARY_COLUMNS]
    lines = [f"{'mode':<6}" + "".join(f"{c:>16}" for c in cols)]
    for row in rows:
        cells = []
        for c in cols:
            if c not in row:
                cells.append(f"{'-':>16}")
                continue
            s = f"{100 * row[c]:.2f}"
            if f"delta {c}" in row:
                s += f" ({100 * row[f'delta {c}']:+.2f})"
            cells.append(f"{s:>16}")
        lines.append(f"{row['mode']:<6}" + "".join(cells))
    return {"rows": rows, "units": "fractions; deltas vs BASE"}, "\n".join(lines) + "\n"


def prediction_lines(res: ExperimentResult, mode: str) -> str:
    """Per test scene: id, pair list and the class distributions."""
    cfg = res.config
    vocab = cfg.world.vocab
    fcfg = FeatureGenConfig.random(vocab.n_objects, cfg.model.d, cfg.noise_sigma, cfg.seed)
    test = to_image_scenes(res.dataset.split("test"), fcfg)
    preds = predict(test, res.modes[mode].store, cfg.model, vocab.background)
    out = []
    for s, p in zip(test, preds):
        out.append(json.dumps({"id": s.id, "pairs": p.pairs.tolist(), "obj_probs": p.obj_probs.tolist(),
                               "pred_probs": p.pred_probs.tolist()}))
    return "\n".join(out) + "\n"


def write_run(res: ExperimentResult, out: Path):
    cfg = res.config
    vocab = cfg.world.vocab
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "manifest.json", _dump(manifest(cfg)))
    _write(out / "vocab.json", _dump(vocab.to_dict()))
    res.dataset.save(out / "dataset.jsonl")
    _write(out / "embeddings" / "objects.csv", export_embeddings(res.embeddings.obj, vocab.object_names))
    _write(out / "embeddings" / "predicates.csv", export_embeddings(res.embeddings.pred, vocab.predicate_names))
    metrics = {}
    for mode, mr in res.modes.items():
        d = out / mode
        save_checkpoint(mr.store, d / "checkpoint", {"mode": mode, "config_hash": config_hash(cfg)})
        _write(d / "loss.csv", _loss_csv(mode, mr.loss_log))
        for key, table in sorted(mr.tables.items()):
            names = vocab.object_names if key.startswith("ObjCls") else vocab.predicate_names
            _write(d / "per_class" / f"{key.replace('@', '_at_')}.csv", per_class_report(table, names))
        _write(d / "predictions.jsonl", prediction_lines(res, mode))
        metrics[mode] = {"records": mr.records, **({"text": mr.extra} if mr.extra else {})}
    _write(out / "metrics.json", _dump(metrics))
    summary, table = summarize(res)
    _write(out / "summary.json", _dump(summary))
    _write(out / "summary.txt", table)
    return table


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config, args.mode, args.seed)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out) if args.out else Path("runs") / config_hash(cfg)[:12]
    try:
        res = run_experiment(cfg)
        table = write_run(res, out)
    except Exception as e:  # noqa: BLE001 -- any failure inside the pipeline is a runtime error
        log.exception("run failed")
        print(f"error: run failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    for k, v in res.timings.items():
        log.info("timing %s: %.1fs", k, v)
    print(table, end="")
    print(f"artifacts written to {out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    try:
        vocab = ClassVocab.load(args.vocab)
        extractor = make_extractor(args.extractor, vocab)
        lines = Path(args.corpus).read_text().splitlines()
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    preds, malformed, scores = [], [], []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            text, ref = read_corpus_line(line)
        except (ValueError, KeyError, TypeError) as e:
            malformed.append({"line": n, "error": str(e)})
            log.warning("line %d: %s", n, e)
            continue
        got = extractor(text)
        rec = {"line": n, "text": text, "graph": to_text(serialize(got))}
        if ref is not None:
            rec["prf"] = list(extraction_prf(got, ref))
            scores.append(rec["prf"])
        preds.append(rec)
    report = {"extractor": args.extractor, "n_lines": len(preds) + len(malformed), "n_predicted": len(preds),
              "malformed": malformed}
    if scores:
        p, r, f = np.mean(np.array(scores), axis=0).tolist()
        report.update({"n_scored": len(scores), "precision": p, "recall": r, "f1": f})
    out = Path(args.out)
    _write(out / "predictions.jsonl", "".join(json.dumps(p) + "\n" for p in preds))
    _write(out / "extract_report.json", _dump(report))
    print(_dump(report), end="")
    return EXIT_OK


def cmd_datagen(args) -> int:
    try:
        cfg = load_config(args.spec)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        world = generate_world(cfg.world, cfg.n_scenes)
        ds = make_splits(world, cfg.split, cfg.world)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    vocab = cfg.world.vocab
    if args.features:
        fcfg = FeatureGenConfig.random(vocab.n_objects, cfg.model.d, cfg.noise_sigma, cfg.seed)
        ds = Dataset(vocab, [dataclasses.replace(s, features=synth_object_features(s.graph, fcfg, s.id))
                             if s.graph is not None else s for s in ds.scenes])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save(out, include_features=args.features)
    _write(out.with_name("vocab.json"), _dump(vocab.to_dict()))
    counts = {k: len(ds.split(k)) for k in ("parallel", "text", "test")}
    print(json.dumps({"out": str(out), **counts}))
    return EXIT_OK


def _parse_ks(s: str) -> list[int]:
    try:
        ks = [int(k) for k in s.split(",") if k.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad K list {s!r}")
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("K values must be positive integers")
    return ks


def cmd_eval(args) -> int:
    gt_path = Path(args.gt)
    vocab_path = Path(args.vocab) if args.vocab else gt_path.with_name("vocab.json")
    try:
        vocab = ClassVocab.load(vocab_path)
        gts = {s.id: s.graph for s in Dataset.load(gt_path, vocab).scenes if s.graph is not None}
        preds = [json.loads(ln) for ln in Path(args.pred).read_text().splitlines() if ln.strip()]
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    missing = [p["id"] for p in preds if p["id"] not in gts]
    if missing:
        print(f"error: {len(missing)} prediction(s) without ground truth, e.g. {missing[0]}", file=sys.stderr)
        return EXIT_CONFIG
    graphs = [gts[p["id"]] for p in preds]
    if args.task == "ObjCls":
        acc = objcls_top1([np.array(p["obj_probs"]) for p in preds], [g.classes for g in graphs])
        records = [metric_record("ObjCls", "top1", None, acc, len(graphs), "acc")]
    else:
        ranked = [
            rank_triples(np.array(p["obj_probs"]), np.array(p["pred_probs"]), np.array(p["pairs"]), args.task,
                         args.setup, vocab.background, g.classes) for p, g in zip(preds, graphs)]
        records = []
        for k in args.k:
            r = recall_at_k(ranked, graphs, k, args.task)
            records.append(metric_record(args.task, args.setup, k, r.value, r.n_scenes, "R"))
            matches = [scene_matches(p, g, k, args.task) for p, g in zip(ranked, graphs)]
            if any(matches):
                records.append(metric_record(args.task, args.setup, k, mean_recall_at_k(matches), r.n_scenes, "mR"))
    print(_dump(records), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scenetext", description="Scene graphs from images plus text.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--mode", help="evaluate BASE plus this mode only")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="run directory (default runs/<config hash>)")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("extract", help="extract graphs from a text corpus")
    e.add_argument("--corpus", required=True, help="JSONL lines with 'text' and optional 'graph'")
    e.add_argument("--vocab", required=True, help="vocab JSON with 'objects' and 'predicates'")
    e.add_argument("--extractor", default="rules", choices=sorted(EXTRACTORS))
    e.add_argument("--out", default=".", help="output directory")
    e.set_defaults(func=cmd_extract)

    d = sub.add_parser("datagen", help="generate a synthetic world and its splits")
    d.add_argument("--spec", required=True, help="experiment config; its world/split/n_scenes are used")
    d.add_argument("--out", required=True, help="dataset JSONL path; vocab.json is written alongside")
    d.add_argument("--features", action="store_true", help="embed synthetic object features")
    d.set_defaults(func=cmd_datagen)

    v = sub.add_parser("eval", help="score saved predictions against a dataset")
    v.add_argument("--pred", required=True, help="predictions JSONL (as written by run)")
    v.add_argument("--gt", required=True, help="dataset JSONL")
    v.add_argument("--vocab", help="vocab JSON (default: vocab.json next to --gt)")
    v.add_argument("--task", required=True, choices=("SGCls", "PredCls", "ObjCls"))
    v.add_argument("--setup", default="constrained", choices=SETUPS)
    v.add_argument("--k", type=_parse_ks, default=[50, 100])
    v.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SCENETEXT_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

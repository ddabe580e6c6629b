"""Command-line interface.

    sg2vec gen | extract | train | cv | eval | transfer | bench | config dump

Settings come from built-in defaults, then a config file (``--config`` or
the ``SGC_CONFIG`` environment variable, JSON or YAML), then flags. Every
command writes its artifacts and a ``manifest.json`` into ``--out``.
Exit status: 0 success, 2 usage error, 1 runtime failure.
"""

import argparse
import json
import logging
import os
import platform
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import yaml

from . import __version__
from .datagen import ScenarioConfig, generate_dataset, validate_dataset
from .dataset import load_calibration, load_jsonl, save_jsonl
from .metrics import curves_csv
from .model import (
    ABLATIONS, PRESETS, ModelConfig, StreamingPredictor, load_checkpoint, save_checkpoint,
)
from .scene_graph import ExtractionConfig, SchemaError, extract_clip, scene_graph_cache, to_relation_tensors
from .training import (
    ClipData, TrainConfig, cross_validate, evaluate, train, transfer_eval,
)

log = logging.getLogger("sg2vec")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    SECTIONS = ("scenario", "extraction", "model", "train")

    def to_dict(self):
        out = {}
        for name in self.SECTIONS:
            section = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise UsageError("config file must hold a mapping of sections")
        unknown = set(data) - set(cls.SECTIONS)
        if unknown:
            raise UsageError(f"unknown config section(s): {sorted(unknown)}")
        run = cls()
        for name in cls.SECTIONS:
            values = data.get(name) or {}
            run = replace(run, **{name: _update(getattr(run, name), values, name)})
        return run


def _update(obj, values, section):
    if not isinstance(values, dict):
        raise UsageError(f"config section {section!r} must be a mapping")
    known = {f.name for f in fields(obj)}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return replace(obj, **values)
    except (TypeError, ValueError) as err:
        raise UsageError(f"[{section}] {err}") from err


def load_run_config(path):
    if path is None:
        return RunConfig()
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    with open(path) as fh:
        text = fh.read()
    if path.endswith(".json"):
        data = json.loads(text)
    else:
        data = yaml.safe_load(text)
    return RunConfig.from_dict(data or {})


# ----------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------

def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return _jsonable(float(obj))
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _manifest(args, run, outputs, extra=None):
    m = {
        "command": args.command,
        "argv": list(args.argv),
        "seed": args.seed,
        "version": __version__,
        "config": run.to_dict(),
        "outputs": sorted(outputs),
    }
    if extra:
        m.update(extra)
    return m


def _dataset_path(path):
    if os.path.isdir(path):
        path = os.path.join(path, "dataset.jsonl")
    if not os.path.exists(path):
        raise UsageError(f"dataset not found: {path}")
    return path


def _extract_one(item):
    clip, cfg = item
    return to_relation_tensors(extract_clip(clip, cfg), cfg.vocab)


def _load_data(path, extraction, calibration=None, jobs=1):
    calib = load_calibration(calibration) if calibration else None
    clips = load_jsonl(_dataset_path(path), calib, extraction.vocab)
    if not clips:
        raise UsageError(f"dataset {path} holds no clips")
    items = [(c, extraction) for c in clips]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            graphs = list(ex.map(_extract_one, items, chunksize=16))
    else:
        graphs = [_extract_one(it) for it in items]
    return ClipData(graphs, np.array([c.label for c in clips], dtype=int),
                    [c.clip_id for c in clips], tuple(extraction.vocab)), clips


def _report_dict(report, per_clip):
    d = report.to_dict()
    if not per_clip:
        d.pop("clip_level", None)
        for f in d.get("folds", []):
            f.pop("clip_level", None)
    return d


def _predictions_csv(data, traces, folds=None):
    rows = []
    folds = [None] * len(traces) if folds is None else folds
    for cid, y, t, fold in zip(data.clip_ids, data.labels, traces, folds):
        for k, (p, d) in enumerate(zip(t.collision_prob, t.decisions)):
            rows.append({"clip_id": cid, "fold": fold, "frame": k, "label": int(y),
                         "p_collision": f"{p:.6f}", "decision": int(d)})
    columns = ["clip_id", "frame", "label", "p_collision", "decision"]
    if folds[0] is not None:
        columns.insert(1, "fold")
    return curves_csv(rows, columns)


def _print_report(report, per_clip):
    print(report.table())
    if per_clip and report.clip_level:
        c = report.clip_level
        print(f"clip-level majority vote: accuracy {c['accuracy']:.4f}  mcc {c['mcc']:.4f}")


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def cmd_gen(args, run):
    clips, manifest = generate_dataset(run.scenario)
    path = os.path.join(args.out, "dataset.jsonl")
    save_jsonl(clips, path)
    check = validate_dataset(path, run.extraction.vocab)
    if not check.ok:
        raise RuntimeError("generated dataset failed validation: " + "; ".join(check.errors[:5]))
    _write_json(os.path.join(args.out, "manifest.json"),
                _manifest(args, run, ["dataset.jsonl"], {"dataset": manifest}))
    s = manifest["statistics"]
    print(f"{s['n_clips']} clips ({s['n_collision']} collision, {s['n_no_collision']} "
          f"no collision), {s['frames_total']} frames, mean length {s['frames_mean']:.1f}")
    print(f"wrote {path}")


def cmd_extract(args, run):
    calib = load_calibration(args.calibration) if args.calibration else None
    clips = load_jsonl(_dataset_path(args.data), calib, run.extraction.vocab)
    path = os.path.join(args.out, "scene_graphs.jsonl")
    n_edges = 0
    with open(path, "w") as fh:
        for clip in clips:
            graphs = extract_clip(clip, run.extraction)
            n_edges += sum(len(g.edges) for g in graphs)
            fh.write(json.dumps(scene_graph_cache(clip, graphs), sort_keys=True,
                                separators=(",", ":")))
            fh.write("\n")
    _write_json(os.path.join(args.out, "manifest.json"),
                _manifest(args, run, ["scene_graphs.jsonl"], {"dataset": args.data}))
    print(f"extracted {len(clips)} clips, {n_edges} edges -> {path}")


def cmd_train(args, run):
    data, _ = _load_data(args.data, run.extraction, args.calibration, args.jobs)
    result = train(data, run.model, run.train)
    ckpt = os.path.join(args.out, "model.ckpt")
    size = save_checkpoint(ckpt, result.params, run.model, data.vocab,
                           {"best_epoch": result.best_epoch, "seed": run.train.seed})
    columns = ["epoch", "train_loss"] + (["val_loss"] if result.curve and "val_loss" in result.curve[0] else [])
    with open(os.path.join(args.out, "curve.csv"), "w") as fh:
        fh.write(curves_csv(result.curve, columns))
    report, _ = evaluate(data, result.params, run.model)
    _write_json(os.path.join(args.out, "train_report.json"), _report_dict(report, args.per_clip))
    _write_json(os.path.join(args.out, "manifest.json"),
                _manifest(args, run, ["model.ckpt", "curve.csv", "train_report.json"],
                          {"dataset": args.data, "best_epoch": result.best_epoch,
                           "class_weights": result.class_weights,
                           "n_parameters": len(result.params)}))
    print(f"trained {len(result.params)} parameters, best epoch {result.best_epoch}, "
          f"checkpoint {size / 1024:.1f} KB -> {ckpt}")


def cmd_cv(args, run):
    data, _ = _load_data(args.data, run.extraction, args.calibration, args.jobs)
    result = cross_validate(data, run.model, run.train, jobs=args.jobs)
    outputs = ["report.json", "report.txt", "curves.csv", "predictions.csv"]
    rows = []
    for split, res in zip(result.folds, result.fold_results):
        name = f"fold{split.fold_id}.ckpt"
        save_checkpoint(os.path.join(args.out, name), res.params, run.model, data.vocab,
                        {"fold_id": split.fold_id, "best_epoch": res.best_epoch,
                         "seed": run.train.seed})
        outputs.append(name)
        for r in res.curve:
            rows.append({"fold": split.fold_id, "epoch": r["epoch"], "train_loss": r["train_loss"],
                         "val_loss": r.get("val_loss", "")})
    with open(os.path.join(args.out, "curves.csv"), "w") as fh:
        fh.write(curves_csv(rows, ["fold", "epoch", "train_loss", "val_loss"]))
    order = np.concatenate([s.test for s in result.folds])
    traces = [t for ts in result.fold_traces for t in ts]
    with open(os.path.join(args.out, "predictions.csv"), "w") as fh:
        fold_of = [s.fold_id for s in result.folds for _ in s.test]
        fh.write(_predictions_csv(data.subset(order), traces, fold_of))
    report = _report_dict(result.report, args.per_clip)
    _write_json(os.path.join(args.out, "report.json"), report)
    with open(os.path.join(args.out, "report.txt"), "w") as fh:
        fh.write(result.report.table() + "\n")
    _write_json(os.path.join(args.out, "manifest.json"),
                _manifest(args, run, outputs,
                          {"dataset": args.data,
                           "folds": [s.to_dict() for s in result.folds],
                           "best_epochs": [r.best_epoch for r in result.fold_results],
                           "metrics": {"mcc": result.report.mcc, "auc": result.report.auc,
                                       "accuracy": result.report.accuracy,
                                       "atp_ratio": result.report.atp_ratio}}))
    _print_report(result.report, args.per_clip)


def _evaluate_checkpoint(args, run):
    ckpt = load_checkpoint(args.checkpoint)
    calib = load_calibration(args.calibration) if args.calibration else None
    clips = load_jsonl(_dataset_path(args.data), calib)
    found = {o.cls for c in clips for f in c.frames for o in f.objects}
    unknown = sorted(found - set(ckpt.vocab))
    if unknown:
        raise SchemaError(f"vocabulary mismatch: dataset classes {unknown} are not in the "
                          f"checkpoint vocabulary {list(ckpt.vocab)}")
    extraction = replace(run.extraction, vocab=ckpt.vocab)
    graphs = [_extract_one((c, extraction)) for c in clips]
    data = ClipData(graphs, np.array([c.label for c in clips], dtype=int),
                    [c.clip_id for c in clips], ckpt.vocab)
    report, traces = transfer_eval(ckpt.params, ckpt.config, ckpt.vocab, data)
    _write_json(os.path.join(args.out, "report.json"), _report_dict(report, args.per_clip))
    with open(os.path.join(args.out, "predictions.csv"), "w") as fh:
        fh.write(_predictions_csv(data, traces))
    _write_json(os.path.join(args.out, "manifest.json"),
                _manifest(args, run, ["report.json", "predictions.csv"],
                          {"dataset": args.data, "checkpoint": args.checkpoint,
                           "model": ckpt.config.to_dict()}))
    _print_report(report, args.per_clip)


def cmd_eval(args, run):
    _evaluate_checkpoint(args, run)


def cmd_transfer(args, run):
    _evaluate_checkpoint(args, run)


def cmd_bench(args, run):
    if args.repetitions < 1:
        raise UsageError("--repetitions must be at least 1")
    ckpt = load_checkpoint(args.checkpoint)
    extraction = replace(run.extraction, vocab=ckpt.vocab)
    calib = load_calibration(args.calibration) if args.calibration else None
    clips = load_jsonl(_dataset_path(args.data), calib, extraction.vocab)
    frames = [to_relation_tensors(g, extraction.vocab)
              for c in clips for g in extract_clip(c, extraction)]
    if not frames:
        raise UsageError("dataset holds no frames")
    predictor = StreamingPredictor(ckpt.params, ckpt.config)
    for k in range(args.warmup):
        predictor.step(frames[k % len(frames)])
    times = []
    for k in range(args.repetitions):
        g = frames[k % len(frames)]
        t0 = time.perf_counter()
        predictor.step(g)
        times.append((time.perf_counter() - t0) * 1e3)
    with open(args.checkpoint, "rb") as fh:
        size_kb = len(fh.read()) / 1024.0
    out = {
        "mean_ms": statistics.fmean(times),
        "median_ms": statistics.median(times),
        "p99_ms": float(np.percentile(times, 99)),
        "repetitions": args.repetitions,
        "warmup": args.warmup,
        "n_parameters": len(ckpt.params),
        "checkpoint_kb": size_kb,
        "platform": platform.platform(),
    }
    _write_json(os.path.join(args.out, "bench.json"), out)
    _write_json(os.path.join(args.out, "manifest.json"),
                _manifest(args, run, ["bench.json"], {"checkpoint": args.checkpoint}))
    print(f"per-frame latency: mean {out['mean_ms']:.3f} ms, median {out['median_ms']:.3f} ms, "
          f"p99 {out['p99_ms']:.3f} ms over {args.repetitions} frames")
    print(f"parameters: {out['n_parameters']}, checkpoint: {size_kb:.1f} KB")


def cmd_config(args, run):
    if args.action != "dump":
        raise UsageError(f"unknown config action {args.action!r}")
    text = yaml.safe_dump(run.to_dict(), sort_keys=True, default_flow_style=False)
    sys.stdout.write(text)


COMMANDS = {
    "gen": cmd_gen, "extract": cmd_extract, "train": cmd_train, "cv": cmd_cv,
    "eval": cmd_eval, "transfer": cmd_transfer, "bench": cmd_bench, "config": cmd_config,
}


# ----------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML run config (default: $SGC_CONFIG)")
    common.add_argument("--seed", type=int, help="seed for every random stream")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--out", help="run directory (created if missing)")
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--preset", choices=sorted(PRESETS))
    model.add_argument("--ablation", choices=sorted(ABLATIONS))
    model.add_argument("--history", help="'full' or 'window<k>'")
    model.add_argument("--epochs", type=int)
    model.add_argument("--lr", type=float, dest="learning_rate")
    model.add_argument("--lr-schedule", choices=["constant", "cosine"], dest="lr_schedule")
    model.add_argument("--average-last", type=int, dest="average_last",
                       help="return the mean of the last n epoch snapshots")
    model.add_argument("--patience", type=int, help="early-stopping patience, 0 disables")
    model.add_argument("--folds", type=int)
    model.add_argument("--class-weights", choices=["auto", "none"])

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", required=True, help="dataset.jsonl or a directory holding it")
    data.add_argument("--calibration", help="birds-eye calibration JSON for pixel coordinates")

    report = argparse.ArgumentParser(add_help=False)
    report.add_argument("--per-clip", action="store_true", help="add clip-level majority-vote metrics")

    p = argparse.ArgumentParser(prog="sg2vec", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a labelled clip dataset")
    g.add_argument("--clips", type=int)
    g.add_argument("--balance", type=float, help="fraction of collision clips")
    g.add_argument("--frames", type=int, nargs=2, metavar=("MIN", "MAX"))

    sub.add_parser("extract", parents=[common, data], help="write scene graphs for inspection")
    sub.add_parser("train", parents=[common, data, model, report], help="train one model")
    sub.add_parser("cv", parents=[common, data, model, report], help="stratified k-fold run")
    for name, text in (("eval", "evaluate a checkpoint"),
                       ("transfer", "evaluate a checkpoint on another dataset")):
        e = sub.add_parser(name, parents=[common, data, report], help=text)
        e.add_argument("--checkpoint", required=True)
    b = sub.add_parser("bench", parents=[common, data], help="per-frame latency")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--repetitions", type=int, default=1000)
    b.add_argument("--warmup", type=int, default=100)
    c = sub.add_parser("config", parents=[common, model], help="show the effective config")
    c.add_argument("action", choices=["dump"])
    return p


def resolve_config(args):
    run = load_run_config(args.config or os.environ.get("SGC_CONFIG"))
    try:
        if args.seed is not None:
            run = replace(run, scenario=replace(run.scenario, seed=args.seed),
                          train=replace(run.train, seed=args.seed))
        if getattr(args, "clips", None) is not None:
            run = replace(run, scenario=replace(run.scenario, n_clips=args.clips))
        if getattr(args, "balance", None) is not None:
            run = replace(run, scenario=replace(run.scenario, collision_fraction=args.balance))
        if getattr(args, "frames", None) is not None:
            run = replace(run, scenario=replace(run.scenario, frames_per_clip=tuple(args.frames)))
        model = {}
        if getattr(args, "preset", None):
            model.update(PRESETS[args.preset])
        if getattr(args, "ablation", None):
            model.update(ABLATIONS[args.ablation])
        if getattr(args, "history", None):
            model["history"] = args.history
        if model:
            run = replace(run, model=replace(run.model, **model))
        tr = {}
        for key in ("epochs", "learning_rate", "lr_schedule", "average_last", "folds"):
            if getattr(args, key, None) is not None:
                tr[key] = getattr(args, key)
        if getattr(args, "patience", None) is not None:
            tr["early_stop_patience"] = args.patience or None
        if getattr(args, "class_weights", None):
            tr["class_weights"] = None if args.class_weights == "none" else "auto"
        if tr:
            run = replace(run, train=replace(run.train, **tr))
    except ValueError as err:
        raise UsageError(str(err)) from err
    return run


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        run = resolve_config(args)
        if args.seed is None:
            args.seed = run.train.seed
        if args.command != "config":
            args.out = args.out or os.path.join("runs", args.command)
            os.makedirs(args.out, exist_ok=True)
        COMMANDS[args.command](args, run)
    except UsageError as err:
        print(f"sg2vec {args.command}: error: {err}", file=sys.stderr)
        return 2
    except (SchemaError, RuntimeError, ValueError, OSError) as err:
        print(f"sg2vec {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

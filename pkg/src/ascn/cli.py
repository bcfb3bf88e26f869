"""``ascn`` command line: datagen, analyze, train, eval, infer, crossdomain.

Exit codes: 0 ok, 2 bad arguments or config, 3 I/O or unreadable file,
4 numerical divergence, 5 class-count mismatch, 6 degenerate cloud.
``ASCN_LOG`` (error, warn, info, debug) sets log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .adaptive import AdaptiveConfig, optimal_neighborhoods_all
from .cloudio import (ClassSpec, decimate_dataset, default_class_specs, generate_dataset, load_cloud,
                      load_dataset, save_dataset)
from .errors import (ClassMismatch, ConfigError, CorruptModel, DegenerateCloud, DegenerateCloudWarning,
                     InvalidParam, NumericalError, ParseError, VersionError)
from .experiments import DEFAULT_EPOCHS, ExperimentSpec
from .network import ModelConfig, OptimConfig, build_model, evaluate, forward_cloud, load_model, save_model, train
from .spatial import SpatialIndex

log = logging.getLogger("ascn")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NAN, EXIT_CLASSES, EXIT_DEGENERATE = 0, 2, 3, 4, 5, 6
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


def _read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def _emit(args, text: str, payload: dict):
    if args.format == "json":
        print(json.dumps(payload, indent=1, sort_keys=True))
    else:
        print(text, end="" if text.endswith("\n") else "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_datagen(args) -> int:
    if not args.out:
        raise UsageError("datagen needs --out DIR")
    if args.count < 1 or args.points < 8:
        raise UsageError("need --count >= 1 and --points >= 8")
    cfg = _read_json(args.config) if args.config else {}
    if "classes" in cfg:
        specs = [ClassSpec.from_dict(c) for c in cfg["classes"]]
    else:
        specs = default_class_specs(args.count, args.points)
    ds = generate_dataset(specs, args.seed)
    out = Path(args.out)
    save_dataset(ds, out, args.file_format)
    written = {"dense": str(out)}
    if args.decimate > 1:
        low = decimate_dataset(ds, args.decimate, seed=args.seed, use_rings=not args.random_decimation)
        sub = out / f"decimated_x{args.decimate}"
        save_dataset(low, sub, args.file_format)
        written[f"decimated_x{args.decimate}"] = str(sub)
    text = "".join(f"{tag}: {len(ds)} clouds -> {path}\n" for tag, path in written.items())
    _emit(args, text, {"clouds": len(ds), "classes": ds.class_names, "written": written})
    return EXIT_OK


def cmd_analyze(args) -> int:
    cloud = load_cloud(args.cloud)
    cfg = AdaptiveConfig(args.m_min, args.m_max)
    with warnings.catch_warnings():
        warnings.simplefilter("error", DegenerateCloudWarning)
        try:
            m_star, ent = optimal_neighborhoods_all(cloud, SpatialIndex(cloud), cfg)
        except DegenerateCloudWarning as exc:
            raise DegenerateCloud(str(exc)) from None
    cands = [int(m) for m in cfg.candidates]
    if args.format == "json":
        rows = [{"point_index": i, "M_star": int(m_star[i]),
                 "entropy": {str(m): (None if np.isnan(e) else float(e)) for m, e in zip(cands, ent[i])}}
                for i in range(len(cloud))]
        text = json.dumps(rows, indent=1) + "\n"
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["point_index", "M_star"] + [f"entropy_M{m}" for m in cands])
        for i in range(len(cloud)):
            w.writerow([i, int(m_star[i])] + ["" if np.isnan(e) else repr(float(e)) for e in ent[i]])
        text = buf.getvalue()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _train_settings(args):
    cfg = _read_json(args.config) if args.config else {}
    unknown = set(cfg) - {"model", "optim", "epochs"}
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    optim = dict(cfg.get("optim", {}))
    for key, flag in (("lr", args.lr), ("batch_size", args.batch_size), ("name", args.optimizer)):
        if flag is not None:
            optim[key] = flag
    try:
        optim_cfg = OptimConfig(**optim)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    epochs = args.epochs if args.epochs is not None else int(cfg.get("epochs", DEFAULT_EPOCHS))
    if epochs < 1:
        raise UsageError("--epochs must be >= 1")
    return dict(cfg.get("model", {})), optim_cfg, epochs


def cmd_train(args) -> int:
    model_dict, optim, epochs = _train_settings(args)
    ds = load_dataset(args.dataset)
    model_dict.update(num_classes=ds.num_classes, class_names=list(ds.class_names), seed=args.seed)
    model = build_model(ModelConfig.from_dict(model_dict))
    out = Path(args.out or "model.ascn")
    log_path = Path(args.log) if args.log else out.with_suffix(".log.jsonl")
    with open(log_path, "w", encoding="utf-8") as fh:
        records = train(model, ds, epochs, optim, seed=args.seed, log_fh=fh)
    save_model(model, out)
    last = records[-1]
    text = (f"trained {epochs} epochs: loss {last['loss']:.4f}, train accuracy {last['train_acc']:.1f}%\n"
            f"model -> {out}\nlog -> {log_path}\n")
    _emit(args, text, {"model": str(out), "log": str(log_path), "final": last})
    return EXIT_OK


def _confusion_text(confusion: np.ndarray, names) -> str:
    width = max(8, *(len(n) for n in names))
    head = " " * width + " " + " ".join(f"{n:>{width}}" for n in names)
    rows = [f"{n:<{width}} " + " ".join(f"{v:>{width}d}" for v in row) for n, row in zip(names, confusion)]
    return "\n".join([head] + rows) + "\n"


def cmd_eval(args) -> int:
    model = load_model(args.model)
    ds = load_dataset(args.dataset)
    if ds.num_classes != model.config.num_classes:
        raise ClassMismatch(f"model has {model.config.num_classes} classes, dataset {ds.num_classes}")
    res = evaluate(model, ds, workers=args.workers)
    report = res.to_dict(ds.class_names)
    report["accuracy"] = round(report["accuracy"], 1)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=1, sort_keys=True)
            fh.write("\n")
    text = (f"Accuracy: {report['accuracy']:.1f}% ({res.accuracy.correct}/{res.accuracy.total})\n"
            + _confusion_text(res.confusion, ds.class_names))
    if res.skipped:
        text += f"skipped (too few points): {res.skipped}\n"
    _emit(args, text, report)
    return EXIT_OK


def cmd_infer(args) -> int:
    model = load_model(args.model)
    cloud = load_cloud(args.cloud)
    logits = forward_cloud(model, cloud)
    z = np.exp(logits - logits.max())
    scores = z / z.sum()
    names = model.config.class_names or [str(i) for i in range(model.config.num_classes)]
    best = int(np.argmax(scores))
    payload = {"class_index": best, "class_name": names[best],
               "scores": {n: float(s) for n, s in zip(names, scores)}}
    text = f"{names[best]}\n" + "".join(f"  {n}: {s:.4f}\n" for n, s in zip(names, scores))
    _emit(args, text, payload)
    return EXIT_OK


def cmd_crossdomain(args) -> int:
    path = args.config or args.experiment
    if not path:
        raise UsageError("crossdomain needs an experiment JSON (--config FILE)")
    spec = ExperimentSpec.from_file(path)
    if args.seeds:
        spec = replace(spec, seeds=[int(s) for s in args.seeds.split(",")])
    if args.epochs is not None:
        spec = replace(spec, epochs=args.epochs)
    result = spec.run(base=Path(path).parent, workers=args.workers)
    md = result.to_markdown()
    payload = result.to_dict()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.md").write_text(md, encoding="utf-8")
        (out / "results.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    _emit(args, md, payload)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _global_flags(parser, suppress: bool):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=d(0), help="random seed (default 0)")
    parser.add_argument("--config", default=d(None), help="JSON config file")
    parser.add_argument("--out", default=d(None), help="output path")
    parser.add_argument("--workers", type=int, default=d(1), help="evaluation threads (default 1)")
    parser.add_argument("--format", choices=("text", "json"), default=d("text"), help="report format")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ascn", description="Adaptive structural convolution for point clouds.")
    parser.add_argument("--version", action="version", version=f"ascn {__version__}")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", parents=[common], help="generate a synthetic dataset directory")
    p.add_argument("--count", type=int, default=20, help="clouds per class (default 20)")
    p.add_argument("--points", type=int, default=300, help="points per cloud (default 300)")
    p.add_argument("--decimate", type=int, default=1, help="also write a 1/K density companion")
    p.add_argument("--random-decimation", action="store_true", help="thin at random instead of by scanline")
    p.add_argument("--file-format", choices=("csv", "ply-ascii"), default="csv")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("analyze", parents=[common], help="per-point optimal neighbourhood sizes")
    p.add_argument("cloud")
    p.add_argument("--m-min", type=int, default=3)
    p.add_argument("--m-max", type=int, default=10)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train", parents=[common], help="train a model on a dataset directory")
    p.add_argument("dataset")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default=None)
    p.add_argument("--log", default=None, help="JSON-lines training log (default next to the model)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="accuracy and confusion matrix")
    p.add_argument("model")
    p.add_argument("dataset")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="classify one cloud")
    p.add_argument("model")
    p.add_argument("cloud")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("crossdomain", parents=[common], help="multi-seed train/test-across-density table")
    p.add_argument("experiment", nargs="?", help="experiment JSON (same as --config)")
    p.add_argument("--seeds", default=None, help="comma-separated seeds overriding the file")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_crossdomain)
    return parser


def _setup_logging():
    name = os.environ.get("ASCN_LOG", "warn").strip().lower()
    if name not in LOG_LEVELS:
        raise UsageError(f"ASCN_LOG must be one of error, warn, info, debug (got {name!r})")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger().setLevel(LOG_LEVELS[name])
    if LOG_LEVELS[name] > logging.WARNING:
        warnings.simplefilter("ignore", DegenerateCloudWarning)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _setup_logging()
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ascn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"ascn: training diverged: {exc}", file=sys.stderr)
        return EXIT_NAN
    except ClassMismatch as exc:
        print(f"ascn: class mismatch: {exc}", file=sys.stderr)
        return EXIT_CLASSES
    except DegenerateCloud as exc:
        print(f"ascn: degenerate cloud: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (ParseError, CorruptModel, VersionError, OSError) as exc:
        print(f"ascn: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, InvalidParam, ValueError, KeyError) as exc:
        print(f"ascn: bad configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

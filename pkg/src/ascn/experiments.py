"""Train-on-one-density, test-on-others harness with multi-seed tables.

A run trains one model per seed on the training set and evaluates it on
every tagged test set. Results come back as a small table object that
renders to Markdown and to JSON with the same numbers.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cloudio import ClassSpec, Dataset, decimate_dataset, default_class_specs, generate_dataset, load_dataset
from .errors import ClassMismatch, ConfigError
from .network import ModelConfig, OptimConfig, build_model, evaluate, train

log = logging.getLogger(__name__)

DEFAULT_EPOCHS = 20


@dataclass
class CrossDomainResult:
    tags: list[str]
    seeds: list[int]
    accuracy: dict[int, dict[str, float]] = field(default_factory=dict)
    logs: dict[int, list[dict]] = field(default_factory=dict)

    def means(self) -> dict[str, float]:
        return {t: float(np.mean([self.accuracy[s][t] for s in self.seeds])) for t in self.tags}

    def overall_mean(self) -> float:
        return float(np.mean(list(self.means().values())))

    def to_dict(self) -> dict:
        return {"tags": list(self.tags), "seeds": list(self.seeds),
                "accuracy": {str(s): {t: round(self.accuracy[s][t], 1) for t in self.tags}
                             for s in self.seeds},
                "mean": {t: round(v, 1) for t, v in self.means().items()},
                "overall_mean": round(self.overall_mean(), 1)}

    def to_markdown(self) -> str:
        d = self.to_dict()
        lines = ["| seed | " + " | ".join(self.tags) + " |",
                 "|---|" + "---|" * len(self.tags)]
        for s in self.seeds:
            lines.append(f"| {s} | " + " | ".join(f"{d['accuracy'][str(s)][t]:.1f}" for t in self.tags) + " |")
        lines.append("| mean | " + " | ".join(f"{d['mean'][t]:.1f}" for t in self.tags) + " |")
        lines.append("")
        lines.append(f"Mean over test sets: {d['overall_mean']:.1f}%")
        return "\n".join(lines) + "\n"


def run_crossdomain(train_set: Dataset, tests: dict[str, Dataset], model_cfg: ModelConfig,
                    epochs: int = DEFAULT_EPOCHS, seeds=(0,), optim: OptimConfig | None = None,
                    workers: int = 1) -> CrossDomainResult:
    """One training run per seed (model init, pooling and shuffling all follow it)."""
    if not tests:
        raise ConfigError("need at least one test set")
    for tag, ds in tests.items():
        if ds.num_classes != train_set.num_classes:
            raise ClassMismatch(f"test set {tag!r} has {ds.num_classes} classes, train set {train_set.num_classes}")
    seeds = [int(s) for s in seeds]
    result = CrossDomainResult(list(tests), seeds)
    for s in seeds:
        cfg = replace(model_cfg, seed=s, num_classes=train_set.num_classes)
        model = build_model(cfg)
        result.logs[s] = train(model, train_set, epochs, optim, seed=s)
        result.accuracy[s] = {tag: evaluate(model, ds, workers).accuracy.percent for tag, ds in tests.items()}
        log.info("seed %d: %s", s, result.accuracy[s])
    return result


# ---------------------------------------------------------------------------
# experiment files


@dataclass
class DataSource:
    """A dataset on disk (``path``) or a generator recipe, optionally decimated."""

    path: str | None = None
    classes: list[ClassSpec] | None = None
    seed: int = 0
    decimate: int = 1
    random_decimation: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "DataSource":
        unknown = set(d) - {"path", "generate", "decimate", "random_decimation", "tag"}
        if unknown:
            raise ConfigError(f"unknown data source keys: {sorted(unknown)}")
        gen = d.get("generate")
        if (d.get("path") is None) == (gen is None):
            raise ConfigError("a data source needs exactly one of 'path' or 'generate'")
        classes = None
        seed = 0
        if gen is not None:
            seed = int(gen.get("seed", 0))
            if "classes" in gen:
                classes = [ClassSpec.from_dict(c) for c in gen["classes"]]
            else:
                classes = default_class_specs(int(gen.get("count", 20)), int(gen.get("n_points", 300)))
        return cls(d.get("path"), classes, seed, int(d.get("decimate", 1)),
                   bool(d.get("random_decimation", False)))

    def load(self, base: Path) -> Dataset:
        if self.path is not None:
            ds = load_dataset(base / self.path)
        else:
            ds = generate_dataset(self.classes, self.seed)
        if self.decimate > 1:
            ds = decimate_dataset(ds, self.decimate, seed=self.seed, use_rings=not self.random_decimation)
        return ds


@dataclass
class ExperimentSpec:
    train: DataSource
    tests: dict[str, DataSource]
    model: dict = field(default_factory=dict)
    optim: dict = field(default_factory=dict)
    epochs: int = DEFAULT_EPOCHS
    seeds: list[int] = field(default_factory=lambda: [0])

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        unknown = set(d) - {"train", "tests", "model", "optim", "epochs", "seeds"}
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        if "train" not in d or not d.get("tests"):
            raise ConfigError("an experiment needs 'train' and at least one entry in 'tests'")
        tests = {}
        for i, t in enumerate(d["tests"]):
            tag = str(t.get("tag", f"test{i}"))
            if tag in tests:
                raise ConfigError(f"duplicate test tag {tag!r}")
            tests[tag] = DataSource.from_dict(t)
        epochs = int(d.get("epochs", DEFAULT_EPOCHS))
        seeds = [int(s) for s in d.get("seeds", [0])]
        if epochs < 1 or not seeds:
            raise ConfigError("need epochs >= 1 and at least one seed")
        return cls(DataSource.from_dict(d["train"]), tests, dict(d.get("model", {})),
                   dict(d.get("optim", {})), epochs, seeds)

    @classmethod
    def from_file(cls, path) -> "ExperimentSpec":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None

    def run(self, base=".", workers: int = 1) -> CrossDomainResult:
        base = Path(base)
        train_set = self.train.load(base)
        tests = {tag: src.load(base) for tag, src in self.tests.items()}
        cfg = ModelConfig.from_dict({**self.model, "num_classes": train_set.num_classes})
        try:
            optim = OptimConfig(**self.optim)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return run_crossdomain(train_set, tests, cfg, self.epochs, self.seeds, optim, workers)

"""Experiment config: one JSON document naming data, model, budgets and passes.

Example::

    {
      "seed": 0,
      "dataset": {"kind": "synthetic", "n_train": 512, "n_test": 256,
                  "classes": 4, "shape": [1, 8, 8], "noise": 0.2},
      "model": {"arch": "small_cnn"},
      "train": {"learning_rate": 0.05, "batch_size": 32, "steps": 300},
      "prune": {"sparsity": 0.75, "gradual": true, "steps": 300},
      "factorize": {"energy": 0.9, "steps": 100},
      "distill": {"student": "snn_student", "temperature": 4, "soft_weight": 0.5, "steps": 300},
      "pipeline": [{"pass": "distill", "steps": 300}, {"pass": "prune", "sparsity": 0.75}],
      "timing": {"repeats": 3}
    }

Dataset kinds: ``synthetic``, ``mnist_subset``, ``idx`` (``train_images``,
``train_labels``, ``test_images``, ``test_labels``) and ``cifar`` (``train``:
list of batch files, ``test``: one file).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from ..errors import CompressError, ConfigError
from ..nn.model import Model
from ..nn.train import TrainConfig
from ..nn.zoo import build_model
from ..tensor import Rng
from .data import Dataset, load_cifar_binary, load_idx, load_mnist_subset, synthetic_split


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic"})
    model: dict = field(default_factory=lambda: {"arch": "small_cnn"})
    train: dict = field(default_factory=dict)
    prune: dict = field(default_factory=dict)
    factorize: dict = field(default_factory=dict)
    distill: dict = field(default_factory=dict)
    pipeline: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    def train_config(self, steps: int | None = None) -> TrainConfig:
        opts = dict(self.train)
        if steps is not None:
            opts["steps"] = steps
        opts["seed"] = self.seed
        try:
            return TrainConfig(**opts)
        except (TypeError, CompressError) as exc:
            raise ConfigError(f"bad train options: {exc}") from exc

    def load_data(self) -> tuple[Dataset, Dataset]:
        d = dict(self.dataset)
        kind = d.pop("kind", "synthetic")
        path = lambda key: self.base_dir / d[key]  # noqa: E731
        try:
            if kind == "synthetic":
                return synthetic_split(d.get("seed", self.seed), d.get("n_train", 512),
                                       d.get("n_test", 256), d.get("classes", 4),
                                       tuple(d.get("shape", (1, 8, 8))), d.get("noise", 0.2))
            if kind == "mnist_subset":
                return load_mnist_subset(d.get("cache_dir"), d.get("n_train", 4000),
                                         d.get("n_test", 1000), d.get("seed", 0))
            if kind == "idx":
                train = load_idx(path("train_images"), path("train_labels"), "train")
                test = load_idx(path("test_images"), path("test_labels"), "test")
            elif kind == "cifar":
                parts = [load_cifar_binary(self.base_dir / p) for p in d["train"]]
                train = Dataset(np.concatenate([p.images for p in parts]),
                                np.concatenate([p.labels for p in parts]), "train", 10)
                test = load_cifar_binary(path("test"), "test")
            else:
                raise ConfigError(f"unknown dataset kind {kind!r}")
        except KeyError as exc:
            raise ConfigError(f"dataset kind {kind!r} needs key {exc}") from exc
        if "n_train" in d:
            train = train.take(d["n_train"])
        if "n_test" in d:
            test = test.take(d["n_test"])
        return train, test

    def build_model(self, data: Dataset, spec=None) -> Model:
        spec = spec or self.model.get("layers") or self.model.get("arch", "small_cnn")
        return build_model(spec, data.input_shape, data.num_classes, Rng(self.seed))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    known = {f.name for f in fields(ExperimentConfig)} - {"base_dir"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    return ExperimentConfig(**doc, base_dir=path.parent)

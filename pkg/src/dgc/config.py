"""Run configuration files.

A run config is a YAML mapping with up to five sections::

    dataset:    {name, path, seed, n_train, n_test, digits, n_per_annulus, background_source}
    model:      {preset, spec, n_clusters, reconstruction_scale, prior_init_scale}
                (``spec`` is an explicit ModelSpec mapping replacing the preset)
    training:   any TrainConfig field except n_clusters / checkpoint_every
    evaluation: {modes}
    output:     {dir, checkpoint_every}

Values are resolved in this order, later winning: built-in defaults, the
preset's defaults, the file, command-line flags. Unknown keys and bad values
are collected and reported together.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import yaml

from .evaluation import MODES
from .networks import PRESETS, ModelSpec, ShapeError, get_preset
from .training import TrainConfig

DATASETS = ("pacman", "noisy-digits")

PRESET_DEFAULTS = {
    "pacman-mlp": {
        "dataset": {"name": "pacman"},
        "model": {"n_clusters": 2},
        "training": {"batch_size": 1000, "lr": 0.001, "epochs": 80, "pretrain": False},
    },
    "mnist-mlp": {
        "dataset": {"name": "noisy-digits"},
        "model": {"n_clusters": 4},
        "training": {"batch_size": 128, "lr": 0.002, "epochs": 100, "pretrain": False},
    },
    "svhn-conv": {
        "dataset": {"name": None},
        "model": {"n_clusters": 10},
        "training": {"batch_size": 128, "lr": 1e-4, "epochs": 150, "pretrain": True},
    },
}


class ConfigError(ValueError):
    """All problems found in one config, one per line."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid config:\n" + "\n".join(f"  - {e}" for e in self.errors))


@dataclass
class DatasetConfig:
    name: Optional[str] = "pacman"
    path: Optional[str] = None
    seed: int = 0
    n_train: Optional[int] = None
    n_test: Optional[int] = None
    digits: tuple = (2, 7)
    n_per_annulus: int = 10_000
    background_source: Optional[str] = None


@dataclass
class ModelConfig:
    preset: str = "pacman-mlp"
    spec: Optional[dict] = None
    n_clusters: int = 2
    reconstruction_scale: Optional[float] = None
    prior_init_scale: Optional[float] = None

    def build_spec(self) -> ModelSpec:
        base = ModelSpec.from_dict(copy.deepcopy(self.spec)) if self.spec else get_preset(self.preset)
        changes = {k: getattr(self, k) for k in ("reconstruction_scale", "prior_init_scale")
                   if getattr(self, k) is not None}
        return replace(base.with_clusters(self.n_clusters), **changes)


@dataclass
class EvaluationConfig:
    modes: tuple = ("labeled", "unlabeled")


@dataclass
class OutputConfig:
    dir: str = "runs/default"
    checkpoint_every: int = 10


TRAINING_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name not in ("n_clusters",
                                                                              "checkpoint_every"))
SECTIONS = {
    "dataset": DatasetConfig,
    "model": ModelConfig,
    "training": None,
    "evaluation": EvaluationConfig,
    "output": OutputConfig,
}


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @classmethod
    def from_dict(cls, raw: Optional[dict], overrides: Optional[dict] = None) -> "RunConfig":
        """Validate ``raw`` (plus dotted-key ``overrides``) into a RunConfig."""
        raw = {} if raw is None else raw
        errors = []
        if not isinstance(raw, dict):
            raise ConfigError(["top level must be a mapping"])
        for section in raw:
            if section not in SECTIONS:
                errors.append(f"unknown section {section!r}")
        merged = {name: {} for name in SECTIONS}
        for name in SECTIONS:
            value = raw.get(name, {}) or {}
            if not isinstance(value, dict):
                errors.append(f"section {name!r} must be a mapping")
                continue
            merged[name].update(value)
        for key, value in (overrides or {}).items():
            section, _, name = key.partition(".")
            merged[section][name] = value

        preset = merged["model"].get("preset", ModelConfig.preset)
        if preset not in PRESETS:
            errors.append(f"model.preset: unknown preset {preset!r} (known: {', '.join(sorted(PRESETS))})")
            defaults = {}
        else:
            defaults = PRESET_DEFAULTS.get(preset, {})
        for name in SECTIONS:
            merged[name] = {**defaults.get(name, {}), **merged[name]}

        allowed = {name: ({f.name for f in fields(kind)} if kind else set(TRAINING_KEYS))
                   for name, kind in SECTIONS.items()}
        for name, values in merged.items():
            for key in [k for k in values if k not in allowed[name]]:
                errors.append(f"{name}.{key}: unknown key")
                del values[key]  # keep validating the rest

        dataset = DatasetConfig(**merged["dataset"])
        model = ModelConfig(**merged["model"])
        evaluation = EvaluationConfig(**merged["evaluation"])
        output = OutputConfig(**merged["output"])
        if dataset.name is not None and dataset.name not in DATASETS:
            errors.append(f"dataset.name: unknown dataset {dataset.name!r} (known: {', '.join(DATASETS)})")
        if dataset.name is None and dataset.path is None:
            errors.append("dataset: give a name or a path")
        for key in ("n_train", "n_test"):
            value = getattr(dataset, key)
            if value is not None and (not isinstance(value, int) or value < 1):
                errors.append(f"dataset.{key}: must be a positive integer")
        dataset.digits = tuple(dataset.digits)
        if len(dataset.digits) != 2 or len(set(dataset.digits)) != 2 \
                or not all(isinstance(d, int) and 0 <= d <= 9 for d in dataset.digits):
            errors.append("dataset.digits: need two distinct digits 0-9")
        if not isinstance(model.n_clusters, int) or model.n_clusters < 1:
            errors.append("model.n_clusters: must be a positive integer")
        if model.reconstruction_scale is not None and not model.reconstruction_scale > 0:
            errors.append("model.reconstruction_scale: must be positive")
        if not any(e.startswith("model.") for e in errors):
            try:
                model.build_spec()
            except (ShapeError, TypeError, KeyError) as exc:
                errors.append(f"model.spec: {exc}")
        evaluation.modes = tuple(evaluation.modes)
        for mode in evaluation.modes:
            if mode not in MODES:
                errors.append(f"evaluation.modes: unknown mode {mode!r}")

        k = model.n_clusters if isinstance(model.n_clusters, int) and model.n_clusters > 0 else 1
        training = None
        try:
            training = TrainConfig(**merged["training"], n_clusters=k,
                                   checkpoint_every=output.checkpoint_every)
        except ValueError as exc:
            errors.extend(f"training: {e}" for e in str(exc).split("; "))
        except TypeError as exc:
            errors.append(f"training: {exc}")
        if errors:
            raise ConfigError(errors)
        return cls(dataset, model, training, evaluation, output)

    def to_dict(self) -> dict:
        """Plain-data form that re-validates through ``from_dict``."""
        out = {
            "dataset": asdict(self.dataset),
            "model": asdict(self.model),
            "training": {k: v for k, v in asdict(self.training).items() if k in TRAINING_KEYS},
            "evaluation": asdict(self.evaluation),
            "output": asdict(self.output),
        }
        out["dataset"]["digits"] = list(self.dataset.digits)
        out["evaluation"]["modes"] = list(self.evaluation.modes)
        return out

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Read a YAML run config (or only defaults when ``path`` is None)."""
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError([f"{path}: not valid YAML ({exc})"]) from exc
        except OSError as exc:
            raise ConfigError([f"{path}: {exc.strerror}"]) from exc
    return RunConfig.from_dict(raw, overrides)

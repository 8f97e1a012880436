"""Declarative run configuration.

A run config is a JSON object with the sections below; every section is
optional except ``data``, and within ``data`` only ``source`` is required::

    {
      "seed": 0,
      "output_dir": "runs/example",
      "data":    {"source": "generator", "classes": 3, "groups_per_class": 3, ...},
      "test":    {"source": "generator", "seed": 1},
      "model":   {"kind": "auto", "hidden": [64, 64]},
      "risk":    {"alpha": 0.8, "cvar_mode": "lower_trimmed", ...} | null,
      "distill": {"method": "first-order", "ipc": 10, "iterations": 200, ...},
      "eval":    {"epochs": 300, "lr": 0.01, "corruptions": ["noise", "invert"], ...}
    }

Unknown keys anywhere are rejected before any compute happens.
``risk: null`` trains the inner network on the plain mean loss. Without
``eval.corruptions`` every corruption that applies to the data is run
(blur needs image-shaped features).
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import CorruptionSpec, Dataset, DataError, gen_subgroup_mixture, load_csv, load_idx_images
from .distill import DistillConfig
from .model import ModelSpec
from .risk import RiskConfig

OUTPUT_ROOT_ENV = "RDD_OUTPUT_ROOT"
DATA_SOURCES = ("generator", "csv", "idx")


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    source: str
    classes: int = 3
    groups_per_class: int = 3
    dim: int = 16
    n: int = 3000
    group_weights: list = field(default_factory=lambda: [0.475, 0.475, 0.05])
    separation: float = 3.0
    noise: float = 1.0
    seed: int | None = None
    layout_seed: int | None = None
    path: str | None = None
    labels_path: str | None = None
    label_column: str = "label"
    group_column: str | None = None
    num_classes: int | None = None


@dataclass
class ModelSection:
    kind: str = "auto"
    hidden: list = field(default_factory=lambda: [64, 64])
    channels: list = field(default_factory=lambda: [8, 16])
    kernel: int = 3


@dataclass
class DistillSection:
    method: str = "first-order"
    ipc: int = 10
    iterations: int = 200
    matching: str = "gradient"
    distance: str = "layerwise-cosine"
    init: str = "random-real"
    inner_steps: int = 5
    inner_lr: float = 0.01
    inner_momentum: float = 0.9
    syn_steps: int = 1
    syn_lr: float = 0.1
    syn_momentum: float = 0.5
    batch_per_class: int = 256
    max_clusters: int = 10
    partition: str = "nearest-synthetic"
    restart_every: int = 1
    risk_matching: bool = False
    zo_probes: int = 20
    zo_sigma: float = 0.01
    zo_step_scale: float = 0.1


@dataclass
class EvalSection:
    epochs: int = 300
    lr: float = 0.01
    momentum: float = 0.9
    seed: int | None = None
    cluster_min_k: int = 10
    corruptions: list | None = None  # None: every kind that applies to the data
    noise_sigma: float = 0.1
    blur_width: int = 3
    invert_range: list = field(default_factory=lambda: [0.0, 1.0])
    robust_training: bool = False


@dataclass
class RunConfig:
    data: DataSection
    test: DataSection | None = None
    model: ModelSection = field(default_factory=ModelSection)
    risk: RiskConfig | None = field(default_factory=RiskConfig)
    distill: DistillSection = field(default_factory=DistillSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["risk"] = None if self.risk is None else asdict(self.risk)
        return d

    # ----------------------------------------------------------- resolution

    def distill_config(self) -> DistillConfig:
        d = asdict(self.distill)
        d.pop("method")
        return DistillConfig(seed=self.seed, risk=self.risk, **d)

    def corruption_specs(self, image_data: bool = True) -> list[CorruptionSpec]:
        return corruption_specs(self.eval.corruptions, self.eval, self.seed, image_data)

    def eval_seed(self) -> int:
        return self.seed if self.eval.seed is None else self.eval.seed

    def output_path(self) -> Path:
        return resolve_output(self.output_dir)


def resolve_output(path) -> Path:
    """Relative output paths live under ``$RDD_OUTPUT_ROOT`` when it is set."""
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def corruption_specs(kinds, section: EvalSection | None = None, seed: int = 0,
                     image_data: bool = True) -> list[CorruptionSpec]:
    """Build corruption specs; ``kinds=None`` picks every kind valid for the data."""
    section = section or EvalSection()
    if kinds is None:
        kinds = ["noise", "blur", "invert"] if image_data else ["noise", "invert"]
    elif not image_data and "blur" in kinds:
        raise ConfigError("eval.corruptions: blur needs image-shaped (H, W, C) features")
    lo, hi = section.invert_range
    out = []
    for kind in kinds:
        try:
            out.append(CorruptionSpec(kind, sigma=section.noise_sigma, width=section.blur_width,
                                      lo=lo, hi=hi, seed=seed))
        except DataError as exc:
            raise ConfigError(f"eval.corruptions: {exc}") from None
    return out


# ---------------------------------------------------------------- parsing

_SECTIONS = {"data": DataSection, "test": DataSection, "model": ModelSection,
             "distill": DistillSection, "eval": EvalSection}


def _check_type(value, default, where: str):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
    return value


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, f in known.items():
        if name not in raw:
            if f.default is MISSING and f.default_factory is MISSING:
                raise ConfigError(f"missing required field {where}.{name}")
            continue
        default = f.default if f.default is not MISSING else (
            f.default_factory() if f.default_factory is not MISSING else None)
        kwargs[name] = _check_type(raw[name], default, f"{where}.{name}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(raw: dict) -> RunConfig:
    """Validate a decoded JSON object and build a :class:`RunConfig`."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    if "data" not in raw:
        raise ConfigError("missing required field data.source")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in raw and raw[name] is not None:
            kwargs[name] = _build(cls, raw[name], name)
    if "risk" in raw:
        kwargs["risk"] = None if raw["risk"] is None else _build(RiskConfig, raw["risk"], "risk")
    for name in ("seed", "output_dir"):
        if name in raw:
            kwargs[name] = _check_type(raw[name], 0 if name == "seed" else "", name)
    config = RunConfig(**kwargs)
    _validate(config)
    return config


def _validate(config: RunConfig) -> None:
    for where, section in (("data", config.data), ("test", config.test)):
        if section is None:
            continue
        if section.source not in DATA_SOURCES:
            raise ConfigError(f"{where}.source: expected one of {DATA_SOURCES}, got {section.source!r}")
        if section.source in ("csv", "idx") and not section.path:
            raise ConfigError(f"missing required field {where}.path")
    if config.test is None and config.data.source != "generator":
        raise ConfigError("missing required field test.source (needed for non-generated data)")
    if config.model.kind not in ("auto", "mlp", "convnet"):
        raise ConfigError(f"model.kind: unknown architecture {config.model.kind!r}")
    if config.distill.method not in ("first-order", "zero-order"):
        raise ConfigError(f"distill.method: expected first-order or zero-order, got {config.distill.method!r}")
    if config.eval.epochs < 0 or config.eval.cluster_min_k < 1:
        raise ConfigError("eval.epochs must be >= 0 and eval.cluster_min_k >= 1")
    if len(config.eval.invert_range) != 2:
        raise ConfigError("eval.invert_range must be [lo, hi]")
    try:
        config.distill_config()
    except ValueError as exc:
        raise ConfigError(f"distill: {exc}") from None
    config.corruption_specs(image_data=config.data.source == "idx")


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return parse_config(raw)


def set_path(raw: dict, dotted: str, value) -> dict:
    """Copy of ``raw`` with ``dotted`` (e.g. ``risk.alpha``) replaced.

    The key must be a known field; absent sections are created.
    """
    parts = dotted.split(".")
    if len(parts) == 1:
        if parts[0] not in {f.name for f in fields(RunConfig)} - set(_SECTIONS) - {"risk"}:
            raise ConfigError(f"unknown config key {dotted!r}")
    elif len(parts) == 2:
        section, key = parts
        cls = RiskConfig if section == "risk" else _SECTIONS.get(section)
        if cls is None or key not in {f.name for f in fields(cls)}:
            raise ConfigError(f"unknown config key {dotted!r}")
    else:
        raise ConfigError(f"unknown config key {dotted!r}")
    out = copy.deepcopy(raw)
    node = out
    for p in parts[:-1]:
        if node.get(p) is None:
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value
    return out


# ---------------------------------------------------------------- materialization

def load_dataset(section: DataSection, default_seed: int) -> Dataset:
    seed = default_seed if section.seed is None else section.seed
    try:
        if section.source == "generator":
            layout = seed if section.layout_seed is None else section.layout_seed
            return gen_subgroup_mixture(section.classes, section.groups_per_class, section.dim,
                                        section.n, section.group_weights, section.separation,
                                        seed=seed, noise=section.noise, layout_seed=layout)
        if section.source == "csv":
            return load_csv(section.path, label_column=section.label_column,
                            group_column=section.group_column, num_classes=section.num_classes)
        return load_idx_images(section.path, section.labels_path, section.num_classes)
    except (OSError, DataError) as exc:
        raise DataError(f"cannot load {section.source} data: {exc}") from exc


def train_and_test(config: RunConfig) -> tuple[Dataset, Dataset]:
    """The training set and the held-out test set of a run.

    Without a ``test`` section the generator is redrawn with a different
    sample seed but the same blob layout.
    """
    data_seed = config.seed if config.data.seed is None else config.data.seed
    train = load_dataset(config.data, config.seed)
    if config.test is not None:
        test_section = config.test
    else:
        layout = config.data.layout_seed if config.data.layout_seed is not None else data_seed
        test_section = replace(config.data, seed=data_seed + 1, layout_seed=layout)
    test = load_dataset(test_section, config.seed + 1)
    if test.num_classes != train.num_classes:
        test = Dataset(test.features, test.labels, test.group_ids, test.name, train.num_classes)
    return train, test


def model_spec(config: RunConfig, data: Dataset) -> ModelSpec:
    kind = config.model.kind
    if kind == "auto":
        kind = "mlp" if len(data.feature_shape) == 1 else "convnet"
    spec = ModelSpec(kind, data.feature_shape, data.num_classes, hidden=tuple(config.model.hidden),
                     channels=tuple(config.model.channels), kernel=config.model.kernel)
    spec.validate()
    return spec


def to_jsonable(obj):
    """``json.dumps`` default hook for numpy scalars and arrays."""
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")

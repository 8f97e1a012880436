"""Train-on-synthetic, test-on-real evaluation and robustness metrics."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .data import Dataset, corrupt
from .distill import SyntheticSet, inner_dro_update
from .model import ModelSpec, ModelState, init, per_sample_loss, predict, sgd_step
from .partition import kmeans
from .risk import RiskConfig

REPORT_VERSION = 1

_FRACTION = {"type": "number", "minimum": 0, "maximum": 1}
_NULLABLE_FRACTION = {"anyOf": [_FRACTION, {"type": "null"}]}

# JSON Schema (draft 2020-12) of a serialized EvalReport
REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "EvalReport",
    "type": "object",
    "required": ["version", "standard_accuracy", "cluster_min", "cluster_accuracies",
                 "cluster_sizes", "corruption_accuracies", "group_accuracies", "worst_group",
                 "average_group", "seeds", "config", "wall_time"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": REPORT_VERSION},
        "standard_accuracy": _FRACTION,
        "cluster_min": _FRACTION,
        "cluster_accuracies": {"type": "array", "items": _NULLABLE_FRACTION},
        "cluster_sizes": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "corruption_accuracies": {"type": "object", "additionalProperties": _FRACTION},
        "group_accuracies": {"type": "object", "additionalProperties": _FRACTION},
        "worst_group": _NULLABLE_FRACTION,
        "average_group": _NULLABLE_FRACTION,
        "seeds": {"type": "object"},
        "config": {"type": "object"},
        "wall_time": {"type": "number", "minimum": 0},
    },
}


def train_on_synthetic(synthetic: SyntheticSet, spec: ModelSpec, epochs: int, seed,
                       lr: float = 0.01, momentum: float = 0.9,
                       risk: RiskConfig | None = None) -> ModelState:
    """Full-batch momentum SGD on the synthetic set.

    Plain cross-entropy by default; with ``risk`` the whole set is treated
    as one cluster under that risk configuration.
    """
    if synthetic.features.shape[0] == 0:
        raise ValueError("synthetic set is empty")
    state = init(spec, seed)
    if epochs == 0:
        return state
    data = synthetic.as_dataset()
    if risk is not None:
        return inner_dro_update(state, data, [np.arange(len(data))], risk, epochs, lr, momentum)
    x = nk.tensor(data.features)
    for _ in range(epochs):
        leaves = state.leaves()
        loss = per_sample_loss(state, x, data.labels, leaves).mean()
        state = sgd_step(state, nk.backward(loss, leaves), lr, momentum)
    return state


def accuracy(state: ModelState, test: Dataset) -> float:
    if len(test) == 0:
        return float("nan")
    return float(np.mean(predict(state, test.features) == test.labels))


def cluster_min(state: ModelState, test: Dataset, k: int = 10, seed=0):
    """Worst accuracy over a class-agnostic k-means partition of ``test``.

    Returns ``(min_accuracy, per_subset_accuracies, subset_sizes)``.
    """
    result = kmeans(test.features, k, seed=seed)
    correct = predict(state, test.features) == test.labels
    accs, sizes = [], []
    for members in result.clusters.members:
        sizes.append(int(len(members)))
        accs.append(float(correct[members].mean()) if len(members) else None)
    valid = [a for a in accs if a is not None]
    return min(valid), accs, sizes


def group_accuracies(state: ModelState, test: Dataset) -> dict:
    """Accuracy per ground-truth subgroup id (only ids that occur)."""
    if test.group_ids is None:
        return {}
    correct = predict(state, test.features) == test.labels
    return {int(g): float(correct[test.group_ids == g].mean()) for g in np.unique(test.group_ids)}


@dataclass
class EvalReport:
    standard_accuracy: float
    cluster_min: float
    cluster_accuracies: list
    cluster_sizes: list
    corruption_accuracies: dict = field(default_factory=dict)
    group_accuracies: dict = field(default_factory=dict)
    worst_group: float | None = None
    average_group: float | None = None
    seeds: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "standard_accuracy": self.standard_accuracy,
            "cluster_min": self.cluster_min,
            "cluster_accuracies": list(self.cluster_accuracies),
            "cluster_sizes": list(self.cluster_sizes),
            "corruption_accuracies": dict(self.corruption_accuracies),
            "group_accuracies": {str(k): v for k, v in self.group_accuracies.items()},
            "worst_group": self.worst_group,
            "average_group": self.average_group,
            "seeds": dict(self.seeds),
            "config": self.config,
            "wall_time": self.wall_time,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def summary_line(self) -> str:
        """One line of ``key=value`` tokens; values are printed with ``repr``
        so they parse back to the exact report floats."""
        parts = [f"standard={self.standard_accuracy!r}", f"cluster_min={self.cluster_min!r}"]
        if self.corruption_accuracies:
            kind = min(self.corruption_accuracies, key=lambda k: (self.corruption_accuracies[k], k))
            parts.append(f"worst_corruption={kind}:{self.corruption_accuracies[kind]!r}")
        if self.worst_group is not None:
            parts.append(f"worst_group={self.worst_group!r}")
        return " ".join(parts)

    def csv_row(self) -> dict:
        return {
            "standard": self.standard_accuracy,
            "cluster_min": self.cluster_min,
            "worst_group": "" if self.worst_group is None else self.worst_group,
            "average_group": "" if self.average_group is None else self.average_group,
            **{f"corruption_{k}": v for k, v in sorted(self.corruption_accuracies.items())},
        }


def robustness_suite(state: ModelState, test: Dataset, corruptions=(), k: int = 10, seed=0,
                     config: dict | None = None) -> EvalReport:
    """Standard, Cluster-min, per-corruption and (with group ids) group accuracies."""
    start = time.perf_counter()
    standard = accuracy(state, test)
    cmin, accs, sizes = cluster_min(state, test, k, seed)
    corr = {}
    for spec in corruptions:
        key = spec.label
        while key in corr:
            key += "'"
        corr[key] = accuracy(state, corrupt(test, spec))
    groups = group_accuracies(state, test)
    worst = min(groups.values()) if groups else None
    average = float(np.mean(list(groups.values()))) if groups else None
    return EvalReport(
        standard_accuracy=standard,
        cluster_min=cmin,
        cluster_accuracies=accs,
        cluster_sizes=sizes,
        corruption_accuracies=corr,
        group_accuracies=groups,
        worst_group=worst,
        average_group=average,
        seeds={"cluster_min": seed, "corruptions": [c.seed for c in corruptions]},
        config=config or {},
        wall_time=time.perf_counter() - start,
    )


def parse_summary_line(line: str) -> dict:
    out = {}
    for token in line.split():
        key, _, value = token.partition("=")
        if ":" in value:
            kind, _, num = value.partition(":")
            out[key] = (kind, float(num))
        else:
            out[key] = float(value)
    return out


def write_csv_summary(rows: list[dict], path) -> None:
    keys: list = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)

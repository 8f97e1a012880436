import json

import jsonschema
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from rdd import numkernel as nk
from rdd.data import CorruptionSpec, Dataset, corrupt, gen_subgroup_mixture
from rdd.distill import SyntheticSet
from rdd.evaluation import (
    REPORT_SCHEMA, EvalReport, accuracy, cluster_min, group_accuracies, parse_summary_line,
    robustness_suite, train_on_synthetic,
)
from rdd.model import ModelSpec, ModelState, init, predict
from rdd.risk import RiskConfig


def _linear(dim, classes):
    return ModelSpec("mlp", (dim,), classes, hidden=())


def _constant_model(dim, classes, winner):
    spec = _linear(dim, classes)
    bias = np.zeros(classes)
    bias[winner] = 1.0
    return ModelState(spec, {"fc0.weight": nk.tensor(np.zeros((dim, classes))),
                             "fc0.bias": nk.tensor(bias)})


def _class_means(data: Dataset) -> SyntheticSet:
    means = np.stack([data.features[data.labels == c].mean(0) for c in range(data.num_classes)])
    return SyntheticSet(means, ipc=1, num_classes=data.num_classes)


# ---------------------------------------------------------------- training

def test_zero_epochs_returns_initialization():
    syn = SyntheticSet(np.random.default_rng(0).normal(size=(4, 3)), ipc=2, num_classes=2)
    spec = _linear(3, 2)
    state = train_on_synthetic(syn, spec, 0, seed=7)
    ref = init(spec, 7)
    for k in ref.params:
        assert torch.equal(state.params[k], ref.params[k])


def test_class_means_train_an_accurate_model():
    data = gen_subgroup_mixture(3, 1, 8, 900, [1.0], 4.0, seed=0)
    state = train_on_synthetic(_class_means(data), _linear(8, 3), 300, seed=0, lr=0.05)
    assert accuracy(state, data) > 0.95


def test_training_is_deterministic():
    data = gen_subgroup_mixture(2, 2, 4, 200, [0.5, 0.5], 2.0, seed=1)
    syn = _class_means(data)
    spec = ModelSpec("mlp", (4,), 2, hidden=(8,))
    a = train_on_synthetic(syn, spec, 40, seed=3)
    b = train_on_synthetic(syn, spec, 40, seed=3)
    for k in a.params:
        assert torch.equal(a.params[k], b.params[k])


def test_robust_training_runs_and_differs_from_plain():
    data = gen_subgroup_mixture(2, 2, 4, 200, [0.5, 0.5], 2.0, seed=1)
    syn = _class_means(data)
    spec = _linear(4, 2)
    plain = train_on_synthetic(syn, spec, 20, seed=0)
    robust = train_on_synthetic(syn, spec, 20, seed=0, risk=RiskConfig(alpha=0.5))
    assert not torch.equal(plain.params["fc0.weight"], robust.params["fc0.weight"])


def test_empty_synthetic_set_is_rejected():
    with pytest.raises(ValueError):
        train_on_synthetic(SyntheticSet(np.zeros((0, 3)), 0, 2), _linear(3, 2), 1, seed=0)


# ---------------------------------------------------------------- metrics

def test_constant_model_accuracy_is_class_share():
    labels = np.array([0] * 70 + [1] * 30)
    data = Dataset(np.random.default_rng(0).normal(size=(100, 3)), labels)
    assert accuracy(_constant_model(3, 2, 0), data) == 0.7


def test_accuracy_matches_loop_oracle():
    data = gen_subgroup_mixture(3, 2, 5, 120, [0.5, 0.5], 1.0, seed=2)
    state = init(_linear(5, 3), 4)
    w = state.params["fc0.weight"].numpy()
    b = state.params["fc0.bias"].numpy()
    hits = 0
    for x, y in zip(data.features, data.labels):
        scores = [sum(x[i] * w[i, c] for i in range(5)) + b[c] for c in range(3)]
        hits += int(np.argmax(scores) == y)
    assert accuracy(state, data) == hits / len(data)


def test_cluster_min_finds_planted_failure_blob():
    rng = np.random.default_rng(0)
    easy = rng.normal(0.0, 0.1, size=(90, 2))
    hard = rng.normal(20.0, 0.1, size=(10, 2))
    data = Dataset(np.vstack([easy, hard]), np.array([0] * 90 + [1] * 10))
    cmin, accs, sizes = cluster_min(_constant_model(2, 2, 0), data, k=2, seed=0)
    assert cmin == 0.0
    assert sorted(sizes) == [10, 90]
    assert sorted(accs) == [0.0, 1.0]


def test_cluster_min_with_singletons_is_the_breakdown():
    # k = n: every point is its own subset, so any error drives the minimum to 0
    data = gen_subgroup_mixture(2, 1, 3, 30, [1.0], 0.5, seed=3)
    state = init(_linear(3, 2), 0)
    cmin, accs, sizes = cluster_min(state, data, k=len(data), seed=0)
    assert sizes == [1] * len(data)
    assert cmin == (1.0 if accuracy(state, data) == 1.0 else 0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_cluster_min_bounded_by_standard_accuracy(seed, k):
    data = gen_subgroup_mixture(2, 2, 3, 60, [0.5, 0.5], 1.5, seed=seed)
    state = init(_linear(3, 2), seed)
    cmin, accs, sizes = cluster_min(state, data, k=k, seed=seed)
    assert cmin <= accuracy(state, data) + 1e-12
    assert sum(sizes) == len(data)
    # the size-weighted mean of the subset accuracies is the standard accuracy
    weighted = sum(a * s for a, s in zip(accs, sizes) if a is not None) / len(data)
    assert abs(weighted - accuracy(state, data)) < 1e-12


def test_group_accuracies_cover_present_groups():
    data = gen_subgroup_mixture(2, 2, 3, 200, [0.5, 0.5], 2.0, seed=5)
    state = init(_linear(3, 2), 1)
    groups = group_accuracies(state, data)
    assert sorted(groups) == sorted(np.unique(data.group_ids).tolist())
    correct = predict(state, data.features) == data.labels
    for g, acc in groups.items():
        assert acc == correct[data.group_ids == g].mean()


# ---------------------------------------------------------------- suite and report

def _report(corruptions=(), seed=0):
    data = gen_subgroup_mixture(3, 3, 4, 300, [0.4, 0.4, 0.2], 3.0, seed=seed)
    state = train_on_synthetic(_class_means(data), _linear(4, 3), 50, seed=0, lr=0.05)
    return robustness_suite(state, data, corruptions, k=5, seed=seed, config={"note": "t"}), state, data


def test_suite_without_corruptions():
    report, state, data = _report()
    assert report.corruption_accuracies == {}
    assert report.standard_accuracy == accuracy(state, data)
    assert report.worst_group <= report.average_group


def test_double_invert_equals_standard_on_grid_values():
    # inversion is exact on dyadic values, so two of them undo each other
    data = Dataset(np.round(np.random.default_rng(0).random((50, 3)) * 64) / 64,
                   np.arange(50) % 2)
    state = init(_linear(3, 2), 0)
    spec = CorruptionSpec("invert")
    twice = corrupt(corrupt(data, spec), spec)
    assert accuracy(state, twice) == accuracy(state, data)


def test_suite_report_matches_schema_and_summary():
    report, _, _ = _report([CorruptionSpec("noise", sigma=0.5, seed=1), CorruptionSpec("invert")])
    payload = json.loads(report.to_json())
    jsonschema.validate(payload, REPORT_SCHEMA)
    parsed = parse_summary_line(report.summary_line())
    assert parsed["standard"] == payload["standard_accuracy"]
    assert parsed["cluster_min"] == payload["cluster_min"]
    assert parsed["worst_group"] == payload["worst_group"]
    kind, value = parsed["worst_corruption"]
    assert value == min(payload["corruption_accuracies"].values())
    assert payload["corruption_accuracies"][kind] == value


def test_schema_rejects_out_of_range_accuracy():
    report, _, _ = _report()
    payload = report.to_dict()
    payload["standard_accuracy"] = 1.5
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(payload, REPORT_SCHEMA)


def test_report_without_groups_serializes_nulls():
    data = Dataset(np.random.default_rng(1).normal(size=(40, 2)), np.arange(40) % 2)
    report = robustness_suite(init(_linear(2, 2), 0), data, k=3)
    payload = report.to_dict()
    assert payload["worst_group"] is None and payload["group_accuracies"] == {}
    jsonschema.validate(payload, REPORT_SCHEMA)
    assert "worst_group" not in report.summary_line()


def test_csv_row_lists_corruptions_in_order():
    report = EvalReport(0.5, 0.25, [0.25, 0.75], [2, 2],
                        corruption_accuracies={"invert": 0.1, "gaussian-noise": 0.4})
    row = report.csv_row()
    assert list(row)[-2:] == ["corruption_gaussian-noise", "corruption_invert"]
    assert row["worst_group"] == ""

import csv
import json
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from rdd.cli import main
from rdd.config import ConfigError, load_config, parse_config, set_path, train_and_test
from rdd.data import save_csv
from rdd.distill import init_synthetic, load_manifest, load_synthetic
from rdd.evaluation import REPORT_SCHEMA, parse_summary_line

SMALL = {
    "seed": 3,
    "output_dir": "run",
    "data": {"source": "generator", "n": 300, "dim": 6},
    "model": {"hidden": [16]},
    "distill": {"ipc": 2, "iterations": 4, "batch_per_class": 32},
    "eval": {"epochs": 30},
}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("RDD_OUTPUT_ROOT", raising=False)
    return tmp_path


def _write(path, raw):
    path.write_text(json.dumps(raw), encoding="utf-8")
    return str(path)


# ---------------------------------------------------------------- config

def test_defaults_from_near_empty_config():
    config = parse_config({"data": {"source": "generator"}})
    assert config.risk.alpha == 0.8
    assert config.distill.max_clusters == 10
    assert config.distill.batch_per_class == 256


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        parse_config({"data": {"source": "generator"}, "bogus": 1})
    with pytest.raises(ConfigError, match="distill: unknown key"):
        parse_config({"data": {"source": "generator"}, "distill": {"ipcc": 3}})


def test_type_errors_name_the_field():
    with pytest.raises(ConfigError, match="distill.ipc"):
        parse_config({"data": {"source": "generator"}, "distill": {"ipc": "three"}})


def test_missing_source_is_named():
    with pytest.raises(ConfigError, match="data.source"):
        parse_config({"data": {"n": 10}})
    with pytest.raises(ConfigError, match="data.source"):
        parse_config({})


def test_null_risk_means_plain_mean_loss():
    config = parse_config({"data": {"source": "generator"}, "risk": None})
    assert config.risk is None and config.distill_config().risk is None


def test_blur_on_vector_data_is_a_config_error():
    with pytest.raises(ConfigError, match="blur"):
        parse_config({"data": {"source": "generator"}, "eval": {"corruptions": ["blur"]}})


def test_set_path_copies_and_rejects_unknown():
    raw = {"data": {"source": "generator"}}
    out = set_path(raw, "risk.alpha", 0.4)
    assert out["risk"]["alpha"] == 0.4 and "risk" not in raw
    with pytest.raises(ConfigError):
        set_path(raw, "distill.nope", 1)


def test_json_errors_report_the_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "data": {"source": "generator"},\n  oops\n}', encoding="utf-8")
    with pytest.raises(ConfigError, match="line 3"):
        load_config(path)


# ---------------------------------------------------------------- distill

def test_distill_writes_set_manifest_and_log(workdir):
    assert main(["distill", "--config", _write(workdir / "c.json", SMALL)]) == 0
    out = workdir / "run"
    syn = load_synthetic(out / "synthetic.rdds")
    assert syn.features.shape == (6, 6)
    manifest = load_manifest(out / "synthetic.rdds")
    assert manifest["config"]["seed"] == 3
    assert manifest["seeds"]["init_synthetic"] == [3, 0]
    records = [json.loads(line) for line in (out / "train_log.jsonl").read_text().splitlines()]
    assert [r["iteration"] for r in records] == [0, 1, 2, 3]
    assert (out / "train_log.png").stat().st_size > 0


def test_zero_iterations_emit_initial_set(workdir):
    raw = set_path(SMALL, "distill.iterations", 0)
    assert main(["distill", "--config", _write(workdir / "c.json", raw)]) == 0
    syn = load_synthetic(workdir / "run" / "synthetic.rdds")
    config = parse_config(raw)
    train, _ = train_and_test(config)
    ref = init_synthetic(train, 2, "random-real", [3, 0])
    assert np.array_equal(syn.features, ref.features)
    assert (workdir / "run" / "train_log.jsonl").read_text() == ""


def test_missing_field_exits_2_and_names_it(workdir, capsys):
    code = main(["distill", "--config", _write(workdir / "c.json", {"data": {"n": 5}})])
    assert code == 2
    assert "data.source" in capsys.readouterr().err


def test_missing_config_file_exits_2(workdir):
    assert main(["distill", "--config", "nope.json"]) == 2


def test_usage_error_exits_2(workdir):
    with pytest.raises(SystemExit) as exc:
        main(["distill"])
    assert exc.value.code == 2


def test_runtime_failure_exits_1(workdir, capsys):
    raw = set_path(SMALL, "data.source", "csv")
    raw = set_path(raw, "data.path", "absent.csv")
    raw["test"] = {"source": "csv", "path": "absent.csv"}
    assert main(["distill", "--config", _write(workdir / "c.json", raw)]) == 1
    assert "absent.csv" in capsys.readouterr().err


def test_distill_reruns_are_byte_identical(workdir):
    cfg = _write(workdir / "c.json", SMALL)
    main(["distill", "--config", cfg])
    first = (workdir / "run" / "synthetic.rdds").read_bytes()
    log = (workdir / "run" / "train_log.jsonl").read_bytes()
    main(["distill", "--config", cfg])
    assert (workdir / "run" / "synthetic.rdds").read_bytes() == first
    assert (workdir / "run" / "train_log.jsonl").read_bytes() == log


def test_output_root_env_is_honored(workdir, monkeypatch):
    monkeypatch.setenv("RDD_OUTPUT_ROOT", str(workdir / "root"))
    assert main(["distill", "--config", _write(workdir / "c.json", SMALL)]) == 0
    assert (workdir / "root" / "run" / "synthetic.rdds").exists()
    assert not (workdir / "run").exists()


# ---------------------------------------------------------------- eval

@pytest.fixture
def distilled(workdir):
    assert main(["distill", "--config", _write(workdir / "c.json", SMALL)]) == 0
    return workdir / "run" / "synthetic.rdds"


def test_eval_report_schema_and_summary(distilled, capsys):
    capsys.readouterr()
    assert main(["eval", "--synthetic", str(distilled), "--test", "gen"]) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    report = json.loads((distilled.parent / "eval" / "report.json").read_text())
    jsonschema.validate(report, REPORT_SCHEMA)
    parsed = parse_summary_line(line)
    assert parsed["standard"] == report["standard_accuracy"]
    assert parsed["cluster_min"] == report["cluster_min"]
    assert parsed["worst_group"] == report["worst_group"]
    kind, value = parsed["worst_corruption"]
    assert report["corruption_accuracies"][kind] == value
    assert sorted(report["corruption_accuracies"]) == ["invert", "noise"]


def test_random_init_is_at_chance(distilled, capsys):
    # separation 0: features carry no label information and classes are balanced
    test = "gen:separation=0,n=3000,group_weights=0.5/0.25/0.25"
    assert main(["eval", "--synthetic", str(distilled), "--test", test, "--epochs", "0",
                 "--output-dir", "chance"]) == 0
    report = json.loads((distilled.parent.parent / "chance" / "report.json").read_text())
    assert abs(report["standard_accuracy"] - 1 / 3) <= 0.1


def test_eval_flag_errors_exit_2(distilled):
    assert main(["eval", "--synthetic", str(distilled), "--test", "gen",
                 "--corruptions", "fog"]) == 2
    assert main(["eval", "--synthetic", str(distilled), "--test", "gen",
                 "--corruptions", "blur"]) == 2
    assert main(["eval", "--synthetic", "missing.rdds", "--test", "gen"]) == 2
    assert main(["eval", "--synthetic", str(distilled), "--test", "gen:dim=4"]) == 2


def test_eval_on_csv_test_file(distilled, workdir):
    _, test = train_and_test(parse_config(SMALL))
    save_csv(test, workdir / "test.csv")
    assert main(["eval", "--synthetic", str(distilled), "--test", "test.csv",
                 "--output-dir", "csv_eval"]) == 0
    from_csv = json.loads((workdir / "csv_eval" / "report.json").read_text())
    assert main(["eval", "--synthetic", str(distilled), "--test", "gen"]) == 0
    from_gen = json.loads((distilled.parent / "eval" / "report.json").read_text())
    assert from_csv["standard_accuracy"] == from_gen["standard_accuracy"]
    assert from_csv["group_accuracies"] == from_gen["group_accuracies"]


def test_eval_reports_identical_apart_from_wall_time(distilled):
    reports = []
    for _ in range(2):
        assert main(["eval", "--synthetic", str(distilled), "--test", "gen"]) == 0
        report = json.loads((distilled.parent / "eval" / "report.json").read_text())
        report.pop("wall_time")
        reports.append(report)
    assert reports[0] == reports[1]


# ---------------------------------------------------------------- sweep

def test_alpha_sweep_rows_match_reports(workdir):
    raw = set_path(SMALL, "distill.iterations", 2)
    cfg = _write(workdir / "c.json", raw)
    before = (workdir / "c.json").read_bytes()
    values = "0.2,0.4,0.6,0.8,1.0"
    assert main(["sweep", "--config", cfg, "--param", "alpha", "--values", values]) == 0
    assert (workdir / "c.json").read_bytes() == before
    out = workdir / "run" / "sweep_risk.alpha"
    with (out / "sweep.csv").open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["value"]) for r in rows] == [0.2, 0.4, 0.6, 0.8, 1.0]
    for r in rows:
        assert r["status"] == "ok"
        report = json.loads((workdir / r["run_dir"] / "eval" / "report.json").read_text())
        assert float(r["standard"]) == report["standard_accuracy"]
        assert float(r["cluster_min"]) == report["cluster_min"]
        assert float(r["worst_group"]) == report["worst_group"]
        manifest = load_manifest(workdir / r["run_dir"] / "synthetic.rdds")
        assert manifest["config"]["risk"]["alpha"] == float(r["value"])
    assert (out / "sweep.png").exists()


def test_sweep_unknown_key_exits_2_before_compute(workdir):
    cfg = _write(workdir / "c.json", SMALL)
    assert main(["sweep", "--config", cfg, "--param", "distill.nope", "--values", "1,2"]) == 2
    assert not (workdir / "run").exists()


def test_sweep_invalid_value_exits_2(workdir):
    cfg = _write(workdir / "c.json", SMALL)
    assert main(["sweep", "--config", cfg, "--param", "alpha", "--values", "0.5,1.5"]) == 2


def test_module_entry_point(workdir):
    result = subprocess.run([sys.executable, "-m", "rdd", "--version"], capture_output=True,
                            text=True, check=False)
    assert result.returncode == 0 and result.stdout.startswith("rdd ")

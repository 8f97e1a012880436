"""Command-line interface: ``distill``, ``eval`` and ``sweep``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage.
Relative output directories are placed under ``$RDD_OUTPUT_ROOT`` when set.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .config import (
    OUTPUT_ROOT_ENV, ConfigError, DataSection, EvalSection, RunConfig, _build, corruption_specs,
    load_config, load_dataset, model_spec, parse_config, resolve_output, set_path,
    to_jsonable, train_and_test,
)
from .data import Dataset, DataError, load_csv, load_idx_images
from .distill import (
    DistillError, SyntheticSet, default_model_spec, distill_first_order, distill_zero_order,
    load_manifest, load_synthetic, save_synthetic,
)
from .evaluation import EvalReport, robustness_suite, train_on_synthetic
from .model import ModelSpec
from .plotting import plot_report, plot_sweep, plot_training_log

log = logging.getLogger("rdd")

SWEEP_ALIASES = {
    "alpha": "risk.alpha",
    "clusters": "distill.max_clusters",
    "max_clusters": "distill.max_clusters",
    "batch": "distill.batch_per_class",
    "batch_per_class": "distill.batch_per_class",
    "ipc": "distill.ipc",
    "iterations": "distill.iterations",
}
SWEEP_FIELDS = ["param", "value", "status", "standard", "cluster_min", "worst_group",
                "average_group", "run_dir"]


class RunError(RuntimeError):
    pass


# ---------------------------------------------------------------- pipelines

def run_distill(config: RunConfig, out: Path) -> tuple[SyntheticSet, ModelSpec, Dataset]:
    """Distill per ``config`` and write the set, its manifest and the log to ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    train, _ = train_and_test(config)
    spec = model_spec(config, train)
    dcfg = config.distill_config()
    fn = distill_first_order if config.distill.method == "first-order" else distill_zero_order
    log_path = out / "train_log.jsonl"
    with log_path.open("w", encoding="utf-8") as fh:
        def emit(record):
            fh.write(json.dumps(record, sort_keys=True, default=to_jsonable) + "\n")
        synthetic, records = fn(train, dcfg, spec, on_iteration=emit)
    manifest = {
        "version": __version__,
        "method": config.distill.method,
        "config": config.to_dict(),
        "seeds": {
            "run": config.seed,
            "init_synthetic": [config.seed, 0],
            "subsample": [config.seed, 1, "iteration"],
            "centers": [config.seed, 2, "iteration"],
            "network": [config.seed, 3, "restart"],
            "probes": [config.seed, 4, "epoch"],
            "eval": config.eval_seed(),
        },
        "iterations": len(records),
        "model_spec": spec.to_dict(),
        "train_size": len(train),
        "synthetic_sha256": synthetic.digest(),
    }
    save_synthetic(synthetic, out / "synthetic.rdds", manifest)
    if records:
        plot_training_log(records, out / "train_log.png")
    return synthetic, spec, train


def run_eval(synthetic: SyntheticSet, spec: ModelSpec, test: Dataset, section: EvalSection,
             seed: int, risk, echo: dict, out: Path) -> EvalReport:
    """Train on ``synthetic``, score on ``test``, write ``report.json`` and a figure."""
    out.mkdir(parents=True, exist_ok=True)
    state = train_on_synthetic(synthetic, spec, section.epochs, seed, lr=section.lr,
                               momentum=section.momentum,
                               risk=risk if section.robust_training else None)
    corruptions = corruption_specs(section.corruptions, section, seed,
                                   image_data=len(test.feature_shape) == 3)
    report = robustness_suite(state, test, corruptions, section.cluster_min_k, seed,
                              config={**echo, "eval": asdict(section), "eval_seed": seed})
    payload = report.to_dict()
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True,
                                                default=to_jsonable) + "\n", encoding="utf-8")
    with (out / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
        row = report.csv_row()
        writer = csv.DictWriter(fh, fieldnames=list(row))
        writer.writeheader()
        writer.writerow(row)
    plot_report(payload, out / "report.png")
    return report


# ---------------------------------------------------------------- test sources

def _load_test(source: str, manifest: dict | None) -> tuple[Dataset, dict]:
    """Resolve ``--test``: a CSV / IDX / JSON generator-spec path, or ``gen[:k=v,...]``."""
    if source == "gen" or source.startswith("gen:"):
        if manifest is None:
            raise ConfigError("--test gen needs the synthetic set's manifest")
        run = parse_config(manifest["config"])
        overrides = _parse_overrides(source[4:]) if source.startswith("gen:") else {}
        if not overrides:
            return train_and_test(run)[1], {"test": source}
        if run.test is not None:
            base = asdict(run.test)
        else:
            data_seed = run.seed if run.data.seed is None else run.data.seed
            layout = run.data.layout_seed if run.data.layout_seed is not None else data_seed
            base = {**asdict(run.data), "seed": data_seed + 1, "layout_seed": layout}
        section = _build(DataSection, {**base, **overrides}, "test")
        return load_dataset(section, run.seed + 1), {"test": source, "test_spec": asdict(section)}
    path = Path(source)
    if not path.exists():
        raise ConfigError(f"--test: no such file {source}")
    if path.suffix == ".json":
        section = _build(DataSection, json.loads(path.read_text(encoding="utf-8")), "test")
        return load_dataset(section, 0), {"test": source, "test_spec": asdict(section)}
    if path.suffix == ".csv":
        with path.open(encoding="utf-8") as fh:
            header = next(csv.reader(fh), [])
        group = "group" if "group" in [h.strip() for h in header] else None
        return load_csv(path, group_column=group), {"test": source}
    labels = path.with_name(path.name.replace("images", "labels"))
    return load_idx_images(path, labels if labels != path and labels.exists() else None), {"test": source}


def _parse_overrides(text: str) -> dict:
    out = {}
    for item in filter(None, text.split(",")):
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--test: expected key=value, got {item!r}")
        if "/" in value:
            out[key] = [float(v) for v in value.split("/")]
        else:
            out[key] = _parse_value(value)
    return out


# ---------------------------------------------------------------- commands

def cmd_distill(args) -> int:
    config = load_config(args.config)
    out = config.output_path()
    synthetic, _, _ = run_distill(config, out)
    print(f"wrote {out / 'synthetic.rdds'} ({synthetic.features.shape[0]} points, "
          f"sha256 {synthetic.digest()[:12]})")
    return 0


def cmd_eval(args) -> int:
    synthetic_path = Path(args.synthetic)
    try:
        synthetic = load_synthetic(synthetic_path)
    except FileNotFoundError:
        raise ConfigError(f"--synthetic: no such file {args.synthetic}") from None
    manifest = load_manifest(synthetic_path)
    run = parse_config(manifest["config"]) if manifest else None
    section = run.eval if run else EvalSection()
    if args.corruptions is not None:
        section.corruptions = [c for c in args.corruptions.split(",") if c]
    for name in ("epochs", "lr", "cluster_min_k"):
        if getattr(args, name) is not None:
            setattr(section, name, getattr(args, name))
    seed = args.seed if args.seed is not None else (run.eval_seed() if run else 0)
    corruption_specs(section.corruptions, section, seed)  # validate before compute

    test, echo = _load_test(args.test, manifest)
    if manifest and "model_spec" in manifest:
        spec = ModelSpec.from_dict(manifest["model_spec"])
    else:
        spec = default_model_spec(synthetic.as_dataset())
    if tuple(test.feature_shape) != tuple(spec.input_shape):
        raise ConfigError(f"--test: feature shape {test.feature_shape} does not match "
                          f"the synthetic set's {tuple(spec.input_shape)}")
    corruption_specs(section.corruptions, section, seed, image_data=len(test.feature_shape) == 3)
    if args.output_dir is not None:
        out = resolve_output(args.output_dir)
    else:
        out = resolve_output("eval") if _env_root() else synthetic_path.parent / "eval"
    echo = {**echo, "synthetic": str(synthetic_path), "synthetic_sha256": synthetic.digest()}
    report = run_eval(synthetic, spec, test, section, seed, run.risk if run else None, echo, out)
    print(report.summary_line())
    return 0


def _env_root() -> bool:
    return bool(os.environ.get(OUTPUT_ROOT_ENV))


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def cmd_sweep(args) -> int:
    path = Path(args.config)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    base = parse_config(raw)
    key = SWEEP_ALIASES.get(args.param, args.param)
    values = [_parse_value(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values is empty")
    # validate every variant before any compute
    variants = []
    for value in values:
        variant = set_path(raw, key, value)
        variant.pop("output_dir", None)
        variants.append((value, parse_config(variant)))

    out = base.output_path() / f"sweep_{key}"
    out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    failed = 0
    for value, config in variants:
        run_dir = out / f"{key}={value}"
        row = {"param": key, "value": value, "run_dir": str(run_dir)}
        try:
            synthetic, spec, _ = run_distill(config, run_dir)
            _, test = train_and_test(config)
            report = run_eval(synthetic, spec, test, config.eval, config.eval_seed(), config.risk,
                              {"sweep": {"param": key, "value": value}}, run_dir / "eval")
            row.update(status="ok", standard=report.standard_accuracy,
                       cluster_min=report.cluster_min, worst_group=report.worst_group,
                       average_group=report.average_group)
        except (DistillError, DataError, RunError, ValueError, RuntimeError, OSError) as exc:
            failed += 1
            row["status"] = f"error: {exc}"
            log.error("sweep value %s failed: %s", value, exc)
        rows.append(row)
        _write_sweep(out / "sweep.csv", rows)
        print(f"{key}={value}: {row['status']}")
    plot_sweep(key, rows, out / "sweep.png")
    return 1 if failed else 0


def _write_sweep(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if r.get(k) is None else r.get(k, "")) for k in SWEEP_FIELDS})


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdd", description="Robust dataset distillation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("distill", help="distill a synthetic set from a run config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="train on a synthetic set and score a test set")
    p.add_argument("--synthetic", required=True, help="synthetic set file (.rdds)")
    p.add_argument("--test", required=True,
                   help="CSV / IDX / generator-spec JSON path, or gen[:key=value,...]")
    p.add_argument("--corruptions", default=None, help="comma list of noise,blur,invert")
    p.add_argument("--cluster-min-k", dest="cluster_min_k", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--output-dir", dest="output_dir", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="distill and evaluate once per parameter value")
    p.add_argument("--config", required=True)
    p.add_argument("--param", required=True, help="alpha, clusters, batch, ipc or a dotted key")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DistillError, DataError, RunError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface: ``ncpp <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure
(non-finite loss), 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from importlib import metadata, resources
from pathlib import Path

from .baselines import fit_baselines, predict_baseline
from .checkpoint import CheckpointError
from .encode import Transforms, fit_transforms
from .evaluation import EvalReport, aggregate_cv, compute_metrics, export_report
from .explain import explain, export_importance
from .ingest import DataError, Dataset, load_dataset, write_dataset
from .model import ConfigError, NCPPParams, predict
from .schema import SchemaError, get_suite, load_schema
from .synth import SynthConfig, generate, write_raw_csv
from .training import NumericError, TrainConfig, cross_validate, split_dataset, train

log = logging.getLogger("ncpp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4
SEED_ENV = "NCPP_SEED"

# Ablation arms in comparison-table order: name -> TrainConfig overrides.
ARMS = {
    "full": {},
    "no-intra": {"intra_attention": False},
    "no-memory": {"ablate_groups": ["memory"]},
    "no-other": {"ablate_groups": ["other"]},
    "no-cpu": {"ablate_groups": ["cpu"]},
    "no-workload": {"ablate_groups": ["char"]},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------- manifest

def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    seed: int | None = None
    config_path: str | None = None
    config_hash: str | None = None
    effective_config: dict = field(default_factory=dict)
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, dict[str, str]] = field(default_factory=dict)
    wall_time: float = 0.0
    version: str = field(default_factory=_version)

    def add_input(self, path) -> None:
        if path is not None and Path(path).is_file():
            self.inputs[str(path)] = file_sha256(path)

    def add_output(self, name: str, path) -> None:
        self.outputs[name] = {"path": str(path), "sha256": file_sha256(path)}

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / f"{self.command}_manifest.json"
        body = {k: getattr(self, k) for k in ("command", "argv", "seed", "config_path", "config_hash",
                                               "effective_config", "inputs", "outputs", "wall_time",
                                               "version")}
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def verify_manifest(path) -> list[str]:
    """Output entries whose file is missing or whose hash no longer matches."""
    body = json.loads(Path(path).read_text(encoding="utf-8"))
    bad = []
    for name, entry in body["outputs"].items():
        p = Path(entry["path"])
        if not p.is_file() or file_sha256(p) != entry["sha256"]:
            bad.append(name)
    return bad


# ---------------------------------------------------------------- config

def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("ncpp.presets").iterdir() if p.name.endswith(".json"))


def read_config_source(source: str | None) -> tuple[dict, str | None, str | None]:
    """(values, path label, sha256) for a config file path or ``preset:<name>``."""
    if source is None:
        return {}, None, None
    if source.startswith("preset:"):
        name = source[len("preset:"):]
        res = resources.files("ncpp.presets") / f"{name}.json"
        if not res.is_file():
            raise UsageError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
        raw = res.read_bytes()
    else:
        raw = Path(source).read_bytes()
    try:
        values = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise DataError(f"{source}: invalid JSON ({exc})") from None
    if not isinstance(values, dict):
        raise DataError(f"{source}: expected a JSON object")
    return values, source, hashlib.sha256(raw).hexdigest()


_TRAIN_FLAGS = {"epochs": "epochs", "batch_size": "batch_size", "lr": "lr_initial", "decay_rate": "decay_rate",
                "decay_steps": "decay_steps", "heads": "H", "layers": "L", "delta": "delta", "seed": "seed",
                "d_model": "d_model", "suite": "suite", "k": "k", "inter_mode": "inter_mode",
                "split_mode": "split_mode"}


def resolve_train_config(args) -> tuple[TrainConfig, str | None, str | None]:
    """Defaults, then config file, then NCPP_SEED, then explicit flags."""
    values, label, digest = read_config_source(getattr(args, "config", None))
    values = dict(values)
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
    for flag, key in _TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    if getattr(args, "fractions", None) is not None:
        values["fractions"] = list(args.fractions)
    try:
        cfg = TrainConfig.from_json(values).validate()
        cfg.model_config(1).validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training configuration: {exc}") from None
    return cfg, label, digest


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="training config JSON, or preset:<name>")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--decay-rate", dest="decay_rate", type=float)
    p.add_argument("--decay-steps", dest="decay_steps", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--delta", type=float, help="Huber threshold")
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--inter-mode", dest="inter_mode", choices=("pooled", "sequence"))
    p.add_argument("--split-mode", dest="split_mode", choices=("flat", "nested"))
    p.add_argument("--fractions", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--seed", type=int)


def _add_data_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--data", required=required, help="raw long-format or consolidated wide CSV")
    p.add_argument("--schema", help="feature schema JSON (default: built-in 35-feature schema)")
    p.add_argument("--suite", help="suite name (inferred when the file holds one suite)")


# ---------------------------------------------------------------- helpers

def _load(args, cfg: TrainConfig | None = None) -> tuple[Dataset, object]:
    schema = load_schema(args.schema)
    data = load_dataset(args.data, schema, args.suite)
    if len(data) == 0:
        raise DataError(f"{args.data}: no usable records")
    if cfg is not None:
        cfg.suite = data.suite.name
    return data, schema


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(path) -> tuple[NCPPParams, Transforms, dict]:
    params, meta = NCPPParams.load(path)
    sidecar_path = Path(path).with_suffix(".json")
    if not sidecar_path.is_file():
        raise CheckpointError(f"{path}: sidecar {sidecar_path.name} not found")
    side = json.loads(sidecar_path.read_text(encoding="utf-8"))
    transforms = Transforms.load(sidecar_path.parent / side["transforms"])
    if transforms.schema.digest() != side["schema_hash"]:
        raise CheckpointError(f"{path}: transforms schema does not match the checkpoint")
    return params, transforms, side


def _report(params: NCPPParams, transforms: Transforms, data: Dataset) -> EvalReport:
    batch = transforms.encode(data)
    return compute_metrics(predict(params, batch), batch.labels, data.suite, mask=batch.label_mask)


def _baseline_reports(train_d, val_d, test_d, transforms, out: Path, manifest: RunManifest) -> dict:
    rows = {}
    for kind, model in fit_baselines(train_d, val_d, transforms).items():
        path = out / f"baseline_{kind}.json"
        model.save(path)
        manifest.add_output(f"baseline_{kind}", path)
        rep = compute_metrics(predict_baseline(model, test_d, transforms), test_d.labels(), test_d.suite,
                              mask=test_d.label_mask())
        rep.meta = {"model": kind, "l1": model.reg.l1, "l2": model.reg.l2}
        for p in export_report(rep, out / f"report_baseline_{kind}", "both"):
            manifest.add_output(p.name, p)
        rows[kind] = rep
    return rows


# ---------------------------------------------------------------- commands

def cmd_synth(args, manifest: RunManifest) -> None:
    values, label, digest = read_config_source(args.config)
    values = dict(values)
    for key in ("n_records", "noise", "family", "seed", "suite"):
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None and args.seed is None:
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
    try:
        cfg = SynthConfig(**values).validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synth configuration: {exc}") from None
    manifest.config_path, manifest.config_hash, manifest.seed = label, digest, cfg.seed
    manifest.effective_config = dict(vars(cfg))
    schema = load_schema(args.schema)
    dataset, truth = generate(cfg, schema)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.format == "wide":
        write_dataset(dataset, out, schema)
    else:
        write_raw_csv(dataset, out, schema)
    truth_path = out.with_name(out.stem + "_truth.json")
    truth.save(truth_path)
    manifest.add_output("data", out)
    manifest.add_output("truth", truth_path)
    print(f"wrote {len(dataset)} records to {out} (linear-fit MAPE "
          f"{truth.calibration.get('achieved_linear_mape', float('nan')):.2f}% at calibration)")


def cmd_ingest(args, manifest: RunManifest) -> None:
    manifest.add_input(args.data)
    schema = load_schema(args.schema)
    data = load_dataset(args.data, schema, args.suite, threshold=args.threshold, policy=args.policy)
    out = _out_dir(args)
    path = out / "dataset.csv"
    write_dataset(data, path, schema)
    manifest.add_output("dataset", path)
    summary = {"suite": data.suite.name, "records": len(data), "dropped": data.dropped,
               "features": len(schema), "groups": {g: n for g, n in schema.counts().items() if n}}
    spath = out / "ingest_summary.json"
    spath.write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    manifest.add_output("summary", spath)
    print(json.dumps(summary))


def cmd_train(args, manifest: RunManifest) -> None:
    manifest.add_input(args.data)
    cfg, label, digest = resolve_train_config(args)
    manifest.config_path, manifest.config_hash, manifest.seed = label, digest, cfg.seed
    manifest.effective_config = cfg.to_json()
    data, schema = _load(args, cfg)
    train_d, val_d, test_d = split_dataset(data, cfg.split_spec())
    out = _out_dir(args)
    for name, part in (("train", train_d), ("val", val_d), ("test", test_d)):
        write_dataset(part, out / f"{name}.csv", schema)
        manifest.add_output(f"split_{name}", out / f"{name}.csv")
    transforms = fit_transforms(train_d, schema)
    progress = _progress(cfg) if args.verbose else None
    result = train(cfg, train_d, val_d, transforms, out_dir=out, log=progress)
    for name in ("model.ckpt", "model.json", "best.ckpt", "best.json", "transforms.json", "history.csv",
                 "train_config.json"):
        manifest.add_output(name, out / name)
    rep = _report(result.params, transforms, test_d)
    rep.meta = {"model": "ncpp", "split": "test"}
    for p in export_report(rep, out / "report", "both"):
        manifest.add_output(p.name, p)
    line = f"test MAE {rep.overall.mae:.4g}  MSE {rep.overall.mse:.4g}  MAPE {rep.overall.mape:.3f}%"
    if args.baselines:
        for kind, brep in _baseline_reports(train_d, val_d, test_d, transforms, out, manifest).items():
            line += f"\n{kind:>10} MAPE {brep.overall.mape:.3f}%"
    print(line)


def cmd_cv(args, manifest: RunManifest) -> None:
    manifest.add_input(args.data)
    cfg, label, digest = resolve_train_config(args)
    manifest.config_path, manifest.config_hash, manifest.seed = label, digest, cfg.seed
    manifest.effective_config = cfg.to_json()
    data, schema = _load(args, cfg)
    train_d, val_d, _ = split_dataset(data, cfg.split_spec())
    pooled = Dataset(data.suite, train_d.records + val_d.records)
    out = _out_dir(args)
    reports = []
    for i, (res, fold_val) in enumerate(cross_validate(cfg, pooled, schema)):
        rep = _report(res.params, res.transforms, fold_val)
        rep.meta = {"fold": i, "seed": cfg.seed + i}
        for p in export_report(rep, out / f"report_fold{i}", "both"):
            manifest.add_output(p.name, p)
        reports.append(rep)
    agg = aggregate_cv(reports)
    for p in export_report(agg, out / "report_cv", "both"):
        manifest.add_output(p.name, p)
    print(f"{agg.folds}-fold mean: MAE {agg.overall.mae:.4g}  MSE {agg.overall.mse:.4g}  "
          f"MAPE {agg.overall.mape:.3f}%")


def cmd_evaluate(args, manifest: RunManifest) -> None:
    manifest.add_input(args.model)
    manifest.add_input(args.data)
    params, transforms, side = _load_model(args.model)
    data = load_dataset(args.data, transforms.schema, side["suite"]["name"])
    rep = _report(params, transforms, data)
    rep.meta = {"model": str(args.model), "data": str(args.data)}
    out = _out_dir(args)
    for p in export_report(rep, out / args.name, "both"):
        manifest.add_output(p.name, p)
    print(f"MAE {rep.overall.mae:.4g}  MSE {rep.overall.mse:.4g}  MAPE {rep.overall.mape:.3f}%")


def cmd_predict(args, manifest: RunManifest) -> None:
    manifest.add_input(args.model)
    manifest.add_input(args.data)
    params, transforms, side = _load_model(args.model)
    suite = get_suite(side["suite"]["name"])
    data = load_dataset(args.data, transforms.schema, suite.name)
    pred = predict(params, transforms.encode(data))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["row"] + suite.label_columns())
        for i, row in enumerate(pred):
            w.writerow([i] + [repr(float(v)) for v in row])
    manifest.add_output("predictions", out)
    print(f"wrote {len(pred)} prediction rows to {out}")


def cmd_explain(args, manifest: RunManifest) -> None:
    manifest.add_input(args.model)
    manifest.add_input(args.data)
    params, transforms, side = _load_model(args.model)
    data = load_dataset(args.data, transforms.schema, side["suite"]["name"])
    if len(data) == 0:
        raise DataError(f"{args.data}: no records to explain")
    sample = "mean" if args.sample == "mean" else int(args.sample)
    head = "mean" if args.head == "mean" else int(args.head)
    try:
        report = explain(params, transforms.encode(data), sample, head, args.layer, args.reduction,
                         side["suite"]["name"])
    except IndexError as exc:
        raise UsageError(str(exc)) from None
    written = export_importance(report, _out_dir(args))
    for paths in written.values():
        for p in paths:
            manifest.add_output(p.name, p)
    scores = ", ".join(f"{g}={s:.3f}" for g, s in zip(*report.inter))
    print(f"inter-group importance: {scores}")


def run_ablation_suite(cfg: TrainConfig, train_d: Dataset, val_d: Dataset, test_d: Dataset,
                       transforms: Transforms, arms=None, out_dir=None) -> dict[str, EvalReport]:
    """Train and test each ablation arm with identical data, transforms and seed."""
    arms = list(ARMS) if arms is None else list(arms)
    reports = {}
    for arm in arms:
        if arm not in ARMS:
            raise UsageError(f"unknown ablation arm {arm!r}; known: {', '.join(ARMS)}")
        arm_cfg = TrainConfig.from_json(dict(cfg.to_json(), **ARMS[arm]))
        arm_dir = Path(out_dir) / arm if out_dir is not None else None
        res = train(arm_cfg, train_d, val_d, transforms, out_dir=arm_dir)
        rep = _report(res.params, transforms, test_d)
        rep.meta = {"arm": arm, "overrides": ARMS[arm]}
        if arm_dir is not None:
            export_report(rep, arm_dir / "report", "both")
        reports[arm] = rep
    return reports


def write_comparison(reports: dict[str, EvalReport], path) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["experiment", "arm", "mae", "mse", "mape"])
        order = [a for a in ARMS if a in reports]
        for a in order:
            r = reports[a].overall
            w.writerow([list(ARMS).index(a) + 1, a, repr(r.mae), repr(r.mse), repr(r.mape)])
    return Path(path)


def cmd_ablate(args, manifest: RunManifest) -> None:
    manifest.add_input(args.data)
    cfg, label, digest = resolve_train_config(args)
    manifest.config_path, manifest.config_hash, manifest.seed = label, digest, cfg.seed
    manifest.effective_config = cfg.to_json()
    data, schema = _load(args, cfg)
    train_d, val_d, test_d = split_dataset(data, cfg.split_spec())
    transforms = fit_transforms(train_d, schema)
    out = _out_dir(args)
    arms = list(ARMS) if args.arm == "all" else [args.arm]
    reports = run_ablation_suite(cfg, train_d, val_d, test_d, transforms, arms, out)
    for arm in reports:
        for name in ("report.json", "report.csv", "model.ckpt"):
            manifest.add_output(f"{arm}/{name}", out / arm / name)
    table = write_comparison(reports, out / "ablation.csv")
    manifest.add_output("ablation.csv", table)
    for a, r in reports.items():
        print(f"({list(ARMS).index(a) + 1}) {a:<12} MAE {r.overall.mae:.4g}  MSE {r.overall.mse:.4g}  "
              f"MAPE {r.overall.mape:.3f}%")


def _progress(cfg: TrainConfig):
    def report(epoch, history):
        if epoch % max(1, cfg.epochs // 20) == 0 or epoch == cfg.epochs - 1:
            print(f"epoch {epoch:5d}  train {history.train_loss[-1]:.5g}  val {history.val_loss[-1]:.5g}",
                  file=sys.stderr)
    return report


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ncpp", description="Grouped-attention CPU benchmark score predictor.")
    parser.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("ingest", help="clean a raw CSV into one record per configuration")
    _add_data_flags(p)
    p.add_argument("--threshold", type=float, default=3.0, help="z-score outlier threshold")
    p.add_argument("--policy", choices=("drop", "mask"), default="drop",
                   help="configurations missing benchmarks are dropped or kept with a label mask")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("train", help="split, fit transforms, train and test one model")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--baselines", action="store_true", help="also fit the linear baselines")
    p.add_argument("--verbose", action="store_true", help="print training progress")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("cv", help="k-fold cross-validation over pooled train+validation data")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--k", type=int)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    p.add_argument("--model", required=True, help="checkpoint (.ckpt) with its .json sidecar")
    p.add_argument("--data", required=True)
    p.add_argument("--name", default="report", help="report file stem")
    p.add_argument("--out-dir", default=".")

    p = sub.add_parser("predict", help="write predictions for a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="prediction CSV path")
    p.add_argument("--out-dir", default=None, help="manifest directory (default: beside --out)")

    p = sub.add_parser("explain", help="export attention matrices and importance scores")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample", default="0", help="record index or 'mean'")
    p.add_argument("--head", default="0", help="head index or 'mean'")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--reduction", choices=("column", "row"), default="column")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with a planted label function")
    p.add_argument("--config", help="SynthConfig JSON")
    p.add_argument("--schema")
    p.add_argument("--n-records", dest="n_records", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--family", choices=("linear", "nonlinear"))
    p.add_argument("--suite")
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=("long", "wide"), default="long")
    p.add_argument("--out", required=True)
    p.add_argument("--out-dir", default=None, help="manifest directory (default: beside --out)")

    p = sub.add_parser("ablate", help="run ablation arms and write a comparison table")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--arm", default="all", choices=["all"] + list(ARMS))
    p.add_argument("--out-dir", required=True)
    return parser


COMMANDS = {"ingest": cmd_ingest, "train": cmd_train, "cv": cmd_cv, "evaluate": cmd_evaluate,
            "predict": cmd_predict, "explain": cmd_explain, "synth": cmd_synth, "ablate": cmd_ablate}


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        manifest = RunManifest(args.command, argv)
        start = time.perf_counter()
        COMMANDS[args.command](args, manifest)
        manifest.wall_time = time.perf_counter() - start
        out_dir = getattr(args, "out_dir", None)
        if out_dir is None:
            out_dir = Path(args.out).parent
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        manifest.write(out_dir)
        return EXIT_OK
    except UsageError as exc:
        print(f"ncpp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"ncpp: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        print(f"ncpp: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DataError, SchemaError, ConfigError, KeyError, ValueError) as exc:
        print(f"ncpp: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()

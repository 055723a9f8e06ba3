"""Command-line interface.

Subcommands: ``synth``, ``train``, ``predict``, ``evaluate`` and
``export-effects``. Runs are described by a JSON config file; see
``RunConfig`` for its layout. Errors exit with the code of their class::

    0 ok, 2 config, 3 schema, 4 data, 5 numeric divergence

and print ``error[<ClassName>]: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import functional_effects as fe
from . import synthetic_bench as sb
from .boosted_trees import GbdtParams
from .errors import ConfigError, DataError, FEError
from .mlp_regressor import DnnParams
from .panel_data import CsvSchema, PanelDataset, load_csv, save_csv, split_by_individual
from .presets import get_preset

MODEL_FORMAT = "femodels-model"
MODEL_VERSION = 1

# Network settings outside the tuned search space are refused at the CLI.
DNN_LR_RANGE = (1e-4, 1e-2)
DNN_BATCH_SIZES = (256, 512)


def _dump_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _read_json(path, what) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{what}: file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what}: invalid JSON in {path}: {exc}") from None


def _check_keys(section: str, d: dict, allowed) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{section}: expected an object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Validated run configuration.

    JSON layout (every section optional unless the command needs it)::

        {"preset": "synthetic/FI-RUMBoost",
         "seed": 0,
         "data": {"train": ..., "valid": ..., "test": ...,
                  "truth": {"train": ..., "valid": ..., "test": ...},
                  "schema": {...}},
         "split": {"fractions": [0.8, 0.2, 0.0]},
         "model": {"kind": ..., "monotone": {...}, "reference": 2} or {"spec": {...}},
         "gbdt": {...}, "dnn": {...}, "train": {...},
         "synthetic": {"kind": "multinomial", ...}}

    Relative paths are resolved against the config file's directory. The
    split is only used when ``data.valid`` is absent.
    """

    seed: int = 0
    data: dict = field(default_factory=dict)
    schema: CsvSchema | None = None
    fractions: tuple = (0.8, 0.2, 0.0)
    spec: fe.ModelSpec | None = None
    gbdt: GbdtParams = field(default_factory=GbdtParams)
    dnn: DnnParams = field(default_factory=DnnParams)
    options: fe.TrainOptions = field(default_factory=fe.TrainOptions)
    synthetic: dict = field(default_factory=dict)

    TOP_KEYS = ("preset", "seed", "data", "split", "model", "gbdt", "dnn", "train", "synthetic")

    @classmethod
    def from_dict(cls, d: dict, base_dir=".", seed: int | None = None) -> "RunConfig":
        _check_keys("config", d, cls.TOP_KEYS)
        base = Path(base_dir)
        seed = int(d.get("seed", 0)) if seed is None else int(seed)
        kind, settings = (None, {})
        if "preset" in d:
            kind, settings = get_preset(d["preset"])

        data = dict(d.get("data", {}))
        _check_keys("data", data, ("train", "valid", "test", "truth", "schema"))
        schema = CsvSchema.from_dict(data.pop("schema")) if "schema" in data else None
        truth = data.pop("truth", {}) or {}
        _check_keys("data.truth", truth, ("train", "valid", "test"))
        paths = {k: str(base / v) for k, v in data.items() if v is not None}
        paths["truth"] = {k: str(base / v) for k, v in truth.items() if v is not None}

        split = d.get("split", {})
        _check_keys("split", split, ("fractions",))
        fractions = tuple(float(f) for f in split.get("fractions", (0.8, 0.2, 0.0)))
        if len(fractions) != 3 or any(f < 0 for f in fractions) or fractions[0] <= 0:
            raise ConfigError("split.fractions: expected three non-negative numbers with train > 0")
        if abs(sum(fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split.fractions: must sum to 1, got {sum(fractions)!r}")

        gbdt_d = {**settings.get("gbdt", {}), **d.get("gbdt", {})}
        dnn_d = {**settings.get("dnn", {}), **d.get("dnn", {})}
        gbdt = GbdtParams.from_dict({**gbdt_d, "seed": seed})
        dnn = DnnParams.from_dict({**dnn_d, "seed": seed})
        if not DNN_LR_RANGE[0] <= dnn.learning_rate <= DNN_LR_RANGE[1]:
            raise ConfigError(f"dnn.learning_rate={dnn.learning_rate!r} outside {list(DNN_LR_RANGE)}")
        if dnn.batch_size not in DNN_BATCH_SIZES:
            raise ConfigError(f"dnn.batch_size={dnn.batch_size!r} not in {list(DNN_BATCH_SIZES)}")
        if list(dnn.layer_sizes) not in [list(c) for c in DnnParams.LAYER_CHOICES]:
            raise ConfigError(f"dnn.layer_sizes={dnn.layer_sizes!r} not among {list(DnnParams.LAYER_CHOICES)}")

        spec = None
        model = d.get("model")
        if model is not None or kind is not None:
            spec = _build_spec(model or {}, kind, schema)

        options = fe.TrainOptions.from_dict(d.get("train", {}))
        synthetic = dict(d.get("synthetic", {}))
        _check_keys("synthetic", synthetic, ("kind", "n_individuals", "n_scenarios",
                                             "n_test_individuals", "n_valid_individuals"))
        return cls(seed, paths, schema, fractions, spec, gbdt, dnn, options, synthetic)


def _build_spec(model: dict, preset_kind, schema):
    _check_keys("model", model, ("kind", "monotone", "reference", "head", "n_classes", "name", "spec"))
    if "spec" in model:
        if set(model) != {"spec"}:
            raise ConfigError("model: 'spec' cannot be combined with other keys")
        return fe.ModelSpec.from_dict(model["spec"])
    kind = model.get("kind", preset_kind)
    if kind is None:
        raise ConfigError("model: 'kind' is required when no preset is given")
    if schema is None:
        raise ConfigError("model: data.schema is required to derive the model variables")
    head = model.get("head", "ordinal" if schema.n_classes and len(schema.alternatives) == 1
                     else "multinomial")
    return fe.ModelSpec.from_kind(
        kind, schema.alternatives, head=head,
        n_classes=model.get("n_classes", schema.n_classes if head == "ordinal" else None),
        monotone=model.get("monotone"), reference=model.get("reference", 2),
        name=model.get("name"))


def load_config(path, seed=None) -> RunConfig:
    return RunConfig.from_dict(_read_json(path, "config"), Path(path).parent, seed)


# ---------------------------------------------------------------------------
# model container


def save_model(model: fe.FittedModel, schema: CsvSchema, path) -> None:
    _dump_json({"format": MODEL_FORMAT, "version": MODEL_VERSION,
                "schema": schema.to_dict(), "model": model.to_dict()}, path)


def load_model(path):
    """Return ``(FittedModel, CsvSchema)`` from a model container file."""
    d = _read_json(path, "model")
    if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
        raise ConfigError(f"{path}: not a {MODEL_FORMAT} v{MODEL_VERSION} file")
    return fe.FittedModel.from_dict(d["model"]), CsvSchema.from_dict(d["schema"])


def _load_data(path, schema) -> PanelDataset:
    if not os.path.exists(path):
        raise DataError(f"data file not found: {path}")
    if os.path.getsize(path) == 0:
        # a zero-byte file stands for a dataset with no observations
        return _empty_dataset(schema)
    return load_csv(path, schema)


def _empty_dataset(schema: CsvSchema) -> PanelDataset:
    V = max(len(a) for a in schema.alternatives)
    return PanelDataset(
        individual=np.zeros(0, dtype=np.int64), individual_ids=(),
        socio=np.zeros((0, len(schema.socio))),
        alt_vars=np.zeros((0, len(schema.alternatives), V)),
        target=np.zeros(0, dtype=np.int64), schema=schema)


def _load_truth(path, ds: PanelDataset, spec: fe.ModelSpec):
    if not os.path.exists(path):
        raise DataError(f"truth file not found: {path}")
    return sb.GroundTruth.from_frame(pd.read_csv(path, dtype={"individual": str}),
                                     ds.individual_ids, spec.n_utilities, spec.reference)


def _set_threads(n) -> None:
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be positive")
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, out: Path) -> dict:
    """Write synthetic train/valid/test panels, their truth tables and a schema file."""
    s = dict(cfg.synthetic)
    kind = s.pop("kind", "multinomial")
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    if kind == "multinomial":
        parts = sb.generate(sb.SyntheticConfig(seed=cfg.seed, **s))
        for name, (ds, truth) in parts.items():
            save_csv(ds, out / f"{name}.csv")
            truth.to_frame().to_csv(out / f"truth_{name}.csv", index=False, float_format="%.17g")
            written[name] = ds.n_observations
        schema = sb.SCHEMA
    elif kind == "ordinal":
        allowed = {"n_individuals", "n_scenarios"}
        if set(s) - allowed:
            raise ConfigError(f"synthetic: keys {sorted(set(s) - allowed)} do not apply to ordinal data")
        ds, head, _ = sb.generate_ordinal(seed=cfg.seed, **s)
        save_csv(ds, out / "train.csv")
        pd.DataFrame({"threshold": np.arange(1, head.thresholds.size + 1), "value": head.thresholds}
                     ).to_csv(out / "thresholds_true.csv", index=False, float_format="%.17g")
        written["train"] = ds.n_observations
        schema = ds.schema
    else:
        raise ConfigError(f"synthetic.kind must be 'multinomial' or 'ordinal', got {kind!r}")
    _dump_json(schema.to_dict(), out / "schema.json")
    return written


def _dataset_metrics(model, ds, truth_path=None) -> dict:
    m = model.metrics(ds)
    m["n_observations"] = ds.n_observations
    has_fi = any(k.startswith("intercept[") and kind == "functional"
                 for k, i, m, kind, var, c in model.spec.effects())
    # models without functional intercepts (MNL, RUMBoost) have nothing to recover
    if truth_path and has_fi:
        mae = sb.recovery_mae(model, _load_truth(truth_path, ds, model.spec), ds)
        m["recovery_mae"] = {str(k): v for k, v in mae.items()}
    return m


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    """Fit, then write model.json, losses.csv, metrics.json and timing.json."""
    if cfg.spec is None:
        raise ConfigError("model: a model section or preset is required for train")
    if cfg.schema is None:
        raise ConfigError("data.schema is required for train")
    if "train" not in cfg.data:
        raise ConfigError("data.train is required for train")
    ds = _load_data(cfg.data["train"], cfg.schema)
    sets = {}
    if "valid" in cfg.data:
        sets["train"] = ds
        sets["valid"] = _load_data(cfg.data["valid"], cfg.schema)
    else:
        plan = split_by_individual(ds, cfg.fractions, seed=cfg.seed)
        sets["train"] = ds.subset(plan.train)
        if plan.valid.size:
            sets["valid"] = ds.subset(plan.valid)
        if plan.test.size:
            sets["holdout"] = ds.subset(plan.test)
    if "test" in cfg.data:
        sets["test"] = _load_data(cfg.data["test"], cfg.schema)

    model, report = fe.fit(cfg.spec, sets["train"], sets.get("valid"),
                           gbdt=cfg.gbdt, dnn=cfg.dnn, options=cfg.options)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, cfg.schema, out / "model.json")

    with open(out / "losses.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "train_loss", "valid_loss"])
        for k, tl in enumerate(report.train_loss):
            vl = report.valid_loss[k] if k < len(report.valid_loss) else ""
            w.writerow([k + 1, repr(float(tl)), vl if vl == "" else repr(float(vl))])

    truth = cfg.data.get("truth", {})
    metrics = {"best_iteration": report.best_iteration, "iterations_run": report.iterations_run,
               "learning_rate": report.learning_rate, "model": cfg.spec.name}
    for name, part in sets.items():
        # truth rows are keyed by individual id, so split subsets of the
        # training file are scored against the training truth table
        path = truth.get("train" if name == "holdout" else name)
        metrics[name] = _dataset_metrics(model, part, path)
    _dump_json(metrics, out / "metrics.json")
    _dump_json({"wall_time_seconds": report.wall_time}, out / "timing.json")
    return metrics


def _probability_table(model, ds) -> list:
    P = model.predict_proba(ds)
    point = model.predict(ds) if ds.n_observations else np.zeros(0, dtype=int)
    rows = []
    for r in range(ds.n_observations):
        rows.append([ds.individual_ids[ds.individual[r]], int(ds.target[r])]
                    + [repr(float(p)) for p in P[r]] + [int(point[r])])
    return rows


def cmd_predict(model_path, data_path, out_path) -> int:
    """Write per-observation class probabilities and the point prediction."""
    model, schema = load_model(model_path)
    ds = _load_data(data_path, schema)
    J = model.spec.n_classes
    header = ["individual", "target"] + [f"p{j}" for j in range(J)] + ["prediction"]
    rows = _probability_table(model, ds)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return len(rows)


def cmd_evaluate(model_path, data_path, out_path=None, truth_path=None) -> dict:
    model, schema = load_model(model_path)
    ds = _load_data(data_path, schema)
    metrics = _dataset_metrics(model, ds, truth_path)
    if out_path:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        _dump_json(metrics, out_path)
    return metrics


def cmd_export_effects(model_path, data_path, out: Path) -> list:
    """Write one CSV per exported table; returns the written file names."""
    model, schema = load_model(model_path)
    ds = _load_data(data_path, schema)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for name, df in fe.export_effects(model, ds).items():
        df.to_csv(out / f"{name}.csv", index=False, float_format="%.17g")
        names.append(f"{name}.csv")
    return names


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="femodels", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None, help="worker threads for compiled kernels")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required):
        p.add_argument("--config", required=config_required, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--out", required=True, help="output directory or file")
        p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads")

    common(sub.add_parser("synth", help="generate the synthetic benchmark"), True)
    common(sub.add_parser("train", help="fit a model"), True)
    for name, help_ in (("predict", "class probabilities for a CSV"),
                        ("evaluate", "metrics for a CSV"),
                        ("export-effects", "plot-ready effect tables")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("model", help="model.json written by train")
        p.add_argument("data", help="panel CSV with the model's schema")
        common(p, False)
        if name == "evaluate":
            p.add_argument("--truth", default=None, help="truth CSV for recovery MAE")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _set_threads(args.threads)
        out = Path(args.out)
        if args.command == "synth":
            written = cmd_synth(load_config(args.config, args.seed), out)
            print(json.dumps(written, sort_keys=True))
        elif args.command == "train":
            metrics = cmd_train(load_config(args.config, args.seed), out)
            print(json.dumps(metrics, sort_keys=True))
        elif args.command == "predict":
            n = cmd_predict(args.model, args.data, out)
            print(f"{n} rows written to {out}")
        elif args.command == "evaluate":
            print(json.dumps(cmd_evaluate(args.model, args.data, out, args.truth), sort_keys=True))
        else:
            print("\n".join(cmd_export_effects(args.model, args.data, out)))
    except FEError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Command-line interface: generate, train, finetune, evaluate, matrix, lsq.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence.  Options are resolved as defaults < config file < flags, and
every run writes its resolved configuration next to its outputs.  The
default output root comes from ``--out``, the config, or the
``SOFTSENSE_OUT`` environment variable, in that order of preference.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import report as rep
from . import wellsim
from .data import DataError, MultiUnitDataset, read_fleet_csv, write_fleet_csv, subset
from .experiments import (ContextInit, DivergenceError, ExperimentReport,
                          FinetuneConfig, FinetuneMode, TrainConfig,
                          TrainedModel, evaluate, finetune_unit, run_matrix,
                          seed_for, train_multiunit, train_stl)
from .objective import Normalization, ObjectiveConfig

log = logging.getLogger(__name__)

ENV_OUT_ROOT = "SOFTSENSE_OUT"

DEFAULT_CONFIG = {
    "seed": 0,
    "out": None,
    "fleet": {
        "units": 20,
        "labeled": 5,
        "unlabeled": 100,
        "test": 100,
        "noise_frac": 0.01,
        "param_ranges": {k: list(v) for k, v in
                         wellsim.DEFAULT_PARAM_RANGES.items()},
    },
    "dims": {"context": 4, "latent": 5},
    "objective": {"alpha": 1.0, "beta": None, "mc_samples": 5,
                  "normalization": "total_count"},
    "training": {"learning_rate": 5e-4, "max_steps": 3000, "eval_every": 10,
                 "patience": 50, "validation_fraction": 0.2, "repetitions": 3,
                 "hidden": [64, 64]},
    "finetune": {"mode": "semi_supervised", "epochs": 100,
                 "learning_rate": 1e-4, "context_init": "zero",
                 "fixed_variance": 0.1},
    "matrix": {"ratios": [1, 20], "models": ["stl", "mtl", "ssmtl"]},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, overlay: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in overlay.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and key != "param_ranges":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where} must be a mapping")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(args) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        config = _merge(config, user)
    if getattr(args, "seed", None) is not None:
        config["seed"] = args.seed
    if getattr(args, "out", None):
        config["out"] = args.out
    return config


def resolve_out(config: dict, subdir: str) -> Path:
    root = config.get("out") or os.environ.get(ENV_OUT_ROOT) or "runs"
    out = Path(root) / subdir
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_resolved_config(out_dir: Path, config: dict) -> None:
    with open(out_dir / "run_config.json", "w") as f:
        json.dump(config, f, indent=2, sort_keys=True)
        f.write("\n")


def _train_config(config: dict) -> TrainConfig:
    t = config["training"]
    o = config["objective"]
    try:
        objective = ObjectiveConfig(
            alpha=float(o["alpha"]),
            beta=None if o["beta"] is None else float(o["beta"]),
            mc_samples=int(o["mc_samples"]),
            normalization=Normalization(o["normalization"]))
        return TrainConfig(
            learning_rate=float(t["learning_rate"]),
            max_steps=int(t["max_steps"]),
            eval_every=int(t["eval_every"]),
            patience=int(t["patience"]),
            validation_fraction=float(t["validation_fraction"]),
            seed=int(config["seed"]),
            repetitions=int(t["repetitions"]),
            hidden=tuple(int(h) for h in t["hidden"]),
            context_dim=int(config["dims"]["context"]),
            latent_dim=int(config["dims"]["latent"]),
            objective=objective)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad training configuration: {exc}") from None


def _finetune_config(config: dict, args) -> FinetuneConfig:
    f = config["finetune"]
    mode = getattr(args, "mode", None) or f["mode"]
    try:
        return FinetuneConfig(
            mode=FinetuneMode(mode),
            epochs=int(f["epochs"]),
            learning_rate=float(f["learning_rate"]),
            context_init=ContextInit(f["context_init"]),
            fixed_variance=float(f["fixed_variance"]),
            seed=int(config["seed"]))
    except ValueError as exc:
        raise ConfigError(f"bad finetune configuration: {exc}") from None


def _load_dataset(path) -> MultiUnitDataset:
    return read_fleet_csv(path)


# -- commands ------------------------------------------------------------------

def cmd_generate(args) -> int:
    config = load_config(args)
    fleet = config["fleet"]
    if args.units is not None:
        fleet["units"] = args.units
    if args.labeled is not None:
        fleet["labeled"] = args.labeled
    if args.unlabeled is not None:
        fleet["unlabeled"] = args.unlabeled
    if args.test is not None:
        fleet["test"] = args.test
    out_dir = resolve_out(config, "dataset")
    dataset = wellsim.generate_fleet(
        m_units=int(fleet["units"]), n_labeled=int(fleet["labeled"]),
        n_unlabeled=int(fleet["unlabeled"]), n_test=int(fleet["test"]),
        noise_frac=float(fleet["noise_frac"]), seed=int(config["seed"]),
        param_ranges={k: tuple(v) for k, v in fleet["param_ranges"].items()})
    path = out_dir / "fleet.csv"
    write_fleet_csv(path, dataset)
    write_resolved_config(out_dir, config)
    print(f"wrote {path} ({len(dataset.units)} units, "
          f"{dataset.n_labeled} labeled / {dataset.n_unlabeled} unlabeled rows)")
    return 0


def cmd_train(args) -> int:
    config = load_config(args)
    dataset = _load_dataset(args.data)
    train_config = _train_config(config)
    out_dir = resolve_out(config, f"train_{args.model}")
    if args.model == "stl":
        trained = train_stl(dataset, train_config)
    else:
        trained = train_multiunit(args.model, dataset, train_config)
    ckpt = out_dir / f"{args.model}.npz"
    trained.save(ckpt)
    rep.write_training_log_jsonl(out_dir / "training_log.jsonl", trained.train_log)
    write_resolved_config(out_dir, config)
    print(f"wrote {ckpt}")
    return 0


def cmd_evaluate(args) -> int:
    config = load_config(args)
    dataset = _load_dataset(args.data)
    trained = TrainedModel.load(args.checkpoint)
    out_dir = resolve_out(config, "evaluate")
    result = evaluate(trained, dataset)
    rep.write_reports_jsonl(out_dir / "evaluation.jsonl", [result])
    rep.render_unit_mape_figure(out_dir / "unit_mape.png", result)
    write_resolved_config(out_dir, config)
    print(rep.format_results_table([result]))
    return 0


def cmd_finetune(args) -> int:
    config = load_config(args)
    dataset = _load_dataset(args.data)
    trained = TrainedModel.load(args.checkpoint)
    ft_config = _finetune_config(config, args)
    out_dir = resolve_out(config, "finetune")
    unit_ids = [args.unit] if args.unit else dataset.unit_ids
    rows = []
    for unit_id in unit_ids:
        unit = dataset.unit(unit_id)
        finetune_unit(trained, unit, ft_config)
        row = {"mode": ft_config.mode.value, "unit_id": unit_id,
               "n_labeled": unit.n_labeled, "n_unlabeled": unit.n_unlabeled}
        if unit.x_test.shape[0]:
            from .experiments import mape
            pred = trained.predict(unit.x_test, unit_id)
            row["test_mape"] = mape(pred, unit.y_test)
        rows.append(row)
    ckpt = out_dir / "finetuned.npz"
    trained.save(ckpt)
    with open(out_dir / "finetune_report.jsonl", "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    write_resolved_config(out_dir, config)
    with_mape = [r for r in rows if "test_mape" in r]
    if with_mape:
        mean = float(np.mean([r["test_mape"] for r in with_mape]))
        print(f"finetuned {len(rows)} unit(s), mean test MAPE {mean:.3f}%")
    else:
        print(f"finetuned {len(rows)} unit(s)")
    print(f"wrote {ckpt}")
    return 0


def _matrix_cell_worker(payload: tuple) -> tuple[list, list]:
    data_path, model, ratios, config = payload
    dataset = read_fleet_csv(data_path)
    reports, failures = run_matrix(dataset, ratios, [model],
                                   _train_config(config))
    return reports, failures


def cmd_matrix(args) -> int:
    config = load_config(args)
    if args.ratios:
        config["matrix"]["ratios"] = [int(r) for r in args.ratios.split(",")]
    if args.models:
        config["matrix"]["models"] = args.models.split(",")
    dataset = _load_dataset(args.data)
    train_config = _train_config(config)
    ratios = config["matrix"]["ratios"]
    models = config["matrix"]["models"]
    out_dir = resolve_out(config, "matrix")

    if args.jobs > 1:
        jobs = [(str(args.data), model, ratios, config) for model in models]
        reports, failures = [], []
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for cell_reports, cell_failures in pool.map(_matrix_cell_worker, jobs):
                reports.extend(cell_reports)
                failures.extend(cell_failures)
    else:
        reports, failures = run_matrix(dataset, ratios, models, train_config,
                                       progress=print)

    rep.write_reports_jsonl(out_dir / "matrix.jsonl", reports, failures)
    rep.write_matrix_csv(out_dir / "matrix.csv", reports)
    rep.render_matrix_figure(out_dir / "matrix_mape.png", reports)
    write_resolved_config(out_dir, config)
    print(rep.format_results_table(reports))
    if failures:
        print(f"{len(failures)} cell(s) failed; see matrix.jsonl")
    return 0


def cmd_lsq(args) -> int:
    load_config(args)  # validates --config if given
    dataset = _load_dataset(args.data)
    unit_ids = [args.unit] if args.unit else dataset.unit_ids
    for unit_id in unit_ids:
        triples = wellsim.labeled_triples(dataset, unit_id)
        pairs = wellsim.unlabeled_pairs(dataset, unit_id)
        print(f"[{unit_id}]")
        theta = wellsim.ls_supervised(triples)
        print(f"  supervised:      a0={theta.a0:.10g} a1={theta.a1:.10g} "
              f"b0={theta.b0:.10g} b1={theta.b1:.10g}")
        if len(pairs) >= 2:
            est = wellsim.ls_semisupervised(pairs, triples)
            print(f"  semi-supervised: a0={est.a0:.10g} a1={est.a1:.10g} "
                  f"c0={est.c0:.10g} c1={est.c1:.10g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="softsense",
        description="Semi-supervised multi-task soft sensing experiments")

    def add_common(p):
        p.add_argument("--config", help="JSON config file (flags win on conflict)")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", help=f"output root (default ${ENV_OUT_ROOT} or ./runs)")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic fleet dataset")
    add_common(p)
    p.add_argument("--units", type=int, help="number of units")
    p.add_argument("--labeled", type=int, help="labeled points per unit")
    p.add_argument("--unlabeled", type=int, help="unlabeled points per unit")
    p.add_argument("--test", type=int, help="test points per unit")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a fleet dataset")
    add_common(p)
    p.add_argument("--data", required=True, help="fleet CSV path")
    p.add_argument("--model", choices=["ssmtl", "mtl", "stl"], default="ssmtl")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="adapt a trained model to new units")
    add_common(p)
    p.add_argument("--data", required=True, help="fleet CSV with the new units")
    p.add_argument("--checkpoint", required=True, help="trained model .npz")
    p.add_argument("--mode", choices=[m.value for m in FinetuneMode])
    p.add_argument("--unit", help="finetune a single unit id (default: all)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on test data")
    add_common(p)
    p.add_argument("--data", required=True, help="fleet CSV path")
    p.add_argument("--checkpoint", required=True, help="model .npz")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("matrix", help="run the model-by-ratio experiment matrix")
    add_common(p)
    p.add_argument("--data", required=True, help="fleet CSV path")
    p.add_argument("--ratios", help="comma-separated unlabeled ratios")
    p.add_argument("--models", help="comma-separated model kinds")
    p.add_argument("--jobs", type=int, default=1, help="parallel matrix cells")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("lsq", help="closed-form least-squares estimates per unit")
    add_common(p)
    p.add_argument("--data", required=True, help="fleet CSV path")
    p.add_argument("--unit", help="estimate a single unit id (default: all)")
    p.set_defaults(func=cmd_lsq)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (DataError, wellsim.WellsimError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

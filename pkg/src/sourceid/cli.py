"""Command-line entry point.

Every command reads an optional TOML config, applies flag overrides,
validates cross-field constraints before any compute, and writes its
artifacts plus the fully resolved config into a run directory.

Exit codes: 0 ok, 1 runtime failure, 2 config/validation failure.

Seeding: ``--seed S`` sets every section seed (dataset, model, pretrain,
finetune, eval) to S. Independent random streams are separated inside the
library by hashing (seed, purpose, epoch, index), never by offsetting seeds.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Optional

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib
import tomli_w

from .core import ConfigurationError, TaskKind, TaskParams, derive_rng
from .data import (
    AugmentParams,
    DataSplits,
    LesionParams,
    SchemaError,
    assign_splits,
    generate_phantom_dataset,
    load_manifest_splits,
    save_phantom_dataset,
    splits_from_cases,
)
from .model import Checkpoint, NetworkSpec

log = logging.getLogger("sourceid")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

DEFAULTS: dict[str, dict[str, Any]] = {
    "dataset": {
        "kind": "phantom",
        "path": "",
        "n_patients": 30,
        "size": 64,
        "n_slices": 16,
        "n_modalities": 2,
        "n_val": 5,
        "n_test": 5,
        "seed": 0,
        "lesion_count": [1, 3],
        "lesion_radius": [0.06, 0.14],
        "lesion_fraction": [0.01, 0.08],
        "n_classes": 2,
        "tau": 1e-6,
    },
    "task": {"kind": "CSI", "n_per_mixture": 3, "m_mixtures": 2, "grid": [4, 4], "gamma": 0.5, "min_overlap": 1},
    "model": {"depth": 3, "base_width": 16, "norm": "instance", "nonlinearity": "leaky_relu", "seed": 0},
    "augment": asdict(AugmentParams()),
    "pretrain": {
        "epochs_max": 200,
        "iters_per_epoch": 25,
        "initial_lr": 1e-2,
        "momentum": 0.99,
        "nesterov": True,
        "weight_decay": 3e-5,
        "batch_size": 1,
        "early_stop_patience": 50,
        "seed": 0,
        "val_samples": 16,
        "grad_clip": 12.0,
        "workers": 0,
        "augment": True,
        "snapshots": False,
    },
    "finetune": {
        "epochs_max": 200,
        "iters_per_epoch": 25,
        "initial_lr": 1e-2,
        "momentum": 0.99,
        "nesterov": True,
        "weight_decay": 3e-5,
        "batch_size": 8,
        "early_stop_patience": 50,
        "seed": 0,
        "labeled_budget": -1,  # -1 = every labelled training patient
        "mixup": False,
        "mixup_alpha": 0.2,
        "grad_clip": 12.0,
        "workers": 0,
        "augment": True,
        "restart": False,
    },
    "eval": {
        "seed": 0,
        "lambdas": [0.1, 0.5, 0.9],
        "n_eval": 64,
        "ablation_settings": [[3, 2], [5, 3], [7, 4]],
        "ablation_variants": ["CSI", "WSI", "DSI"],
        "ablation_seeds": [0],
        "overlap_pairs": 1000,
        "overlap_bins": 10,
        "grouping": {},
    },
}

SEEDED_SECTIONS = ("dataset", "model", "pretrain", "finetune", "eval")


# --------------------------------------------------------------------------
# config handling


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = f"{path}{k}"
        if k not in out:
            raise ConfigurationError(f"unknown config key {where!r}")
        if isinstance(out[k], dict) and k != "grouping":
            if not isinstance(v, dict):
                raise ConfigurationError(f"config key {where!r} must be a table")
            out[k] = _merge(out[k], v, where + ".")
        else:
            out[k] = v
    return out


def load_config(path: Optional[str | Path]) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
    return _merge(DEFAULTS, raw)


def apply_overrides(cfg: dict, args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(cfg)
    if getattr(args, "seed", None) is not None:
        for section in SEEDED_SECTIONS:
            cfg[section]["seed"] = int(args.seed)
    if getattr(args, "labeled_budget", None) is not None:
        cfg["finetune"]["labeled_budget"] = int(args.labeled_budget)
    if getattr(args, "mixup", False):
        cfg["finetune"]["mixup"] = True
    if getattr(args, "restart", False):
        cfg["finetune"]["restart"] = True
    if getattr(args, "dataset", None):
        cfg["dataset"]["path"] = str(args.dataset)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:10]


def validate_config(cfg: dict) -> None:
    """Cross-field checks that must pass before any compute."""
    ds, task, model = cfg["dataset"], cfg["task"], cfg["model"]
    if ds["kind"] not in ("phantom", "nifti"):
        raise ConfigurationError(f"dataset.kind must be 'phantom' or 'nifti', got {ds['kind']!r}")
    if ds["kind"] == "nifti" and not ds["path"]:
        raise ConfigurationError("dataset.path (manifest) is required for nifti data")
    if ds["path"] and not Path(ds["path"]).exists():
        raise ConfigurationError(f"dataset.path does not exist: {ds['path']}")
    size = int(ds["size"])
    depth = int(model["depth"])
    if size % 2**depth:
        raise ConfigurationError(f"dataset.size={size} is not divisible by 2**model.depth={2**depth}")
    try:
        kind = TaskKind(task["kind"])
    except ValueError as exc:
        raise ConfigurationError(f"task.kind: unknown task {task['kind']!r}") from exc
    params = task_params(cfg)
    n_train = int(ds["n_patients"]) - int(ds["n_val"]) - int(ds["n_test"])
    if kind is TaskKind.CSI and not ds["path"] and params.n_pool > n_train:
        raise ConfigurationError(f"task: CSI needs N = M~(N~-1)+1 = {params.n_pool} training patients, have {n_train}")
    lesion_params(cfg).validate()
    for name in ("pretrain", "finetune"):
        train_config(cfg, name)
    budget = cfg["finetune"]["labeled_budget"]
    if budget != -1 and budget < 1:
        raise ConfigurationError("finetune.labeled_budget must be >= 1 (or -1 for all)")
    for lam in cfg["eval"]["lambdas"]:
        if not 0.0 <= float(lam) <= 1.0:
            raise ConfigurationError(f"eval.lambdas: {lam} outside [0, 1]")
    from .ssltasks import check_pool_setting

    for n_pool, n_per in cfg["eval"]["ablation_settings"]:
        check_pool_setting(int(n_pool), int(n_per), 2)


def task_params(cfg: dict) -> TaskParams:
    t = cfg["task"]
    return TaskParams(
        TaskKind(t["kind"]), int(t["n_per_mixture"]), int(t["m_mixtures"]), tuple(t["grid"]), float(t["gamma"]), int(t["min_overlap"])
    )


def lesion_params(cfg: dict) -> LesionParams:
    d = cfg["dataset"]
    return LesionParams(tuple(d["lesion_count"]), tuple(d["lesion_radius"]), tuple(d["lesion_fraction"]), int(d["n_classes"]))


def network_spec(cfg: dict, in_ch: int = 1, out_ch: int = 1) -> NetworkSpec:
    m = cfg["model"]
    return NetworkSpec(in_ch, out_ch, int(m["depth"]), int(m["base_width"]), m["norm"], m["nonlinearity"], int(m["seed"]))


def train_config(cfg: dict, section: str, run_dir: Optional[Path] = None):
    from .training import TrainConfig

    s = dict(cfg[section])
    use_aug = s.pop("augment")
    s.pop("restart", None)
    snapshots = s.pop("snapshots", False)
    budget = s.pop("labeled_budget", None)
    names = {f.name for f in fields(TrainConfig)}
    kw = {k: v for k, v in s.items() if k in names}
    return TrainConfig(
        task=task_params(cfg),
        augment=AugmentParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg["augment"].items()}) if use_aug else None,
        labeled_budget=None if budget in (None, -1) else int(budget),
        snapshot_dir=str(run_dir / "snapshots") if (snapshots and run_dir) else None,
        **kw,
    )


def load_splits(cfg: dict) -> DataSplits:
    ds = cfg["dataset"]
    size = (int(ds["size"]), int(ds["size"]))
    if ds["path"]:
        p = Path(ds["path"])
        manifest = p / "manifest.json" if p.is_dir() else p
        return load_manifest_splits(manifest, size, float(ds["tau"]))
    cases = generate_phantom_dataset(
        int(ds["n_patients"]), size, int(ds["n_modalities"]), lesion_params(cfg), int(ds["seed"]), int(ds["n_slices"])
    )
    assignment = assign_splits([c.patient_id for c in cases], int(ds["n_val"]), int(ds["n_test"]), int(ds["seed"]))
    return splits_from_cases(cases, assignment, size, float(ds["tau"]))


def make_run_dir(out: Optional[str], command: str, cfg: dict) -> Path:
    base = Path(out or "runs")
    run = base / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}-{config_hash(cfg)}"
    run.mkdir(parents=True, exist_ok=True)
    write_config(cfg, run)
    return run


def write_config(cfg: dict, run_dir: Path) -> None:
    (run_dir / "config.toml").write_text(tomli_w.dumps(cfg))


# --------------------------------------------------------------------------
# commands


def cmd_generate_phantom(cfg: dict, args) -> Path:
    ds = cfg["dataset"]
    out = Path(args.out or "phantom")
    cases = generate_phantom_dataset(
        int(ds["n_patients"]), int(ds["size"]), int(ds["n_modalities"]), lesion_params(cfg), int(ds["seed"]), int(ds["n_slices"])
    )
    save_phantom_dataset(cases, out, int(ds["seed"]), int(ds["n_val"]), int(ds["n_test"]), params=ds)
    write_config(cfg, out)
    return out


def cmd_pretrain(cfg: dict, args) -> Path:
    from .training import pretrain

    run = make_run_dir(args.out, "pretrain", cfg)
    splits = load_splits(cfg)
    task = task_params(cfg)
    t = splits.train.n_modalities
    spec = network_spec(cfg, task.input_channels(t), t)
    ck, record = pretrain(train_config(cfg, "pretrain", run), splits, spec)
    path = ck.save(run / "checkpoint.sidckpt")
    record.to_csv(run / "run_record.csv")
    record.to_json(run / "run_record.json")
    return path


def cmd_finetune(cfg: dict, args) -> Path:
    from .training import finetune

    run = make_run_dir(args.out, "finetune", cfg)
    splits = load_splits(cfg)
    ck = Checkpoint.load(args.checkpoint) if args.checkpoint else None
    net, record = finetune(
        train_config(cfg, "finetune", run), splits, ck, network_spec(cfg), restart=bool(cfg["finetune"]["restart"])
    )
    head = {"task": "segmentation", "in_channels": net.spec.in_channels, "out_channels": net.spec.out_channels,
            "class_names": list(splits.train.class_names), "pretrained_from": args.checkpoint or None}
    path = Checkpoint.from_network(net, head, record.best_epoch).save(run / "model.sidckpt")
    record.to_csv(run / "run_record.csv")
    record.to_json(run / "run_record.json")
    return path


def cmd_evaluate(cfg: dict, args) -> Path:
    from .eval.experiments import evaluate_segmentation

    if not args.checkpoint:
        raise ConfigurationError("evaluate needs --checkpoint (a fine-tuned model)")
    run = make_run_dir(args.out, "evaluate", cfg)
    splits = load_splits(cfg)
    net = Checkpoint.load(args.checkpoint).to_network()
    grouping = cfg["eval"]["grouping"] or None
    report = evaluate_segmentation(
        net, splits.test, grouping, {"model": str(args.checkpoint), "config_hash": config_hash(cfg), "seed": cfg["eval"]["seed"]}
    )
    report.save(run)
    return run / "eval.json"


def cmd_solvability(cfg: dict, args) -> Path:
    from .eval.experiments import solvability_experiment

    run = make_run_dir(args.out, "solvability", cfg)
    splits = load_splits(cfg)
    solvability_experiment(
        splits, [float(l) for l in cfg["eval"]["lambdas"]], train_config(cfg, "pretrain"), network_spec(cfg),
        int(cfg["eval"]["n_eval"]), run,
    )
    return run / "solvability.json"


def cmd_ablate_sources(cfg: dict, args) -> Path:
    from .eval.experiments import sources_ablation

    run = make_run_dir(args.out, "ablate-sources", cfg)
    splits = load_splits(cfg)
    ev = cfg["eval"]
    sources_ablation(
        splits,
        [tuple(int(v) for v in s) for s in ev["ablation_settings"]],
        train_config(cfg, "pretrain"),
        train_config(cfg, "finetune"),
        network_spec(cfg),
        [TaskKind(v) for v in ev["ablation_variants"]],
        [int(s) for s in ev["ablation_seeds"]],
        run,
    )
    return run / "ablation.json"


def cmd_overlap_stats(cfg: dict, args) -> Path:
    from .eval.experiments import overlap_distribution

    run = make_run_dir(args.out, "overlap-stats", cfg)
    splits = load_splits(cfg)
    aug = AugmentParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg["augment"].items()})
    overlap_distribution(splits.train, int(cfg["eval"]["overlap_pairs"]), derive_rng(cfg["eval"]["seed"], "overlap"), aug,
                         int(cfg["eval"]["overlap_bins"]), float(cfg["dataset"]["tau"]), run)
    return run / "overlap.json"


def cmd_compare(report_a: str | Path, report_b: str | Path, out: Optional[str]) -> Path:
    """Per-class two-sided paired t-test between two evaluation reports."""
    from .eval.experiments import EvalReport
    from .eval.stats import paired_ttest

    a, b = EvalReport.load(report_a), EvalReport.load(report_b)
    if a.dice.class_names != b.dice.class_names:
        raise ConfigurationError("reports evaluate different class groups")
    if a.dice.image_ids != b.dice.image_ids:
        raise ConfigurationError("reports are not paired on the same images")
    results = {
        name: paired_ttest(a.dice.column(name), b.dice.column(name), label=name).to_dict() for name in a.dice.class_names
    }
    out_dir = Path(out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "comparison.json"
    path.write_text(json.dumps({"report_a": str(report_a), "report_b": str(report_b), "classes": results}, indent=2))
    return path


COMMANDS = {
    "generate-phantom": cmd_generate_phantom,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "solvability": cmd_solvability,
    "ablate-sources": cmd_ablate_sources,
    "overlap-stats": cmd_overlap_stats,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sourceid", description="Source-identification self-supervision toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="TOML config file")
        sp.add_argument("--seed", type=int, help="root seed; overrides every section seed")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--dataset", help="dataset directory or manifest.json (overrides dataset.path)")
        if name in ("finetune", "evaluate"):
            sp.add_argument("--checkpoint", help="pretrained checkpoint (finetune) or model (evaluate)")
        if name == "finetune":
            sp.add_argument("--labeled-budget", type=int, help="number of labelled training patients")
            sp.add_argument("--mixup", action="store_true", help="enable Mixup on the main task")
            sp.add_argument("--restart", action="store_true", help="CNN-restart: retrain a converged model from lr0")
    cp = sub.add_parser("compare")
    cp.add_argument("report_a")
    cp.add_argument("report_b")
    cp.add_argument("--out", help="output directory")
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.command == "compare":
            path = cmd_compare(args.report_a, args.report_b, args.out)
        else:
            cfg = apply_overrides(load_config(args.config), args)
            validate_config(cfg)
            path = COMMANDS[args.command](cfg, args)
    except (ConfigurationError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surface as exit code 1
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

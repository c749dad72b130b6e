"""Command-line entry point: ``gaitmeta generate | train | evaluate``."""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .baselines import DEFAULT_LR, PretrainConfig, pretrain
from .harness import (METHODS, HarnessConfig, ScenarioConfig, audit_report, emit_report, run_loso)
from .meta import MetaConfig, meta_train
from .network import ModelConfig, init_params, save_params
from .objective import LossWeights
from .synthgait import Benchmark, DatasetManifest, build_benchmark, load_sessions, manifest_checksum

log = logging.getLogger("gaitmeta")

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


def _fields(cls, drop=()) -> dict:
    return {f.name: copy.deepcopy(f.default) for f in dataclasses.fields(cls)
            if f.name not in drop and f.default is not dataclasses.MISSING}


def default_config() -> dict:
    """The full config tree with every default filled in."""
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": 0,
        "data": {"n_subjects": 9, "trial_scale": 1.0, "manifest": None, "window_len": 100},
        "model": _fields(ModelConfig, drop=("window_len",)),
        "meta": _fields(MetaConfig, drop=("seed",)),
        "pretrain": _fields(PretrainConfig, drop=("seed",)),
        "loss_weights": _fields(LossWeights),
        "finetune": {"learning_rates": dict(DEFAULT_LR), "steps": 4, "calibration_duration": 3.5},
        "harness": {"task_stride": 10, "pretrain_stride": 10, "calibration_stride": 5,
                    "query_stride": 20, "checkpoints": None},
        "train": {"method": "maml", "held_out": None, "checkpoint_every": 0},
        "evaluate": {"scenario": "S3", "methods": list(METHODS), "seeds": [0, 1, 2, 3, 4],
                     "durations": None, "steps": None, "subjects": None},
    }


def _merge(base: dict, override: dict, path: str = "") -> None:
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        # learning-rate table and nullable fields hold free-form values
        if isinstance(base[key], dict) and where != "finetune.learning_rates":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            _merge(base[key], value, where + ".")
        elif where == "finetune.learning_rates":
            if not isinstance(value, dict) or set(value) - set(DEFAULT_LR):
                raise ConfigError(f"{where} keys must be among {sorted(DEFAULT_LR)}")
            base[key].update(value)
        else:
            base[key] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_set(cfg: dict, assignment: str) -> None:
    """Apply one ``a.b.c=value`` override; value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"--set expects KEY=VALUE, got {assignment!r}")
    key, text = assignment.split("=", 1)
    nested: dict = {}
    cur = nested
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = _parse_value(text)
    _merge(cfg, nested)


def load_config(path: str | None, overrides=(), seed: int | None = None) -> dict:
    cfg = default_config()
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        version = doc.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"{path}: schema_version {version} not supported (expected {SCHEMA_VERSION})")
        _merge(cfg, doc)
    for s in overrides:
        apply_set(cfg, s)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _build(cls, section: dict, **extra):
    try:
        return cls(**section, **extra)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {cls.__name__}: {e}") from e


def harness_config(cfg: dict) -> HarnessConfig:
    h = cfg["harness"]
    model = _build(ModelConfig, cfg["model"], window_len=cfg["data"]["window_len"])
    return HarnessConfig(
        model=model,
        meta=_build(MetaConfig, cfg["meta"], seed=cfg["seed"]),
        pretrain=_build(PretrainConfig, cfg["pretrain"], seed=cfg["seed"]),
        learning_rates=dict(cfg["finetune"]["learning_rates"]),
        loss_weights=_build(LossWeights, cfg["loss_weights"]),
        task_stride=h["task_stride"], pretrain_stride=h["pretrain_stride"],
        calibration_stride=h["calibration_stride"], query_stride=h["query_stride"])


def _benchmark(cfg: dict) -> Benchmark:
    path = cfg["data"]["manifest"]
    if not path:
        raise ConfigError("no dataset manifest given (set data.manifest)")
    if not Path(path).exists():
        raise FileNotFoundError(f"manifest {path} not found")
    manifest = DatasetManifest.load(path)
    return Benchmark(load_sessions(manifest), cfg["data"]["window_len"])


def _write_config(cfg: dict, out: Path) -> None:
    (out / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands

def cmd_generate(cfg: dict, out: Path) -> int:
    manifest = build_benchmark(cfg["seed"], out, cfg["data"]["n_subjects"], cfg["data"]["trial_scale"])
    path = manifest.root / "manifest.json"
    print(path)
    log.info("manifest sha256 %s", manifest_checksum(path))
    return 0


def cmd_train(cfg: dict, out: Path) -> int:
    hc = harness_config(cfg)
    bench = _benchmark(cfg)
    held_out = cfg["train"]["held_out"]
    subjects = [s for s in bench.subjects if s != held_out]
    out.mkdir(parents=True, exist_ok=True)
    method = cfg["train"]["method"]
    if method == "maml":
        pools = bench.task_pools(subjects, hc.task_stride)
        params, _ = meta_train(sorted(pools), pools, hc.meta, hc.model, hc.loss_weights,
                               checkpoint_dir=out / "checkpoints",
                               checkpoint_every=cfg["train"]["checkpoint_every"],
                               log_path=out / "train_log.csv")
        target = out / "maml.mgait"
    elif method == "supervised":
        pool = bench.pool(lambda i, s: s.task.subject != held_out, hc.pretrain_stride)
        params, _ = pretrain(pool, hc.pretrain, hc.model, hc.loss_weights,
                             init=init_params(hc.model, hc.pretrain.seed), log_path=out / "train_log.csv")
        target = out / "pretrained.mgait"
    else:
        raise ConfigError(f"train.method must be 'maml' or 'supervised', got {method!r}")
    save_params(params, target)
    _write_config(cfg, out)
    print(target)
    return 0


def cmd_evaluate(cfg: dict, out: Path, threads: int) -> int:
    hc = harness_config(cfg)
    ev = cfg["evaluate"]
    scenarios = [_build(ScenarioConfig, {"scenario": name, "methods": tuple(ev["methods"]),
                                         "seeds": tuple(ev["seeds"]), "durations": ev["durations"],
                                         "steps": ev["steps"]})
                 for name in (ev["scenario"] if isinstance(ev["scenario"], list) else [ev["scenario"]])]
    bench = _benchmark(cfg)
    out.mkdir(parents=True, exist_ok=True)
    report = run_loso(bench, scenarios, hc, threads=threads, subjects=ev["subjects"],
                      checkpoint_dir=cfg["harness"]["checkpoints"],
                      partial_path=out / "partial_results.csv")
    emit_report(report, out)
    (out / "partial_results.csv").unlink(missing_ok=True)
    _write_config(cfg, out)
    problems = audit_report(report)
    for p in problems:
        print(f"audit: {p}", file=sys.stderr)
    print(out / "results.csv")
    return 1 if problems else 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (unknown keys are rejected)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="run seed (cohort seed for generate, training seed otherwise)")
    common.add_argument("--threads", type=int, default=1, help="parallel folds; 1 is bit-reproducible")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. meta.epochs=50 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gaitmeta", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write the synthetic benchmark and manifest")
    p = sub.add_parser("train", parents=[common], help="meta-train or pretrain and save a checkpoint")
    p.add_argument("--method", choices=["maml", "supervised"])
    p.add_argument("--manifest")
    p = sub.add_parser("evaluate", parents=[common], help="leave-one-subject-out evaluation")
    p.add_argument("--scenario", choices=["S1", "S2", "S3"], action="append")
    p.add_argument("--manifest")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config, args.overrides, args.seed)
        if getattr(args, "manifest", None):
            cfg["data"]["manifest"] = args.manifest
        if getattr(args, "method", None):
            cfg["train"]["method"] = args.method
        if getattr(args, "scenario", None):
            cfg["evaluate"]["scenario"] = args.scenario if len(args.scenario) > 1 else args.scenario[0]
        out = Path(args.out)
        if args.command == "generate":
            return cmd_generate(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        return cmd_evaluate(cfg, out, args.threads)
    except ConfigError as e:
        print(f"gaitmeta: config error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, FloatingPointError, AssertionError) as e:
        print(f"gaitmeta: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

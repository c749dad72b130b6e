"""Leave-one-subject-out driver for the calibration-size (S1), fine-tune-steps (S2) and fixed (S3) scenarios."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .baselines import DEFAULT_LR, BaselineKind, PretrainConfig, freeze_mask, pretrain
from .meta import MetaConfig, evaluate, fine_tune, meta_train
from .metrics import confidence_interval
from .network import ModelConfig, ParameterSet, init_params, load_params, save_params
from .objective import LossWeights
from .synthgait import Benchmark, SessionRecording
from .tasks import MODES, PHASES, STAIR_MODES, WindowSet

log = logging.getLogger(__name__)

METHODS = ("MAML", "RI", "DE", "TL", "SFT")
METRICS = ("gait_acc", "loc_acc", "incline_rmse")
RESULT_COLUMNS = ("method", "subject", "mode", "metric", "value", "ci", "duration_s", "steps", "seed")
CONFUSION_COLUMNS = ("method", "true_phase", "pred_phase", "count")
# pooled groups reported next to the individual modes
MODE_GROUPS = {"TREADMILL": ("LW", "RA", "RD"), "STAIRS": STAIR_MODES}
ALL = "ALL"

SCENARIO_DEFAULTS = {
    "S1": ((1.5, 2.0, 2.5, 3.0, 3.5), (4,)),
    "S2": ((3.5,), (0, 1, 2, 3, 4)),
    "S3": ((3.5,), (4,)),
}
# operating point whose phase confusion matrices are reported
CONFUSION_POINT = {"S1": (3.5, 4), "S2": (3.5, 2), "S3": (3.5, 4)}


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "S3"
    durations: tuple[float, ...] | None = None
    steps: tuple[int, ...] | None = None
    methods: tuple[str, ...] = METHODS
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        if self.scenario not in SCENARIO_DEFAULTS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {sorted(SCENARIO_DEFAULTS)}")
        d0, s0 = SCENARIO_DEFAULTS[self.scenario]
        durations = tuple(float(d) for d in (self.durations if self.durations is not None else d0))
        steps = tuple(int(s) for s in (self.steps if self.steps is not None else s0))
        object.__setattr__(self, "durations", durations)
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.scenario == "S1" and steps != (4,):
            raise ValueError("S1 fixes fine-tune steps at 4")
        if self.scenario == "S2" and durations != (3.5,):
            raise ValueError("S2 fixes the calibration duration at 3.5 s")
        if self.scenario == "S3" and (durations, steps) != ((3.5,), (4,)):
            raise ValueError("S3 is the single operating point (3.5 s, 4 steps)")
        if not durations or not steps or min(steps) < 0 or min(durations) <= 0:
            raise ValueError("need non-empty durations > 0 and steps >= 0")
        unknown = set(self.methods) - set(METHODS)
        if unknown or not self.methods:
            raise ValueError(f"methods must be a non-empty subset of {METHODS}, got {self.methods}")
        if not self.seeds:
            raise ValueError("need at least one repeat seed")

    @property
    def grid(self) -> list[tuple[float, int]]:
        return [(d, s) for d in self.durations for s in self.steps]

    @property
    def confusion_point(self) -> tuple[float, int]:
        point = CONFUSION_POINT[self.scenario]
        return point if point in self.grid else self.grid[-1]


@dataclass(frozen=True)
class HarnessConfig:
    """Everything a fold needs besides the data."""

    model: ModelConfig = ModelConfig()
    meta: MetaConfig = MetaConfig()
    pretrain: PretrainConfig = PretrainConfig()
    learning_rates: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    loss_weights: LossWeights = LossWeights()
    task_stride: int = 10
    pretrain_stride: int = 10
    calibration_stride: int = 5
    query_stride: int = 20


@dataclass(frozen=True)
class ResultRecord:
    method: str
    subject: int | str          # held-out subject id, or "ALL"
    mode: str                   # a mode, a mode group, or "ALL"
    metric: str
    value: float
    ci: float | None            # 95% half-width; None for single-run rows
    duration_s: float
    steps: int
    seed: int                   # -1 for rows aggregated over seeds

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.metric != "incline_rmse" and not 0.0 <= self.value <= 1.0:
            raise ValueError(f"{self.metric} = {self.value} outside [0, 1]")
        if self.metric == "incline_rmse" and not self.value >= 0.0:
            raise ValueError(f"incline_rmse = {self.value} is negative")

    def row(self) -> list[str]:
        return [self.method, str(self.subject), self.mode, self.metric, repr(float(self.value)),
                "" if self.ci is None else repr(float(self.ci)), repr(float(self.duration_s)),
                str(self.steps), str(self.seed)]


@dataclass
class ModeStats:
    """Sufficient statistics of one evaluation, split by true mode."""

    n: np.ndarray              # [5]
    gait_correct: np.ndarray   # [5]
    loc_correct: np.ndarray    # [5]
    sq_err: np.ndarray         # [5]
    confusion: np.ndarray      # [4, 4]

    @classmethod
    def from_predictions(cls, preds, query: WindowSet) -> "ModeStats":
        pm, pp, pi = preds
        k = len(MODES)
        mode = query.mode
        conf = np.zeros((len(PHASES), len(PHASES)), dtype=np.int64)
        np.add.at(conf, (query.phase, pp), 1)
        return cls(np.bincount(mode, minlength=k),
                   np.bincount(mode, weights=(pp == query.phase), minlength=k).astype(np.int64),
                   np.bincount(mode, weights=(pm == query.mode), minlength=k).astype(np.int64),
                   np.bincount(mode, weights=(pi - query.incline) ** 2, minlength=k),
                   conf)

    def __add__(self, other: "ModeStats") -> "ModeStats":
        return ModeStats(self.n + other.n, self.gait_correct + other.gait_correct,
                         self.loc_correct + other.loc_correct, self.sq_err + other.sq_err,
                         self.confusion + other.confusion)

    def values(self, modes: Sequence[str] | None = None) -> dict[str, float]:
        idx = [MODES.index(m) for m in (modes or MODES)]
        n = int(self.n[idx].sum())
        if n == 0:
            return {}
        return {"gait_acc": int(self.gait_correct[idx].sum()) / n,
                "loc_acc": int(self.loc_correct[idx].sum()) / n,
                "incline_rmse": math.sqrt(float(self.sq_err[idx].sum()) / n)}


# one evaluation: (method, duration, steps, seed) -> stats
FoldResult = dict[tuple[str, float, int, int], ModeStats]


# ---------------------------------------------------------------------------
# data splits

def calibration_offset(session: SessionRecording, seed: int, max_duration: float) -> int:
    """Start frame of the calibration segment; seed 0 uses the start of the recording."""
    if seed == 0:
        return 0
    room = len(session) - int(round(max_duration * session.sample_rate))
    if room <= 0:
        return 0
    rng = np.random.default_rng([seed, session.task.subject, int(session.trial),
                                 int(round(session.task.incline * 10)) + 1000,
                                 int(round(session.task.speed * 100)), MODES.index(session.task.mode)])
    return int(rng.integers(0, room + 1))


def calibration_set(bench: Benchmark, subject: int, duration: float, stride: int,
                    seed: int = 0, max_duration: float | None = None) -> WindowSet:
    """Windows lying inside ``duration`` seconds of the first trial of every condition."""
    max_duration = max(duration, max_duration or duration)

    def frames(s):
        start = calibration_offset(s, seed, max_duration)
        return start, start + int(round(duration * s.sample_rate))

    pool = bench.pool(lambda i, s: s.task.subject == subject and s.trial == 0, stride, frames)
    if len(pool) == 0:
        raise ValueError(f"no calibration windows for subject {subject} at {duration} s "
                         f"(window length {bench.k} frames)")
    return pool.materialize()


def query_set(bench: Benchmark, subject: int, stride: int) -> WindowSet:
    """Every later trial of the held-out subject; disjoint from calibration by trial."""
    pool = bench.pool(lambda i, s: s.task.subject == subject and s.trial >= 1, stride)
    if len(pool) == 0:
        raise ValueError(f"subject {subject} has no query trials")
    return pool.materialize()


def _audit(subjects: np.ndarray, held_out: int, what: str) -> None:
    if np.any(subjects == held_out):
        raise AssertionError(f"{what} contains windows of held-out subject {held_out}")


# ---------------------------------------------------------------------------
# one fold

def _fold_seed(base: int, held_out: int) -> int:
    return base * 1000 + held_out


def _checkpoint(path: Path | None, train_fn) -> ParameterSet:
    if path is not None and path.exists():
        return load_params(path)
    params = train_fn()
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_params(params, path)
    return params


def train_fold(bench: Benchmark, held_out: int, cfg: HarnessConfig, methods: Iterable[str],
               checkpoint_dir: str | os.PathLike | None = None) -> dict[str, ParameterSet]:
    """Meta-train and/or pretrain on every subject except ``held_out``."""
    methods = set(methods)
    train_subjects = [s for s in bench.subjects if s != held_out]
    ckpt = Path(checkpoint_dir) if checkpoint_dir else None
    out = {}
    if "MAML" in methods:
        pools = bench.task_pools(train_subjects, cfg.task_stride)
        for p in pools.values():
            _audit(p.subject, held_out, "meta-training task set")
        meta_cfg = dataclasses.replace(cfg.meta, seed=_fold_seed(cfg.meta.seed, held_out))
        out["MAML"] = _checkpoint(
            ckpt / f"fold{held_out:02d}_maml.mgait" if ckpt else None,
            lambda: meta_train(sorted(pools), pools, meta_cfg, cfg.model, cfg.loss_weights)[0])
    if methods & {"DE", "TL", "SFT"}:
        pool = bench.pool(lambda i, s: s.task.subject != held_out, cfg.pretrain_stride)
        _audit(pool.subject, held_out, "pretraining set")
        pre_cfg = dataclasses.replace(cfg.pretrain, seed=_fold_seed(cfg.pretrain.seed, held_out))
        out["pretrained"] = _checkpoint(
            ckpt / f"fold{held_out:02d}_pretrained.mgait" if ckpt else None,
            lambda: pretrain(pool, pre_cfg, cfg.model, cfg.loss_weights)[0])
    return out


def _trainable(method: str, params: ParameterSet) -> list[str]:
    kind = "SFT" if method == "MAML" else method
    return [n for n, on in freeze_mask(BaselineKind(kind), params.names).items() if on]


def evaluate_fold(bench: Benchmark, held_out: int, trained: dict[str, ParameterSet], cfg: HarnessConfig,
                  scenarios: Sequence[ScenarioConfig]) -> FoldResult:
    """Fine-tune and score every method at every operating point and seed.

    Step counts along one fine-tuning run are nested, so each (method,
    duration, seed) is fine-tuned once and scored after every requested step.
    """
    query = query_set(bench, held_out, cfg.query_stride)
    methods = [m for m in METHODS if any(m in sc.methods for sc in scenarios)]
    seeds = sorted({s for sc in scenarios for s in sc.seeds})
    durations = sorted({d for sc in scenarios for d in sc.durations})
    steps_at = {d: sorted({s for sc in scenarios for dd, s in sc.grid if dd == d}) for d in durations}
    max_d = max(durations)
    result: FoldResult = {}
    de_stats = None
    for seed in seeds:
        for d in durations:
            calib = calibration_set(bench, held_out, d, cfg.calibration_stride, seed, max_d)
            for method in methods:
                if method == "DE":
                    if de_stats is None:
                        de_stats = ModeStats.from_predictions(evaluate(trained["pretrained"], query)[1], query)
                    for s in steps_at[d]:
                        result[("DE", d, s, seed)] = de_stats
                    continue
                if method == "RI":
                    params = init_params(cfg.model, _fold_seed(seed, held_out))
                else:
                    params = trained["MAML" if method == "MAML" else "pretrained"]
                trainable = _trainable(method, params)
                lr = cfg.learning_rates[method]
                done = 0
                for s in steps_at[d]:
                    params = fine_tune(params, calib, lr, s - done, trainable, cfg.loss_weights)
                    done = s
                    result[(method, d, s, seed)] = ModeStats.from_predictions(evaluate(params, query)[1], query)
    return result


def _run_fold(args) -> tuple[int, FoldResult]:
    sessions, k, held_out, cfg, scenarios, checkpoint_dir = args
    bench = Benchmark(sessions, k)
    methods = {m for sc in scenarios for m in sc.methods}
    trained = train_fold(bench, held_out, cfg, methods, checkpoint_dir)
    return held_out, evaluate_fold(bench, held_out, trained, cfg, scenarios)


# ---------------------------------------------------------------------------
# aggregation

def fold_records(held_out: int, res: FoldResult) -> list[ResultRecord]:
    """Per-seed rows for one fold plus the across-seed mean with its CI."""
    recs = []
    points = sorted({(m, d, s) for m, d, s, _ in res}, key=lambda p: (METHODS.index(p[0]), p[1], p[2]))
    for method, d, s in points:
        seeds = sorted(seed for m, dd, ss, seed in res if (m, dd, ss) == (method, d, s))
        vals = {seed: res[(method, d, s, seed)].values() for seed in seeds}
        for metric in METRICS:
            for seed in seeds:
                recs.append(ResultRecord(method, held_out, ALL, metric, vals[seed][metric], None, d, s, seed))
            if len(seeds) >= 2:
                mean, ci = confidence_interval([vals[seed][metric] for seed in seeds])
                recs.append(ResultRecord(method, held_out, ALL, metric, mean, ci, d, s, -1))
    return recs


def cohort_records(per_fold: dict[int, FoldResult], fold_recs: Sequence[ResultRecord]) -> list[ResultRecord]:
    """Cross-subject averages (CI over subjects) and per-mode rows (samples pooled over folds)."""
    recs = []
    subjects = sorted(per_fold)
    summary_rows = {}
    for r in fold_recs:
        n_seeds = len({k[3] for k in per_fold[r.subject]})
        if (n_seeds >= 2 and r.seed == -1) or (n_seeds == 1 and r.seed != -1):
            summary_rows[(r.method, r.duration_s, r.steps, r.metric, r.subject)] = r.value
    points = sorted({k[:4] for k in summary_rows}, key=lambda p: (METHODS.index(p[0]), p[1], p[2], METRICS.index(p[3])))
    for method, d, s, metric in points:
        values = [summary_rows[(method, d, s, metric, subj)] for subj in subjects]
        if len(values) >= 2:
            mean, ci = confidence_interval(values)
        else:
            mean, ci = values[0], None
        recs.append(ResultRecord(method, ALL, ALL, metric, mean, ci, d, s, -1))

    keys = sorted({k for res in per_fold.values() for k in res},
                  key=lambda k: (METHODS.index(k[0]), k[1], k[2], k[3]))
    pooled: dict[tuple, ModeStats] = {}
    for key in keys:
        total = None
        for subj in subjects:
            st = per_fold[subj][key]
            total = st if total is None else total + st
        pooled[key] = total
    groups = [(m, (m,)) for m in MODES] + list(MODE_GROUPS.items())
    for method, d, s in sorted({k[:3] for k in keys}, key=lambda p: (METHODS.index(p[0]), p[1], p[2])):
        seeds = sorted(k[3] for k in keys if k[:3] == (method, d, s))
        for name, modes in groups:
            per_seed = {seed: pooled[(method, d, s, seed)].values(modes) for seed in seeds}
            if not all(per_seed.values()):
                continue
            for metric in METRICS:
                for seed in seeds:
                    recs.append(ResultRecord(method, ALL, name, metric, per_seed[seed][metric], None, d, s, seed))
                if len(seeds) >= 2:
                    mean, ci = confidence_interval([per_seed[seed][metric] for seed in seeds])
                    recs.append(ResultRecord(method, ALL, name, metric, mean, ci, d, s, -1))
    return recs


@dataclass
class LosoReport:
    records: list[ResultRecord]
    confusion: dict[str, np.ndarray]          # method -> [4, 4] at the confusion operating point
    confusion_point: tuple[float, int]
    per_fold: dict[int, FoldResult] = field(repr=False, default_factory=dict)


def run_loso(bench: Benchmark, scenarios: ScenarioConfig | Sequence[ScenarioConfig],
             cfg: HarnessConfig = HarnessConfig(), threads: int = 1, subjects: Sequence[int] | None = None,
             checkpoint_dir: str | os.PathLike | None = None,
             partial_path: str | os.PathLike | None = None) -> LosoReport:
    """Hold out each subject in turn; train on the rest, adapt and score per the scenario grids.

    Several scenarios share one training run per fold. With ``threads`` > 1
    folds run in worker processes; each fold is computed the same way, so
    results do not depend on the thread count.
    """
    if isinstance(scenarios, ScenarioConfig):
        scenarios = [scenarios]
    scenarios = list(scenarios)
    if not scenarios:
        raise ValueError("run_loso needs at least one scenario")
    if len(bench.subjects) < 2:
        raise ValueError(f"LOSO needs >= 2 subjects, benchmark has {len(bench.subjects)}")
    folds = list(subjects) if subjects is not None else bench.subjects
    missing = set(folds) - set(bench.subjects)
    if missing:
        raise ValueError(f"unknown held-out subjects {sorted(missing)}")
    jobs = [(bench.sessions, bench.k, s, cfg, scenarios, checkpoint_dir) for s in folds]
    per_fold: dict[int, FoldResult] = {}
    fold_recs: list[ResultRecord] = []

    def collect(held_out, res):
        per_fold[held_out] = res
        recs = fold_records(held_out, res)
        fold_recs.extend(recs)
        if partial_path:
            _append_rows(partial_path, recs)
        log.info("fold %d done", held_out)

    if partial_path and Path(partial_path).exists():
        Path(partial_path).unlink()
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            for held_out, res in ex.map(_run_fold, jobs):
                collect(held_out, res)
    else:
        for job in jobs:
            collect(*_run_fold(job))

    records = sorted(fold_recs, key=lambda r: folds.index(r.subject)) + cohort_records(per_fold, fold_recs)
    point = scenarios[0].confusion_point
    confusion = {}
    for method in METHODS:
        mats = [st.confusion for res in per_fold.values() for (m, d, s, _), st in res.items()
                if (m, d, s) == (method, point[0], point[1])]
        if mats:
            confusion[method] = np.sum(mats, axis=0)
    return LosoReport(records, confusion, point, per_fold)


# ---------------------------------------------------------------------------
# report files

def _append_rows(path, recs: Sequence[ResultRecord]) -> None:
    new = not Path(path).exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(RESULT_COLUMNS)
        w.writerows(r.row() for r in recs)


def write_results_csv(records: Sequence[ResultRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        w.writerows(r.row() for r in records)


def read_results_csv(path) -> list[ResultRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != RESULT_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        out = []
        for row in reader:
            method, subject, mode, metric, value, ci, d, s, seed = row
            out.append(ResultRecord(method, subject if subject == ALL else int(subject), mode, metric,
                                    float(value), float(ci) if ci else None, float(d), int(s), int(seed)))
    return out


def summarize(records: Sequence[ResultRecord]) -> dict:
    """Cross-subject means per method and operating point."""
    out: dict = {"ci_basis": "95% normal interval across held-out subjects of per-subject means "
                             "(per-subject rows: across repeat seeds; per-mode rows: across seeds)",
                 "methods": {}}
    for r in records:
        if r.subject != ALL or r.mode != ALL:
            continue
        point = f"{r.duration_s:g}s_{r.steps}steps"
        entry = out["methods"].setdefault(r.method, {}).setdefault(point, {
            "duration_s": r.duration_s, "steps": r.steps})
        entry[r.metric] = {"mean": r.value, "ci": r.ci}
    return out


def emit_report(report: LosoReport | Sequence[ResultRecord], out_dir) -> dict[str, Path]:
    """Write results.csv, confusion.csv and summary.json into ``out_dir``."""
    records = report.records if isinstance(report, LosoReport) else list(report)
    if not records:
        raise ValueError("emit_report: no records")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create report directory {out}: {e}") from e
    paths = {"results": out / "results.csv", "confusion": out / "confusion.csv",
             "summary": out / "summary.json"}
    write_results_csv(records, paths["results"])
    with open(paths["confusion"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CONFUSION_COLUMNS)
        if isinstance(report, LosoReport):
            for method, cm in report.confusion.items():
                for i, t in enumerate(PHASES):
                    for j, p in enumerate(PHASES):
                        w.writerow([method, t, p, int(cm[i, j])])
    summary = summarize(records)
    if isinstance(report, LosoReport):
        summary["confusion_point"] = {"duration_s": report.confusion_point[0],
                                      "steps": report.confusion_point[1]}
    paths["summary"].write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return paths


def audit_report(report: LosoReport) -> list[str]:
    """Invariant checks over a finished run; returns a list of violations."""
    problems = []
    for subj, res in report.per_fold.items():
        de = {}
        for (m, d, s, seed), st in res.items():
            if st.confusion.sum() != st.n.sum():
                problems.append(f"subject {subj} {m} ({d}, {s}, seed {seed}): confusion total "
                                f"{st.confusion.sum()} != {st.n.sum()} query samples")
            acc = np.trace(st.confusion) / st.confusion.sum()
            if acc != st.values()["gait_acc"]:
                problems.append(f"subject {subj} {m}: diagonal accuracy {acc} != gait_acc")
            if m == "DE":
                de.setdefault(seed, []).append(st.values())
        for seed, vals in de.items():
            if any(v != vals[0] for v in vals):
                problems.append(f"subject {subj}: DE metrics vary across operating points (seed {seed})")
    return problems

import json

import numpy as np
import pytest

from gaitmeta import harness as hz
from gaitmeta.baselines import PretrainConfig
from gaitmeta.harness import (ALL, HarnessConfig, ResultRecord, ScenarioConfig, audit_report, calibration_set,
                              emit_report, query_set, read_results_csv, run_loso)
from gaitmeta.meta import MetaConfig
from gaitmeta.network import ModelConfig

TINY = HarnessConfig(
    model=ModelConfig(conv_out_channels=3, conv_kernel=5, pool=20, encoder_width=6, head_width=4),
    meta=MetaConfig(alpha=0.05, beta=0.01, epochs=2, n=20, m=30),
    pretrain=PretrainConfig(epochs=1), learning_rates={"MAML": 0.05, "RI": 0.05, "TL": 0.05, "SFT": 0.05, "DE": 0.0},
    pretrain_stride=40, query_stride=40, calibration_stride=10)
SCENARIOS = [ScenarioConfig("S1", seeds=(0, 1)), ScenarioConfig("S2", seeds=(0, 1))]


@pytest.fixture(scope="module")
def report(small_bench, tmp_path_factory):
    ck = tmp_path_factory.mktemp("ck")
    rep = run_loso(small_bench, SCENARIOS, TINY, checkpoint_dir=ck)
    return rep, ck


def test_scenario_grids():
    assert ScenarioConfig("S1").grid == [(d, 4) for d in (1.5, 2.0, 2.5, 3.0, 3.5)]
    assert ScenarioConfig("S2").grid == [(3.5, s) for s in range(5)]
    assert ScenarioConfig("S3").grid == [(3.5, 4)]
    assert ScenarioConfig().seeds == (0, 1, 2, 3, 4)
    with pytest.raises(ValueError, match="S1 fixes"):
        ScenarioConfig("S1", steps=(2,))
    with pytest.raises(ValueError, match="S2 fixes"):
        ScenarioConfig("S2", durations=(2.0,))
    with pytest.raises(ValueError, match="S3"):
        ScenarioConfig("S3", steps=(1,))
    with pytest.raises(ValueError, match="methods"):
        ScenarioConfig("S3", methods=("MAML", "XYZ"))


def test_calibration_and_query_windows(small_bench):
    for d in (1.5, 3.5):
        calib = calibration_set(small_bench, 2, d, 5, seed=0)
        ends = calib.uid % 1_000_000
        assert ends.max() < d * 100 and ends.min() >= 99
        assert set(calib.subject) == {2}
        # one block of windows per walking condition
        assert len(calib) == 17 * len(range(99, int(d * 100), 5))
    shifted = calibration_set(small_bench, 2, 1.5, 5, seed=3, max_duration=3.5)
    assert len(shifted) == len(calibration_set(small_bench, 2, 1.5, 5))
    q = query_set(small_bench, 2, 20)
    trial_of = {i: s.trial for i, s in enumerate(small_bench.sessions)}
    assert all(trial_of[u // 1_000_000] >= 1 for u in q.uid)
    assert not set(q.uid) & set(calibration_set(small_bench, 2, 3.5, 5).uid)


def test_training_never_sees_the_held_out_subject(small_bench, monkeypatch):
    seen = {}

    def fake_meta_train(tasks, pools, cfg, *a, **k):
        seen["meta"] = {int(s) for p in pools.values() for s in p.subject}
        return hz.init_params(TINY.model, 0), []

    def fake_pretrain(pool, cfg, *a, **k):
        seen["pre"] = set(pool.subject.tolist())
        return hz.init_params(TINY.model, 0), []

    monkeypatch.setattr(hz, "meta_train", fake_meta_train)
    monkeypatch.setattr(hz, "pretrain", fake_pretrain)
    hz.train_fold(small_bench, 2, TINY, ["MAML", "DE"])
    assert seen == {"meta": {1, 3}, "pre": {1, 3}}


def test_one_fold_per_subject_and_audits_pass(report, small_bench):
    rep, _ = report
    assert sorted(rep.per_fold) == small_bench.subjects
    assert audit_report(rep) == []
    for res in rep.per_fold.values():
        # S1 and S2 share (3.5 s, 4 steps)
        assert len(res) == len(hz.METHODS) * 9 * 2


def test_direct_evaluation_is_constant_and_zero_step_baselines_match_it(report):
    rep, _ = report
    for res in rep.per_fold.values():
        de = {k: st.values() for k, st in res.items() if k[0] == "DE"}
        assert len({json.dumps(v, sort_keys=True) for v in de.values()}) == 1
        for method in ("SFT", "TL"):
            for seed in (0, 1):
                assert res[(method, 3.5, 0, seed)].values() == res[("DE", 3.5, 0, seed)].values()


def test_record_levels(report):
    rep, _ = report
    recs = rep.records
    per_subject = [r for r in recs if r.subject != ALL and r.seed == -1]
    assert per_subject and all(r.ci is not None for r in per_subject)
    assert all(r.ci is None for r in recs if r.seed != -1)
    cohort = [r for r in recs if r.subject == ALL and r.mode == ALL]
    assert {(r.method, r.duration_s, r.steps) for r in cohort} >= {("MAML", 3.5, 4), ("DE", 1.5, 4)}
    modes = {r.mode for r in recs if r.subject == ALL}
    assert modes == {"ALL", "LW", "RA", "RD", "SA", "SD", "TREADMILL", "STAIRS"}


def test_cohort_means_recompute_from_subject_rows(report, tmp_path):
    rep, _ = report
    paths = emit_report(rep, tmp_path)
    rows = read_results_csv(paths["results"])
    summary = json.loads(paths["summary"].read_text())
    for method, points in summary["methods"].items():
        for entry in points.values():
            for metric in hz.METRICS:
                vals = [r.value for r in rows if r.method == method and r.subject != ALL and r.seed == -1
                        and r.metric == metric and r.duration_s == entry["duration_s"] and r.steps == entry["steps"]]
                assert abs(entry[metric]["mean"] - float(np.mean(vals))) <= 1e-12


def test_report_files_round_trip(report, tmp_path):
    rep, _ = report
    paths = emit_report(rep, tmp_path)
    assert read_results_csv(paths["results"]) == rep.records
    lines = paths["results"].read_text().splitlines()
    assert lines[0] == "method,subject,mode,metric,value,ci,duration_s,steps,seed"
    conf = paths["confusion"].read_text().splitlines()
    assert conf[0] == "method,true_phase,pred_phase,count" and len(conf) == 1 + 5 * 16
    n_query = sum(int(st.n.sum()) for res in rep.per_fold.values() for k, st in res.items()
                  if k[:3] == ("MAML",) + rep.confusion_point)
    assert int(rep.confusion["MAML"].sum()) == n_query
    with pytest.raises(ValueError, match="no records"):
        emit_report([], tmp_path)


def test_checkpoints_are_reused(report, small_bench):
    rep, ck = report
    assert sorted(p.name for p in ck.iterdir()) == [f"fold{s:02d}_{k}.mgait" for s in (1, 2, 3)
                                                    for k in ("maml", "pretrained")]
    again = run_loso(small_bench, SCENARIOS[1], TINY, subjects=[2], checkpoint_dir=ck)
    first = {k: v for k, v in rep.per_fold[2].items() if k[1:3] in {(3.5, s) for s in range(5)}}
    assert {k: v.values() for k, v in again.per_fold[2].items()} == {k: v.values() for k, v in first.items()}


def test_parallel_folds_match_serial(report, small_bench):
    rep, ck = report
    par = run_loso(small_bench, SCENARIOS, TINY, threads=2, checkpoint_dir=ck)
    assert par.records == rep.records


def test_partial_results_are_flushed_per_fold(small_bench, tmp_path, monkeypatch):
    calls = []
    real = hz.evaluate_fold

    def failing(bench, held_out, *a, **k):
        calls.append(held_out)
        if len(calls) == 2:
            raise RuntimeError("boom")
        return real(bench, held_out, *a, **k)

    monkeypatch.setattr(hz, "evaluate_fold", failing)
    part = tmp_path / "partial.csv"
    with pytest.raises(RuntimeError):
        run_loso(small_bench, ScenarioConfig("S3", methods=("DE",), seeds=(0,)), TINY, partial_path=part)
    rows = read_results_csv(part)
    assert rows and {r.subject for r in rows} == {1}


def test_result_records_validate_ranges():
    with pytest.raises(ValueError):
        ResultRecord("MAML", 1, ALL, "gait_acc", 1.2, None, 3.5, 4, 0)
    with pytest.raises(ValueError):
        ResultRecord("MAML", 1, ALL, "incline_rmse", -1.0, None, 3.5, 4, 0)
    with pytest.raises(ValueError):
        run_loso(hz.Benchmark([]), ScenarioConfig(), TINY)

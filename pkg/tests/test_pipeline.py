import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import TINY_CORPUS, tiny_config
from nsod.audit import AccessLog, AuditViolation, guarded
from nsod.baselines import ns_ft_from_features, ns_nn_from_features
from nsod.datamodel import read_pseudo_labels
from nsod.pipeline import (
    ConfigError,
    FeatureStore,
    RunConfig,
    StageError,
    VotingParams,
    config_schema,
    load_bank,
    report,
    run_all,
    sweep,
    worker_count,
)


def test_config_roundtrip_and_digest(tmp_path):
    cfg = tiny_config(tmp_path / "a")
    d = cfg.to_dict()
    again = RunConfig.from_dict(json.loads(json.dumps(d)))
    assert again == cfg and again.digest() == cfg.digest()
    assert replace(cfg, output_dir="elsewhere", workers=3).digest() == cfg.digest()
    assert replace(cfg, fusion_mode="G-only").digest() != cfg.digest()
    assert replace(cfg, voting=VotingParams(threshold=0.6)).digest() != cfg.digest()
    assert replace(cfg, corpus=replace(TINY_CORPUS, seed=9)).digest() != cfg.digest()


def test_config_validation(tmp_path):
    ok = {"output_dir": str(tmp_path)}
    assert RunConfig.from_dict(ok).fusion_mode == "fused"
    for bad, msg in [
        ({"outputdir": "x"}, "unknown config keys"),
        ({}, "output_dir is required"),
        (dict(ok, fusion_mode="both"), "fusion_mode"),
        (dict(ok, baseline="ns-mt"), "baseline"),
        (dict(ok, voting={"threshold": 0.5, "tau": 1}), "unknown voting keys"),
        (dict(ok, voting={"threshold": 1.5}), "threshold"),
        (dict(ok, student={"stepz": 3}), "unknown student keys"),
        (dict(ok, corpus={"C": 1}), "corpus"),
        (dict(ok, schema_version=99), "schema_version"),
        (dict(ok, dataset={"manifest": str(tmp_path / "nope.json"), "ground_truth": "x"}), "does not exist"),
        (dict(ok, dataset={"manifest": "x"}, corpus={}), "exactly one"),
        (dict(ok, corpus=[1, 2]), "expected an object"),
    ]:
        with pytest.raises(ConfigError, match=msg):
            RunConfig.from_dict(bad)
    (tmp_path / "c.json").write_text("{\n\"output_dir\": }")
    with pytest.raises(ConfigError, match="invalid JSON"):
        RunConfig.load(tmp_path / "c.json")


def test_schema_is_versioned():
    s = config_schema()
    assert s["schema_version"] == 1
    assert {"corpus", "voting", "teacher", "student", "fusion_mode", "baseline"} <= set(s["fields"])
    json.dumps(s)


def test_worker_count(monkeypatch):
    monkeypatch.delenv("NSOD_WORKERS", raising=False)
    assert worker_count(0) == 1 and worker_count(4) == 4
    monkeypatch.setenv("NSOD_WORKERS", "2")
    assert worker_count(0) == 2 and worker_count(8) == 2


def test_tiny_run_artifacts(tiny_run):
    out, rec = tiny_run
    for path in rec.artifacts.values():
        assert Path(path).exists(), path
    for name in ("pseudo_stage1.jsonl", "teacher.bin", "pseudo.jsonl", "student.bin", "detections_test.jsonl",
                 "detections_unlabeled.jsonl", "results.json", "run_record.json", "features/bank.bin"):
        assert (out / name).exists(), name
    res = json.loads((out / "results.json").read_text())
    assert res["config_digest"] == rec.config_digest
    assert {"detection_map", "corloc", "classification_map", "macc"} <= set(res["metrics"])
    log = rec.training_log["student"]
    assert log["support_examples"] == TINY_CORPUS.C * TINY_CORPUS.k_support
    assert log["support_loss_weight"] == [1.0]
    assert log["examples"] == log["support_examples"] + TINY_CORPUS.n_unlabeled + TINY_CORPUS.distractor_count
    assert set(rec.timings) >= {"gen-data", "featurize", "vote", "train-teacher", "relabel", "train-student"}


def test_pseudo_label_records_consistent(tiny_run):
    out, _ = tiny_run
    stage1 = read_pseudo_labels(out / "pseudo_stage1.jsonl")
    fused = read_pseudo_labels(out / "pseudo.jsonl")
    for s, f in zip(stage1, fused):
        assert s.cway == int(np.argmax(s.sigma_S))
        assert f.sigma_A is not None
        np.testing.assert_allclose(f.q_hat, (f.sigma_S + f.sigma_A) / 2, atol=1e-12)
        assert f.y_hat.tolist() == (f.q_hat > 0.5).astype(int).tolist()


def test_rerun_is_identical(tiny_run, tiny_cache, tmp_path):
    out, _ = tiny_run
    run_all(tiny_config(tmp_path, tiny_cache))
    for name in ("pseudo_stage1.jsonl", "pseudo.jsonl", "teacher.bin", "student.bin", "results.json",
                 "detections_test.jsonl"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes(), name


def test_g_only_has_no_teacher(tiny_cache, tmp_path):
    rec = run_all(tiny_config(tmp_path, tiny_cache, fusion_mode="G-only"))
    assert not (tmp_path / "teacher.bin").exists()
    assert "teacher" not in rec.artifacts and "train-teacher" not in rec.timings
    pseudo = read_pseudo_labels(tmp_path / "pseudo.jsonl")
    assert all(p.sigma_A is None for p in pseudo)


def test_audit_catches_injected_ground_truth_read(tiny_cache, tmp_path):
    cfg = tiny_config(tmp_path, tiny_cache, fusion_mode="G-only")
    gt = tmp_path / "data" / "ground_truth.jsonl"
    log = AccessLog()
    with pytest.raises(AuditViolation, match="train-student"):
        run_all(cfg, audit_log=log, hooks={"train-student": lambda: gt.read_text()})
    assert log.violations() == [("train-student", str(gt.resolve()))]


def test_clean_run_has_empty_audit_log(tiny_cache, tmp_path):
    log = AccessLog()
    run_all(tiny_config(tmp_path, tiny_cache, fusion_mode="G-only"), audit_log=log)
    assert log.watched and log.violations() == []


def test_stage_failure_keeps_partial_artifacts(tiny_cache, tmp_path):
    def boom():
        raise RuntimeError("simulated crash")

    with pytest.raises(StageError, match="train-teacher") as info:
        run_all(tiny_config(tmp_path, tiny_cache), hooks={"train-teacher": boom})
    assert info.value.stage == "train-teacher"
    assert (tmp_path / "pseudo_stage1.jsonl").exists() and (tmp_path / "features" / "index.json").exists()
    assert not (tmp_path / "results.json").exists()


def test_external_dataset_mode(tiny_run, tiny_cache, tmp_path):
    out, rec = tiny_run
    data = out / "data"
    cfg = RunConfig(output_dir=str(tmp_path), corpus=None, student=tiny_config(tmp_path).student,
                    dataset={"manifest": str(data / "manifest.json"), "ground_truth": str(data / "ground_truth.jsonl"),
                             "proposals": str(out / "proposals.jsonl")}, cache_dir=tiny_cache)
    rec2 = run_all(cfg)
    assert (tmp_path / "student.bin").read_bytes() == (out / "student.bin").read_bytes()
    assert (tmp_path / "results.json").read_text().replace(rec2.config_digest, rec.config_digest) == \
        (out / "results.json").read_text()


@pytest.mark.parametrize("which", ["ns-ft", "ns-nn", "ns-base"])
def test_baseline_runs(which, tiny_cache, tmp_path):
    rec = run_all(tiny_config(tmp_path, tiny_cache, baseline=which))
    assert (tmp_path / "student.bin").exists() and not (tmp_path / "teacher.bin").exists()
    if which == "ns-base":
        assert not (tmp_path / "pseudo.jsonl").exists()
        assert rec.training_log["student"]["examples"] == TINY_CORPUS.C * TINY_CORPUS.k_support
    else:
        pseudo = read_pseudo_labels(tmp_path / "pseudo.jsonl")
        assert len(pseudo) == TINY_CORPUS.n_unlabeled + TINY_CORPUS.distractor_count
        assert all(p.y_hat.sum() == 1 and p.y_hat[p.cway] == 1 for p in pseudo)


def test_image_level_baselines_never_read_proposals(tiny_run):
    out, _ = tiny_run
    log = AccessLog()
    log.watch(out / "features" / "proposals.jsonl")
    log.watch(out / "proposals.jsonl")
    store = FeatureStore(out / "features")
    bank = load_bank(out / "features" / "bank.bin")
    ids, sup = store.ids_of("unlabeled"), store.ids_of("support")
    with guarded(log, "baseline"):
        ns_nn_from_features(bank, ids, store.global_features(ids))
        ns_ft_from_features(store.global_features(sup), [store.support_label[i] for i in sup], ids,
                            store.global_features(ids), len(store.catalog))
    assert log.violations() == []


def test_sweep_marks_failures_and_continues(tiny_cache, tmp_path):
    cfg = tiny_config(tmp_path, tiny_cache, fusion_mode="G-only")
    rows = sweep(cfg, "k", [0, 2], tmp_path / "sw")
    assert rows[0]["status"].startswith("failed") and rows[1]["status"] == "ok"
    csv = (tmp_path / "sw" / "sweep.csv").read_text().splitlines()
    assert len(csv) == 3 and csv[0].startswith("axis,value,status")
    svg = (tmp_path / "sw" / "sweep.svg").read_text()
    assert svg.lstrip().startswith("<?xml") and "<svg" in svg
    with pytest.raises(ConfigError):
        sweep(cfg, "threshold", [0.5])


def test_report_lists_absent_methods(tiny_run, tmp_path):
    out, _ = tiny_run
    text = report([out], tmp_path / "r.csv")
    lines = text.splitlines()
    assert lines[0].split()[:2] == ["run", "method"]
    assert any(" NSOD " in f" {ln} " for ln in lines)
    assert sum("absent" in ln for ln in lines) == 2
    assert "NS-MT-v1" in (tmp_path / "r.csv").read_text()
    with pytest.raises(ConfigError):
        report([tmp_path])

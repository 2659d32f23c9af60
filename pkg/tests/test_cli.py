import json
import subprocess
import sys


from nsod.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, main
from nsod.datamodel import read_detections, read_pseudo_labels


def run(*argv):
    return main([str(a) for a in argv])


def test_version_and_help(capsys):
    assert run("--version") == EXIT_OK
    assert run("--help") == EXIT_OK
    assert run("no-such-command") == EXIT_INVALID
    assert run("vote") == EXIT_INVALID  # missing required flags


def test_print_schema(capsys):
    assert run("run-all", "--print-schema") == EXIT_OK
    assert json.loads(capsys.readouterr().out)["schema_version"] == 1


def test_stage_by_stage(tiny_run, tmp_path, capsys):
    out, _ = tiny_run
    feats, data = out / "features", out / "data"
    s1, pseudo = tmp_path / "s1.jsonl", tmp_path / "p.jsonl"
    assert run("vote", "--features", feats, "--bank", feats / "bank.bin", "--out", s1) == EXIT_OK
    assert s1.read_bytes() == (out / "pseudo_stage1.jsonl").read_bytes()
    assert run("train-teacher", "--pseudo", s1, "--features", feats, "--out", tmp_path / "t.bin") == EXIT_OK
    assert (tmp_path / "t.bin").read_bytes() == (out / "teacher.bin").read_bytes()
    assert run("relabel", "--teacher", tmp_path / "t.bin", "--pseudo", s1, "--features", feats,
               "--out", pseudo) == EXIT_OK
    assert pseudo.read_bytes() == (out / "pseudo.jsonl").read_bytes()
    params = json.dumps({"steps": 150, "decay_step": 100})
    assert run("train-student", "--pseudo", pseudo, "--features", feats, "--out", tmp_path / "s.bin",
               "--params", params) == EXIT_OK
    assert (tmp_path / "s.bin").read_bytes() == (out / "student.bin").read_bytes()
    det = tmp_path / "det.jsonl"
    assert run("detect", "--model", tmp_path / "s.bin", "--manifest", data / "manifest.json", "--proposals",
               out / "proposals.jsonl", "--features", feats, "--out", det) == EXIT_OK
    assert det.read_bytes() == (out / "detections_test.jsonl").read_bytes()
    assert run("evaluate", "--det", det, "--gt", data / "ground_truth.jsonl", "--manifest", data / "manifest.json",
               "--split", "test", "--metric", "map", "--out", tmp_path / "r.json", "--csv", tmp_path / "r.csv") == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    res = json.loads((out / "results.json").read_text())["metrics"]["detection_map"]
    assert rep["mean"] == res["mean"] and rep["per_class"] == res["per_class"]
    assert (tmp_path / "r.csv").read_text().startswith("class,value")
    for metric in ("clsmap", "macc"):
        assert run("evaluate", "--pseudo", pseudo, "--gt", data / "ground_truth.jsonl", "--manifest",
                   data / "manifest.json", "--metric", metric, "--out", tmp_path / f"{metric}.json") == EXIT_OK
    assert run("evaluate", "--proposals", out / "proposals.jsonl", "--gt", data / "ground_truth.jsonl",
               "--classes", "a,b,c,d,e", "--metric", "recall", "--out", tmp_path / "rec.json") == EXIT_OK
    assert json.loads((tmp_path / "rec.json").read_text())["mean"] >= 0.9


def test_detect_without_features_matches(tiny_run, tmp_path):
    out, _ = tiny_run
    data = out / "data"
    det = tmp_path / "d.jsonl"
    assert run("detect", "--model", out / "student.bin", "--manifest", data / "manifest.json", "--proposals",
               out / "proposals.jsonl", "--out", det) == EXIT_OK
    assert read_detections(det) == read_detections(out / "detections_test.jsonl")


def test_baseline_subcommand(tiny_run, tmp_path):
    out, _ = tiny_run
    for which in ("ns-ft", "ns-nn"):
        dest = tmp_path / f"{which}.jsonl"
        assert run("baseline", "--strategy", which, "--features", out / "features", "--out", dest) == EXIT_OK
        assert all(p.y_hat.sum() == 1 for p in read_pseudo_labels(dest))
    assert run("baseline", "--strategy", "ns-base", "--features", out / "features", "--out", tmp_path / "b.bin",
               "--params", '{"steps": 10}') == EXIT_OK
    assert run("baseline", "--strategy", "ns-mt", "--features", out / "features", "--out", tmp_path / "x") == 1


def test_validation_errors_exit_1(tiny_run, tmp_path, capsys):
    out, _ = tiny_run
    assert run("vote", "--features", tmp_path, "--out", tmp_path / "x") == EXIT_INVALID
    assert run("evaluate", "--gt", tmp_path / "missing.jsonl", "--metric", "map", "--out", tmp_path / "r") == 1
    assert run("evaluate", "--gt", out / "data" / "ground_truth.jsonl", "--manifest", out / "data" / "manifest.json",
               "--metric", "map", "--out", tmp_path / "r") == EXIT_INVALID
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"output_dir": str(tmp_path / "run"), "fusion": "fused"}))
    assert run("run-all", "--config", cfg) == EXIT_INVALID
    assert "unknown config keys" in capsys.readouterr().err
    assert run("train-student", "--features", out / "features", "--out", tmp_path / "s.bin",
               "--params", '{"steps": "many"}') == EXIT_INVALID


def test_runtime_failure_exit_2(tiny_run, tmp_path, capsys):
    out, _ = tiny_run
    bad = tmp_path / "t.bin"
    bad.write_bytes(b"NSODTCHR" + bytes(4))
    # a corrupt model is a malformed input: validation error
    assert run("relabel", "--teacher", bad, "--pseudo", out / "pseudo_stage1.jsonl", "--features",
               out / "features", "--out", tmp_path / "p.jsonl") == EXIT_INVALID
    cfg = tmp_path / "c.json"
    # instances cannot be placed on this canvas: generation fails at runtime
    cfg.write_text(json.dumps({"output_dir": str(tmp_path / "run"),
                               "corpus": {"canvas": [64, 64], "instances_per_image": [5, 5], "n_unlabeled": 3,
                                          "n_test": 1, "k_support": 1},
                               "proposals": {"scales": [20, 30]}}))
    assert run("run-all", "--config", cfg) == EXIT_RUNTIME
    assert "gen-data" in capsys.readouterr().err


def test_run_all_sweep_report(tiny_cache, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "output_dir": str(tmp_path / "run"), "cache_dir": tiny_cache, "fusion_mode": "G-only",
        "corpus": {"n_unlabeled": 30, "n_test": 10, "k_support": 2, "distractor_count": 4},
        "student": {"steps": 150, "decay_step": 100}}))
    assert run("run-all", "--config", cfg) == EXIT_OK
    assert (tmp_path / "run" / "results.json").exists()
    assert run("sweep", "--config", cfg, "--axis", "fusion_mode", "--values", "G-only,bogus",
               "--out", tmp_path / "sw") == EXIT_OK
    assert "failed" in (tmp_path / "sw" / "sweep.csv").read_text()
    assert run("sweep", "--config", cfg, "--axis", "k", "--values", "x") == EXIT_INVALID
    capsys.readouterr()
    assert run("report", tmp_path / "run", tmp_path / "sw" / "fusion_mode=G-only") == EXIT_OK
    text = capsys.readouterr().out
    assert "NSOD_G" in text and "absent" in text


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "nsod.cli", "gen-data", "--spec", '{"n_unlabeled": 2}',
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == EXIT_OK, proc.stderr
    assert (tmp_path / "manifest.json").exists() and (tmp_path / "proposals.jsonl").exists()
    bad = subprocess.run([sys.executable, "-m", "nsod.cli", "gen-data", "--spec", '{"C": 1}', "--out",
                          str(tmp_path / "x")], capture_output=True, text=True)
    assert bad.returncode == EXIT_INVALID

import csv
import json

import pytest

from freeflow.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, RunManifest, main, parse_int_list
from freeflow.network import scenario_hash
from freeflow.scenarios import merge_2to1, single_segment


@pytest.fixture
def short_merge(tmp_path):
    path = tmp_path / "merge.json"
    path.write_text(json.dumps(merge_2to1(duration=240.0)), encoding="utf-8")
    return path


def test_int_lists():
    assert parse_int_list("0-2,7") == [0, 1, 2, 7]


@pytest.mark.parametrize("argv", [
    [],
    ["simulate"],
    ["simulate", "--scenario", "merge_2to1", "--bogus"],
    ["simulate", "--scenario", "merge_2to1", "--seeds", "a,b"],
    ["poc-merge", "--controller", "dqn"],
    ["scenario", "atlantis"],
])
def test_usage_errors(argv, capsys):
    assert main(argv) == EXIT_USAGE


def test_missing_scenario_file(tmp_path, capsys):
    assert main(["simulate", "--scenario", str(tmp_path / "nope.json"), "--out", str(tmp_path / "r.csv")]) == EXIT_USAGE
    assert "not found" in capsys.readouterr().err


def test_invalid_scenario(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"links": []}', encoding="utf-8")
    assert main(["simulate", "--scenario", str(bad), "--out", str(tmp_path / "r.csv")]) == EXIT_USAGE


def test_runtime_failure_exit_code(tmp_path, capsys):
    # an unwritable output location is a runtime failure, not a usage error
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code = main(["scenario", "merge_2to1", "--out", str(blocker / "sub.json")])
    assert code == EXIT_RUNTIME


def test_simulate_five_seeds(short_merge, tmp_path, capsys):
    out = tmp_path / "report.csv"
    argv = ["simulate", "--scenario", str(short_merge), "--controller", "backpressure",
            "--seeds", "0-4", "--out", str(out)]
    assert main(argv) == EXIT_OK
    rows = list(csv.reader(out.open()))
    assert len(rows) - 1 == 7
    assert out.with_suffix(".png").stat().st_size > 0
    manifest = RunManifest.load(RunManifest.path_for(out))
    assert manifest.command == argv
    assert manifest.seeds == [0, 1, 2, 3, 4]
    assert manifest.scenario_hash == scenario_hash(short_merge.read_bytes())
    assert manifest.status == "ok" and manifest.wall_clock_s > 0
    assert str(out) in manifest.outputs


def test_rerun_and_replay_identical(short_merge, tmp_path, capsys):
    a, b = tmp_path / "a" / "r.csv", tmp_path / "b" / "r.csv"
    for out in (a, b):
        out.parent.mkdir()
        assert main(["simulate", "--scenario", str(short_merge), "--seeds", "3", "--no-figures",
                     "--out", str(out), "--trace", str(out.with_name("trace.csv"))]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    assert a.with_name("trace.csv").read_bytes() == b.with_name("trace.csv").read_bytes()
    replay_dir = tmp_path / "replay"
    assert main(["replay", str(RunManifest.path_for(a)), "--out-dir", str(replay_dir)]) == EXIT_OK
    assert (replay_dir / "r.csv").read_bytes() == a.read_bytes()


def test_replay_detects_changed_scenario(short_merge, tmp_path, capsys):
    out = tmp_path / "r.csv"
    assert main(["simulate", "--scenario", str(short_merge), "--seeds", "0", "--no-figures",
                 "--out", str(out)]) == EXIT_OK
    short_merge.write_text(json.dumps(merge_2to1(duration=300.0)), encoding="utf-8")
    assert main(["replay", str(RunManifest.path_for(out))]) == EXIT_USAGE


def test_eval_width_mismatch(tmp_path, capsys):
    policy = tmp_path / "p.json"
    assert main(["train", "--scenario", "single_segment", "--episodes", "0", "--no-figures",
                 "--out", str(policy)]) == EXIT_OK
    capsys.readouterr()
    code = main(["eval", "--policy", str(policy), "--scenario", "mainz_corridor", "--seeds", "0",
                 "--out", str(tmp_path / "e.csv")])
    assert code == EXIT_USAGE
    err = capsys.readouterr().err
    assert "10" in err and "60" in err


def test_dqn_needs_policy(tmp_path, capsys):
    assert main(["simulate", "--scenario", "merge_2to1", "--controller", "dqn",
                 "--out", str(tmp_path / "r.csv")]) == EXIT_USAGE


def test_calibrate_small_sweep(tmp_path, capsys):
    doc = tmp_path / "seg.json"
    doc.write_text(json.dumps(single_segment(duration=900.0)), encoding="utf-8")
    out = tmp_path / "vdf.csv"
    code = main(["calibrate", "--scenario", str(doc), "--demands", "0,300,600,900,1200,1500,1800,2400",
                 "--seeds", "0", "--out", str(out)])
    assert code == EXIT_OK, capsys.readouterr().err
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["density", "flow", "demand", "seed", "steady_flag"]
    assert len(rows) == 9
    summary = json.loads(out.with_suffix(".fit.json").read_text())
    assert summary["family"] in ("Greenshields", "Underwood", "Drake")
    assert out.with_suffix(".png").exists()


def test_poc_merge_outputs(tmp_path, capsys):
    doc = tmp_path / "m.json"
    doc.write_text(json.dumps(merge_2to1(duration=300.0)), encoding="utf-8")
    out = tmp_path / "poc.csv"
    assert main(["poc-merge", "--scenario", str(doc), "--controller", "none,backpressure",
                 "--seeds", "0,1", "--rho-star", "0.15", "--out", str(out)]) == EXIT_OK
    rows = list(csv.DictReader(out.open()))
    assert [(r["controller"], r["seed"]) for r in rows] == [
        ("none", "0"), ("none", "1"), ("backpressure", "0"), ("backpressure", "1")]
    assert out.with_suffix(".png").exists()
    assert RunManifest.path_for(out).exists()


def test_scenario_dump_round_trips(tmp_path, capsys):
    out = tmp_path / "s.json"
    assert main(["scenario", "merge_2to1", "--out", str(out)]) == EXIT_OK
    assert json.loads(out.read_text()) == merge_2to1()

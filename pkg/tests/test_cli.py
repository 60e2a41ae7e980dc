import json
import subprocess
import sys

import pytest

from voicehome.cli import main
from voicehome.pipeline import DISCARDED_SID, DISCARDED_VAD, FAILED, SCORED, read_decisions
from voicehome.records import read_jsonl
from voicehome.samples import read_labels


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def last_json(out):
    return json.loads(out.strip().splitlines()[-1])


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "corpus", "--out", str(root / "clean"), "--windows", "16",
                 "--mix", "all", "--seed", "3"]) == 0
    assert main(["synth", "noise", "--out", str(root / "noise"), "--seed", "4",
                 "--seconds", "8"]) == 0
    assert main(["enroll", "--labels", str(root / "clean"), "--out", str(root / "profiles.jsonl"),
                 "--per-identity", "2"]) == 0
    return root


def test_build_protocol_twice_identical(workspace, capsys):
    a, b = workspace / "pa", workspace / "pb"
    for out in (a, b):
        code, stdout, _ = run(capsys, "build-protocol", "--clean", str(workspace / "clean"),
                              "--noise-catalog", str(workspace / "noise" / "index.jsonl"),
                              "--out", str(out), "--seed", "7")
        assert code == 0
    assert (a / "manifest.jsonl").read_bytes() == (b / "manifest.jsonl").read_bytes()
    summary = last_json(stdout)
    assert summary["samples"] == 64 and set(summary["per_condition"].values()) == {16}
    assert summary["seed"] == 7


def test_evaluate_vad_perfect(workspace, capsys, tmp_path):
    manifest = workspace / "clean" / "labels.jsonl"
    preds = tmp_path / "p.jsonl"
    preds.write_text("".join(json.dumps({"sample_id": s.sample_id, "prediction": s.is_speech}) + "\n"
                             for s in read_labels(manifest)))
    report = tmp_path / "r.json"
    code, out, _ = run(capsys, "evaluate", "vad", "--manifest", str(manifest), "--predictions",
                       str(preds), "--report", str(report), "--format", "csv")
    assert code == 0
    rows = [l.split(",") for l in out.splitlines() if not l.startswith("#")][1:]
    assert rows and all(r[4] == "1.000000" for r in rows)
    rec = json.loads(report.read_text())
    assert rec["metadata"]["seed"] == 0 and "manifest_hash" in rec["metadata"]
    code, out2, _ = run(capsys, "report", str(report), "--format", "csv")
    assert code == 0 and out2 == out


def test_run_summary_matches_recount(workspace, capsys, tmp_path):
    assert main(["synth", "corpus", "--out", str(tmp_path / "c100"), "--windows", "100",
                 "--mix", "all", "--seed", "9"]) == 0
    capsys.readouterr()
    decisions = tmp_path / "d.jsonl"
    code, out, _ = run(capsys, "run", "--source", str(tmp_path / "c100"), "--profiles",
                       str(workspace / "profiles.jsonl"), "--decisions", str(decisions),
                       "--jobs", "2", "--start-time", "1000")
    assert code == 0
    summary = last_json(out)
    log = read_decisions(decisions)
    labels = read_labels(tmp_path / "c100" / "labels.jsonl")
    assert summary["windows_in"] == len(labels) == len(log) == 100
    assert [d.window_id for d in log] == [s.sample_id for s in labels]
    assert [d.timestamp for d in log[:3]] == [1000.0, 1005.0, 1010.0]
    counts = {k: sum(d.stage_reached == k for d in log)
              for k in (DISCARDED_VAD, DISCARDED_SID, SCORED, FAILED)}
    assert summary["discarded_vad"] == counts[DISCARDED_VAD]
    assert summary["discarded_sid"] == counts[DISCARDED_SID]
    assert summary["scored"] == counts[SCORED] and summary["failed"] == counts[FAILED] == 0

    code, out, _ = run(capsys, "evaluate", "emotion", "--manifest", str(tmp_path / "c100"),
                       "--predictions", str(decisions), "--seed", "5")
    assert code == 0 and "emotion" in out


def test_run_is_reproducible(workspace, capsys, tmp_path):
    outs = []
    for name in ("a.jsonl", "b.jsonl"):
        code, _, _ = run(capsys, "run", "--source", str(workspace / "clean"), "--profiles",
                         str(workspace / "profiles.jsonl"), "--decisions", str(tmp_path / name),
                         "--jobs", "3")
        assert code == 0
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]


def test_usage_errors_exit_2(capsys):
    code, _, err = run(capsys, "run", "--bogus")
    assert code == 2 and err.startswith("error[USAGE]: ") and err.count("\n") == 1
    code, _, err = run(capsys)
    assert code == 2
    code, _, err = run(capsys, "evaluate", "speech", "--manifest", "m", "--predictions", "p")
    assert code == 2


def test_command_errors_exit_1(capsys, tmp_path):
    code, _, err = run(capsys, "evaluate", "vad", "--manifest", str(tmp_path / "nope.jsonl"),
                       "--predictions", str(tmp_path / "p.jsonl"))
    assert code == 1 and err.startswith("error[IO]: ") and err.count("\n") == 1
    bad = tmp_path / "cat.txt"
    bad.write_text("[breathing]\n- a\n")
    code, _, err = run(capsys, "catalog", "validate", str(bad))
    assert code == 1 and err.startswith("error[CATALOG]: ")


def test_catalog_commands(capsys, tmp_path):
    from voicehome.ema import DEFAULT_CATALOG
    cat = tmp_path / "cat.txt"
    cat.write_text(DEFAULT_CATALOG + "[participant:p1]\n- Walk the dog.\n")
    code, out, _ = run(capsys, "catalog", "validate", str(cat))
    assert code == 0 and last_json(out)["participants"] == ["p1"]
    new = tmp_path / "new.txt"
    new.write_text(cat.read_text().replace("Make a cup of tea.", "Make cocoa."))
    code, out, _ = run(capsys, "catalog", "reload", str(cat), "--new", str(new))
    assert code == 0 and last_json(out)["version"] == 2
    new.write_text("[breathing]\n")
    code, out, _ = run(capsys, "catalog", "reload", str(cat), "--new", str(new))
    assert code == 1 and last_json(out)["version"] == 1
    code, out, _ = run(capsys, "catalog", "select", str(cat), "--participant", "p1", "--count", "8",
                       "--respond", "0.5", "--seed", "2")
    events = [json.loads(l) for l in out.splitlines()]
    assert [e["category"] for e in events[:4]] == ["breathing", "timeout", "mindfulness",
                                                   "enjoyable_activities"]
    assert events[3]["text"] == "Walk the dog."
    assert all((e["feedback"] is None) in (True, False) for e in events)
    code, out2, _ = run(capsys, "catalog", "select", str(cat), "--participant", "p1", "--count", "8",
                        "--respond", "0.5", "--seed", "2")
    assert out2 == out


def test_simulate_home_and_audit(workspace, capsys, tmp_path):
    settings = tmp_path / "privacy.conf"
    settings.write_text("day_start = 08:00\nday_end = 20:00\nretention_mode = raw_clips\n")
    store = tmp_path / "store"
    code, out, _ = run(capsys, "simulate-home", "--source", str(workspace / "clean"), "--profiles",
                       str(workspace / "profiles.jsonl"), "--settings", str(settings), "--store",
                       str(store), "--gate-off", "4:8", "--start", "2024-05-01T10:00:00+00:00")
    assert code == 0
    s = last_json(out)
    assert s["heard"] == 12 and s["audit"]["gated_off"] == 1 and s["audit"]["settings_changed"] == 2
    code, out, _ = run(capsys, "audit", "--store", str(store), "--out", str(tmp_path / "bundle"))
    assert code == 0 and not last_json(out)["transcripts_present"]
    (store / "words.txt").write_text("hello")
    code, _, _ = run(capsys, "audit", "--store", str(store), "--out", str(tmp_path / "bundle2"))
    assert code == 1


def test_supervise_virtual_ticks(capsys, tmp_path):
    cfg = tmp_path / "sup.ini"
    log = tmp_path / "events.jsonl"
    cfg.write_text("[component:flaky]\ncommand = true\nperiod = 1\nmax_restarts = 2\n"
                   "[component:steady]\ncommand = sleep 60\n")
    code, out, _ = run(capsys, "supervise", "--config", str(cfg), "--log", str(log), "--ticks", "6")
    assert code == 0
    s = last_json(out)
    assert s["states"] == {"flaky": "parked", "steady": "alive"}
    kinds = [r["kind"] for r in read_jsonl(log)]
    assert kinds.count("restarted") == 2 and kinds[-1] == "restart_exhausted"


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "voicehome", "--version"], capture_output=True,
                       text=True)
    assert r.returncode == 0 and r.stdout.startswith("voicehome ")

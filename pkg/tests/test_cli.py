"""Command-line surface: artifacts, manifests, exit codes, determinism."""

import json
import subprocess
import sys

import pytest

from querytrack.cli import main
from querytrack.motio import parse_mot
from querytrack.trackbook import load_book


def read_all(path):
    return {f.name: f.read_bytes() for f in sorted(path.iterdir())}


# -- exit codes ---------------------------------------------------------------------


def test_missing_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as err:
        main([])
    assert err.value.code == 2


def test_bad_axis_is_usage_error():
    with pytest.raises(SystemExit) as err:
        main(["ablate", "--axis", "bogus"])
    assert err.value.code == 2


def test_unknown_scene_is_runtime_diagnostic(capsys):
    assert main(["track", "--scene", "nosuch"]) == 1
    assert "error: unknown scene 'nosuch'" in capsys.readouterr().err


def test_malformed_prediction_file_is_runtime_diagnostic(tmp_path, capsys):
    gt = tmp_path / "gt.txt"
    gt.write_text("1,1,10,10,5,5,1,1,1\n")
    bad = tmp_path / "pred.txt"
    bad.write_text("definitely,not,numbers\n")
    assert main(["eval", "--gt", str(gt), "--pred", str(bad)]) == 1
    assert "error:" in capsys.readouterr().err


# -- synth --------------------------------------------------------------------------


def test_synth_writes_parseable_artifacts(tmp_path, capsys):
    out = tmp_path / "synth"
    assert main(["synth", "--scene", "crossing",
                 "--out-dir", str(out)]) == 0
    assert "60 boxes" in capsys.readouterr().out
    gt = parse_mot(out / "gt.txt", gt=True)
    assert gt.n_frames == 30
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["extras"]["boxes"] == 60
    assert len(manifest["config_sha256"]) == 64


def test_synth_accepts_script_file(tmp_path):
    script = tmp_path / "tiny.txt"
    script.write_text("scene 100 100 3\nobject 7 1 3 10 10\n"
                      "waypoint 7 1 50 50\n")
    out = tmp_path / "out"
    assert main(["synth", "--script", str(script),
                 "--out-dir", str(out)]) == 0
    gt = parse_mot(out / "gt.txt", gt=True)
    assert {l.track_id for l in gt.lines} == {7}


def test_synth_rerun_is_byte_identical(tmp_path):
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        assert main(["synth", "--scene", "parade", "--seed", "3",
                     "--out-dir", str(d)]) == 0
    assert read_all(dirs[0]) == read_all(dirs[1])


# -- track / eval -------------------------------------------------------------------


def test_track_oracle_roundtrip_with_eval(tmp_path, capsys):
    out = tmp_path / "track"
    assert main(["track", "--scene", "crossing",
                 "--out-dir", str(out)]) == 0
    assert "MOTA 1.000000" in capsys.readouterr().out
    assert main(["eval", "--gt", str(out / "gt.txt"),
                 "--pred", str(out / "pred.txt")]) == 0
    text = capsys.readouterr().out
    assert "MOTA 1.000000" in text
    assert "IDF1 1.000000" in text
    assert (out / "report.txt").read_text().splitlines()[0] == \
        "tracking metrics"


def test_track_rerun_is_byte_identical(tmp_path):
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        assert main(["track", "--scene", "crossing", "--noise", "standard",
                     "--seed", "5", "--out-dir", str(d)]) == 0
    assert read_all(dirs[0]) == read_all(dirs[1])


def test_track_rejects_unknown_noise_preset(capsys):
    assert main(["track", "--scene", "crossing", "--noise", "fog"]) == 1
    assert "unknown noise preset" in capsys.readouterr().err


# -- tune-prompts / train -----------------------------------------------------------


def test_tune_prompts_saves_tuned_book(tmp_path, capsys):
    out = tmp_path / "tune"
    assert main(["tune-prompts", "--identities", "4", "--samples", "4",
                 "--steps", "80", "--out-dir", str(out)]) == 0
    assert "retrieval t2i 1.000" in capsys.readouterr().out
    book = load_book(out / "book.json")
    assert book.identities() == [1, 2, 3, 4]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["extras"]["retrieval_t2i"] == 1.0


def test_train_emits_artifacts_and_summary(tmp_path, capsys):
    out = tmp_path / "train"
    assert main(["train", "--scenes", "parade", "--out-dir", str(out)]) == 0
    assert "positive detect labels" in capsys.readouterr().out
    for name in ("book.json", "dem.json", "trace.txt", "manifest.json"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["extras"]["iterations"] == 4
    assert manifest["extras"]["positives"] > 0
    assert "scene:parade" in manifest["inputs"]


# -- gradcheck / ablate -------------------------------------------------------------


def test_gradcheck_small_passes(tmp_path, capsys):
    out = tmp_path / "gc"
    assert main(["gradcheck", "--points", "2", "--out-dir", str(out)]) == 0
    assert "all probes pass" in capsys.readouterr().out
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["extras"]["passed"] is True
    assert manifest["extras"]["worst_rel_err"] < 1e-4


def test_ablate_m_axis_emits_comparative_report(tmp_path, capsys):
    out = tmp_path / "abm"
    assert main(["ablate", "--axis", "m", "--steps", "40",
                 "--out-dir", str(out)]) == 0
    text = capsys.readouterr().out
    lines = text.splitlines()
    assert lines[0] == "axis: m"
    assert [l.split()[0] for l in lines[2:]] == ["2", "4", "6", "8"]
    assert (out / "ablate.txt").read_text() == text
    manifest = json.loads((out / "manifest.json").read_text())
    assert sorted(manifest["extras"]["rows"]) == ["2", "4", "6", "8"]


def test_module_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "querytrack.cli", "synth", "--scene",
         "crossing"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "60 boxes" in proc.stdout

"""End-to-end subcommand behavior: exit codes, files, and determinism."""

import json
from fractions import Fraction

import pytest

from aligncal.cli import main
from aligncal.constructions import ConstructionSpec, build_small_example
from aligncal.core import Utility
from aligncal.data import synthesize_log, write_records
from aligncal.multical import DiscretizedConfidenceFunction


def small_3x3():
    return build_small_example(
        ConstructionSpec("small_3x3", Fraction(1, 5), Fraction(4, 5), Utility(1, 0, 1, 0))
    )


@pytest.fixture(scope="module")
def log_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("logs") / "log.csv"
    write_records(path, synthesize_log(small_3x3(), 6000, seed=9, task="synthetic"))
    return path


def _load(path):
    return json.loads(path.read_text())


def _snapshot(dirpath):
    return {p.name: p.read_bytes() for p in sorted(dirpath.iterdir())}


# ---------------------------------------------------------------------------
# construct


def test_construct_small_example(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(
        ["construct", "small3x3", "--p-minus", "0.2", "--p-plus", "0.8",
         "--utility", "1,0,1,0", "--out", str(out)]
    )
    assert code == 0
    doc = _load(out / "process.json")
    assert doc["b_values"] == [0.4, 0.5, 0.8]
    assert doc["h_values"] == [0.25, 0.5, 0.75]
    manifest = _load(out / "manifest.json")
    assert manifest["config"]["subcommand"] == "construct"
    assert manifest["config"]["p_minus"] == "1/5"
    assert set(manifest["versions"]) == {"aligncal", "numpy", "python"}
    assert "0.4 0.5 0.8" in capsys.readouterr().out


def test_construct_grid(tmp_path):
    out = tmp_path / "run"
    assert main(["construct", "grid", "--k", "2", "--m", "3", "--out", str(out)]) == 0
    assert _load(out / "process.json")["b_values"] == [0.2, 0.4, 0.6]


def test_construct_grid_rejects_square(tmp_path, capsys):
    code = main(["construct", "grid", "--k", "3", "--m", "3",
                 "--out", str(tmp_path / "run")])
    assert code == 2
    assert "m > k" in capsys.readouterr().err


def test_bad_flags_exit_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["construct", "smallish"])
    assert exc.value.code == 2
    code = main(["audit", str(tmp_path / "nope.json"),
                 "--check", "alignment", "--alpha", "2"])
    assert code == 2  # alpha range checked before reading anything


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "aligncal" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# audit


@pytest.fixture()
def process_json(tmp_path):
    out = tmp_path / "proc"
    assert main(["construct", "small3x3", "--out", str(out)]) == 0
    return out / "process.json"


def test_audit_alignment_failure_names_witness(process_json, tmp_path, capsys):
    out = tmp_path / "audit"
    code = main(["audit", str(process_json), "--check", "alignment",
                 "--alpha", "0.5", "--out", str(out)])
    assert code == 1
    doc = _load(out / "audit.json")
    assert doc["passed"] is False
    gaps = sorted({w["gap"] for w in doc["reports"][0]["witnesses"]})
    assert gaps == [pytest.approx(0.6)]  # rates pass through JSON as floats
    assert "FAIL" in capsys.readouterr().out


def test_audit_calibration_passes_at_zero(process_json, tmp_path):
    out = tmp_path / "audit"
    code = main(["audit", str(process_json), "--check", "calibration",
                 "--alpha", "0", "--out", str(out)])
    assert code == 0
    assert _load(out / "audit.json")["passed"] is True


def test_audit_both_checks_vacuous_at_one(process_json, tmp_path):
    out = tmp_path / "audit"
    code = main(["audit", str(process_json), "--check", "aligned-calibration",
                 "--alpha", "1", "--out", str(out)])
    assert code == 0
    doc = _load(out / "audit.json")
    assert [r["check"] for r in doc["reports"]] == ["calibration", "alignment"]


def test_audit_csv_log(log_csv, tmp_path):
    out = tmp_path / "audit"
    code = main(["audit", str(log_csv), "--check", "calibration",
                 "--alpha", "0.2", "--task", "synthetic", "--out", str(out)])
    assert code == 0


def test_audit_multi_task_log_needs_task_flag(tmp_path, capsys):
    proc = small_3x3()
    recs = synthesize_log(proc, 200, seed=1, task="a") + synthesize_log(
        proc, 200, seed=2, task="b"
    )
    path = tmp_path / "two.csv"
    write_records(path, recs)
    code = main(["audit", str(path), "--check", "calibration", "--alpha", "0.5",
                 "--out", str(tmp_path / "o")])
    assert code == 2
    assert "--task" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# calibrate


def test_calibrate_umd_reduces_misalignment(log_csv, tmp_path):
    out = tmp_path / "cal"
    code = main(["calibrate", str(log_csv), "--method", "umd", "--bins", "4",
                 "--out", str(out)])
    assert code == 0
    rep = _load(out / "calibration_report.json")
    assert rep["method"] == "umd" and rep["n"] == 6000
    assert rep["after"]["eae"] <= rep["before"]["eae"]
    assert rep["after"]["mae"] <= rep["before"]["mae"]
    func = DiscretizedConfidenceFunction.from_json_dict(_load(out / "function.json"))
    assert func.h_levels == (0.25, 0.5, 0.75)


def test_calibrate_iterative_runs(log_csv, tmp_path):
    out = tmp_path / "cal"
    code = main(["calibrate", str(log_csv), "--method", "iterative",
                 "--alpha", "0.5", "--lambda", "0.5", "--out", str(out)])
    assert code == 0
    doc = _load(out / "function.json")
    assert len(doc["h_levels"]) == 3


def test_calibrate_tiny_log_names_sample_floor(tmp_path, capsys):
    path = tmp_path / "tiny.csv"
    write_records(path, synthesize_log(small_3x3(), 30, seed=5))
    code = main(["calibrate", str(path), "--method", "iterative",
                 "--alpha", "0.05", "--lambda", "0.05",
                 "--out", str(tmp_path / "o")])
    assert code == 2
    err = capsys.readouterr().err
    assert "needs at least" in err and "113482" in err


def test_calibrate_flag_dependencies(log_csv, tmp_path, capsys):
    assert main(["calibrate", str(log_csv), "--method", "umd",
                 "--out", str(tmp_path / "a")]) == 2
    assert "--bins" in capsys.readouterr().err
    assert main(["calibrate", str(log_csv), "--method", "iterative",
                 "--alpha", "0.3", "--out", str(tmp_path / "b")]) == 2


# ---------------------------------------------------------------------------
# repro


def test_repro_outputs_and_byte_identical_rerun(log_csv, tmp_path):
    out = tmp_path / "rep"
    argv = ["repro", str(log_csv), "--out", str(out), "--boot", "60"]
    assert main(argv) == 0
    first = _snapshot(out)
    expected = {
        "manifest.json", "report.json", "table.txt", "cells_synthetic.csv",
        "shifts_synthetic.csv", "roc_synthetic_b.csv", "roc_synthetic_h.csv",
        "roc_synthetic_h_ai.csv",
    }
    assert set(first) == expected
    row = _load(out / "report.json")["tasks"]["synthetic"]
    assert set(row) == {"n", "eae", "mae", "ece", "mce", "auc"}
    assert row["n"] == 6000
    assert set(row["auc"]) == {"b", "h", "h_ai"}
    assert all(0.5 < v <= 1 for v in row["auc"].values())
    assert main(argv) == 0
    assert _snapshot(out) == first


def test_repro_empty_log_is_input_error(tmp_path, capsys):
    path = tmp_path / "empty.csv"
    path.write_text("task,participant,instance,y,b_hat,h_hat,h_ai_hat\n")
    assert main(["repro", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "no usable records" in capsys.readouterr().err


def test_repro_missing_task_partial_report(log_csv, tmp_path, capsys):
    out = tmp_path / "rep"
    code = main(["repro", str(log_csv), "--tasks", "synthetic", "ghost",
                 "--out", str(out), "--boot", "40"])
    assert code == 0
    assert "ghost" in capsys.readouterr().err
    doc = _load(out / "report.json")
    assert doc["missing_tasks"] == ["ghost"]
    assert list(doc["tasks"]) == ["synthetic"]


def test_repro_seed_feeds_bootstrap_substream(log_csv, tmp_path):
    outs = []
    for seed in ("1", "1", "2"):
        out = tmp_path / f"rep{len(outs)}"
        assert main(["repro", str(log_csv), "--out", str(out), "--boot", "50",
                     "--seed", seed]) == 0
        outs.append((out / "shifts_synthetic.csv").read_bytes())
    assert outs[0] == outs[1]
    assert outs[0] != outs[2]


def test_output_dir_env_override(log_csv, tmp_path, monkeypatch, capsys):
    target = tmp_path / "from-env"
    monkeypatch.setenv("ALIGNCAL_OUT", str(target))
    monkeypatch.chdir(tmp_path)
    assert main(["construct", "small3x3"]) == 0
    assert (target / "process.json").exists()

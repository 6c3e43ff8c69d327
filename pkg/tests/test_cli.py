"""Tests for the scenario-file front end: validation, runs, and output files."""

import csv
import json

import pytest

from quadpend.cli import (CSV_BASE_COLUMNS, CSV_FLAG_COLUMNS, EXIT_ABORT,
                          EXIT_OK, EXIT_VALIDATION, main, shipped_scenarios)

HOVER = """\
name: hover-test
controller: fbl-regulator
duration: 0.05
dt: 0.001
trajectory:
  kind: set-point
  setpoint: [0.0, 0.0, -2.0]
initial:
  position: [0.0, 0.0, -2.0]
"""

PEND = """\
name: pend-test
controller: pend-xi
duration: 0.05
dt: 0.001
pendulum:
  half_length: 0.5
trajectory:
  kind: set-point
  setpoint: [0.0, 0.0, -2.0]
initial:
  position: [0.0, 0.0, -2.0]
  pendulum: [0.02, 0.0, 0.0, 0.0]
"""


def write(tmp_path, text, name="case.scn"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


class TestValidate:
    def test_shipped_scenarios_all_validate(self, capsys):
        names = shipped_scenarios()
        assert len(names) == 8
        for name in names:
            assert main(["validate", name]) == EXIT_OK
        out = capsys.readouterr().out
        assert "ok" in out

    def test_unknown_key_reports_name_and_line(self, tmp_path, capsys):
        text = HOVER + "thrust_limit: 3.0\n"
        rc = main(["validate", write(tmp_path, text)])
        err = capsys.readouterr().err
        assert rc == EXIT_VALIDATION
        assert "thrust_limit" in err
        assert f"line {text.splitlines().index('thrust_limit: 3.0') + 1}" in err

    def test_unknown_nested_key(self, tmp_path, capsys):
        text = HOVER.replace("  kind: set-point", "  kind: set-point\n  speed: 2.0")
        rc = main(["validate", write(tmp_path, text)])
        err = capsys.readouterr().err
        assert rc == EXIT_VALIDATION
        assert "trajectory.speed" in err

    def test_bad_value_rejected(self, tmp_path, capsys):
        rc = main(["validate", write(tmp_path, HOVER.replace(
            "kind: set-point", "kind: zigzag"))])
        assert rc == EXIT_VALIDATION
        assert "zigzag" in capsys.readouterr().err

    def test_missing_file(self, capsys):
        assert main(["validate", "no-such.scn"]) == EXIT_VALIDATION

    def test_bad_override_key(self, tmp_path, capsys):
        rc = main(["validate", write(tmp_path, HOVER),
                   "--set", "gains.mu=1.0"])
        assert rc == EXIT_VALIDATION
        assert "gains.mu" in capsys.readouterr().err


class TestRun:
    def test_run_writes_csv_and_metrics(self, tmp_path, capsys):
        rc = main(["run", write(tmp_path, HOVER), "--out", str(tmp_path / "o")])
        assert rc == EXIT_OK
        series = tmp_path / "o" / "hover-test.csv"
        metrics = tmp_path / "o" / "hover-test.metrics.json"
        assert series.exists() and metrics.exists()
        with open(series) as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = list(reader)
        assert header == CSV_BASE_COLUMNS + CSV_FLAG_COLUMNS
        assert len(rows) == 51
        # No pendulum: the four pendulum state columns hold the empty-string
        # sentinel.
        i_a = header.index("a")
        assert all(r[i_a] == "" for r in rows)
        m = json.loads(metrics.read_text())
        assert m["aborted"] is False
        assert m["rms_err_z"] == pytest.approx(0.0, abs=1e-12)

    def test_floats_round_trip(self, tmp_path):
        main(["run", write(tmp_path, HOVER), "--out", str(tmp_path / "o")])
        with open(tmp_path / "o" / "hover-test.csv") as fh:
            reader = csv.DictReader(fh)
            row = next(reader)
        # repr() emission: parsing back gives the exact binary double.
        assert float(row["p_Z"]) == -2.0
        assert float(row["f_z"]) == pytest.approx(9.81, abs=1e-12)

    def test_pendulum_columns_present(self, tmp_path):
        main(["run", write(tmp_path, PEND), "--out", str(tmp_path / "o")])
        with open(tmp_path / "o" / "pend-test.csv") as fh:
            header = next(csv.reader(fh))
        assert "a_d" in header and "b_d" in header
        assert header.index("a_d") == len(CSV_BASE_COLUMNS)

    def test_json_format(self, tmp_path):
        main(["run", write(tmp_path, HOVER), "--out", str(tmp_path / "o"),
              "--format", "json"])
        payload = json.loads((tmp_path / "o" / "hover-test.json").read_text())
        assert payload["scenario"] == "hover-test"
        assert len(payload["t"]) == 51
        assert payload["pend"] is None

    def test_abort_exit_code_and_partial_log(self, tmp_path, capsys):
        text = PEND.replace("pendulum: [0.02, 0.0, 0.0, 0.0]",
                            "pendulum: [0.45, 0.0, 3.0, 0.0]").replace(
            "duration: 0.05", "duration: 1.0")
        rc = main(["run", write(tmp_path, text), "--out", str(tmp_path / "o")])
        assert rc == EXIT_ABORT
        assert "abort" in capsys.readouterr().err
        m = json.loads((tmp_path / "o" / "pend-test.metrics.json").read_text())
        assert m["aborted"] is True
        assert "abort_reason" in m
        with open(tmp_path / "o" / "pend-test.csv") as fh:
            rows = list(csv.reader(fh))
        assert 1 < len(rows) < 1002

    def test_set_override_applies(self, tmp_path):
        main(["run", write(tmp_path, HOVER), "--out", str(tmp_path / "a")])
        main(["run", write(tmp_path, HOVER), "--out", str(tmp_path / "b"),
              "--set", "initial.position=[0.0, 0.0, -1.9]"])
        row_a = next(csv.DictReader(open(tmp_path / "a" / "hover-test.csv")))
        row_b = next(csv.DictReader(open(tmp_path / "b" / "hover-test.csv")))
        assert float(row_a["p_Z"]) == -2.0
        assert float(row_b["p_Z"]) == -1.9

    def test_rerun_same_seed_byte_identical(self, tmp_path):
        noisy = HOVER + "noise:\n  enabled: true\n"
        path = write(tmp_path, noisy)
        main(["run", path, "--out", str(tmp_path / "a"), "--seed", "3"])
        main(["run", path, "--out", str(tmp_path / "b"), "--seed", "3"])
        a = (tmp_path / "a" / "hover-test.csv").read_bytes()
        b = (tmp_path / "b" / "hover-test.csv").read_bytes()
        assert a == b
        ma = (tmp_path / "a" / "hover-test.metrics.json").read_bytes()
        mb = (tmp_path / "b" / "hover-test.metrics.json").read_bytes()
        assert ma == mb

    def test_different_seed_differs(self, tmp_path):
        noisy = HOVER + "noise:\n  enabled: true\n"
        path = write(tmp_path, noisy)
        main(["run", path, "--out", str(tmp_path / "a"), "--seed", "3"])
        main(["run", path, "--out", str(tmp_path / "b"), "--seed", "4"])
        assert ((tmp_path / "a" / "hover-test.csv").read_bytes()
                != (tmp_path / "b" / "hover-test.csv").read_bytes())


class TestBatch:
    BATCH = HOVER + """\
batch:
  - name: low
    set:
      initial.position: [0.0, 0.0, -1.5]
  - name: high
    set:
      initial.position: [0.0, 0.0, -2.5]
"""

    def test_batch_expansion(self, tmp_path, capsys):
        rc = main(["run", write(tmp_path, self.BATCH),
                   "--out", str(tmp_path / "o")])
        assert rc == EXIT_OK
        assert (tmp_path / "o" / "hover-test-low.csv").exists()
        assert (tmp_path / "o" / "hover-test-high.csv").exists()

    def test_batch_parallel_matches_serial(self, tmp_path):
        main(["run", write(tmp_path, self.BATCH), "--out", str(tmp_path / "s")])
        main(["run", write(tmp_path, self.BATCH), "--out", str(tmp_path / "p"),
              "--jobs", "2"])
        for name in ("hover-test-low.csv", "hover-test-high.csv"):
            assert ((tmp_path / "s" / name).read_bytes()
                    == (tmp_path / "p" / name).read_bytes())

    def test_malformed_batch_rejected(self, tmp_path, capsys):
        rc = main(["validate", write(tmp_path, HOVER + "batch:\n  - 3\n")])
        assert rc == EXIT_VALIDATION


class TestListScenarios:
    def test_lists_all_shipped(self, capsys):
        assert main(["list-scenarios"]) == EXIT_OK
        out = capsys.readouterr().out.split()
        assert len(out) == 8
        assert "fig6-pend-balance.scn" in out

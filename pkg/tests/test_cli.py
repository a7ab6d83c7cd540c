import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from bdfoa import cli


def _run(argv, capsys):
    code, doc = cli.run(argv)
    out = capsys.readouterr()
    return code, doc, out


def test_certify_modified_mirrlees(capsys):
    code, doc, out = _run(["certify", "--builtin", "modified-mirrlees", "--json"], capsys)
    assert code == cli.EXIT_OK
    body = json.loads(out.out)
    nu = body["reports"]["certificate"]["nu"][0]
    assert abs(nu - 23.1) <= 0.05


def test_certify_mirrlees_is_negative_not_error(capsys):
    code, doc, out = _run(["certify", "--builtin", "mirrlees", "--point", "1", "0.957"], capsys)
    assert code == cli.EXIT_NEGATIVE
    assert "no critical direction" in out.out


def test_usage_and_input_errors(capsys, tmp_path):
    assert _run(["frobnicate"], capsys)[0] == cli.EXIT_ERROR
    assert _run(["certify", "--builtin", "nope"], capsys)[0] == cli.EXIT_ERROR
    # no problem source means the mirrlees example
    assert _run(["certify"], capsys)[0] == cli.EXIT_NEGATIVE
    bad = tmp_path / "bad.json"
    bad.write_text('{"name": "b", "n": 1, "m": 1, "F": "x1", "f": "y1 +"}')
    assert _run(["certify", "--problem", str(bad)], capsys)[0] == cli.EXIT_ERROR
    assert _run(["certify", "--problem", str(tmp_path / "missing.json")], capsys)[0] == cli.EXIT_ERROR
    assert _run(["solve-lower", "--builtin", "toy-convex", "--x", "1", "--grid", "1"], capsys)[0] == cli.EXIT_ERROR


def test_figure1_csv(capsys, tmp_path):
    code, doc, _ = _run(["reproduce", "figure1", "--out", str(tmp_path)], capsys)
    assert code == cli.EXIT_OK
    assert abs(doc.summary["jump_x"] - 1.0) <= 1e-3
    with open(tmp_path / "figure1_sfo.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["y", "x"]
    y, x = np.array(rows[1:], dtype=float).T
    np.testing.assert_allclose(x, (1 - y) * np.exp(4 * y) / (1 + y), rtol=1e-10)
    assert y.min() >= -2 and y.max() <= 2
    with open(tmp_path / "figure1_solution.csv") as fh:
        assert next(csv.reader(fh)) == ["x", "y"]


def test_reproduce_example_xy1_reports_inf_compactness(capsys, tmp_path):
    code, doc, _ = _run(["reproduce", "example-xy-1", "--out", str(tmp_path)], capsys)
    assert code == cli.EXIT_OK
    rep = cli.load_report(tmp_path / "example-xy-1_report.json")
    assert rep["summary"]["inf_compact_at_0"] is False


def test_emit_deterministic_and_reloads(capsys, tmp_path):
    argv = ["certify", "--builtin", "modified-mirrlees", "--out"]
    _run(argv + [str(tmp_path / "a.json")], capsys)
    _run(argv + [str(tmp_path / "b.json")], capsys)
    a, b = (tmp_path / "a.json").read_bytes(), (tmp_path / "b.json").read_bytes()
    assert a == b
    doc = cli.load_report(tmp_path / "a.json")
    again = tmp_path / "c.json"
    cli.emit(doc, "json", again)
    assert cli.load_report(again) == doc


def test_float_format_is_twelve_digits():
    assert cli.dumps({"v": 1 / 3}) == cli.dumps({"v": 0.333333333333})
    assert json.loads(cli.dumps({"v": float("inf")}))["v"] == "inf"


def test_solve_lower_csv(capsys, tmp_path):
    out = tmp_path / "s.csv"
    code, _, _ = _run(["solve-lower", "--builtin", "mirrlees", "--x", "1", "--out", str(out)], capsys)
    assert code == cli.EXIT_OK
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["x1", "y1", "V"]
    ys = sorted(float(r[1]) for r in rows[1:])
    assert len(ys) == 2 and ys[0] == pytest.approx(-ys[1], abs=1e-8)


def test_directions_and_localization(capsys):
    code, doc, _ = _run(["directions", "--builtin", "mirrlees", "--json"], capsys)
    assert code == cli.EXIT_OK
    code, _, _ = _run(["check-localization", "--builtin", "toy-convex"], capsys)
    assert code == cli.EXIT_OK


def test_console_script_round_trip(tmp_path):
    res = subprocess.run(
        [sys.executable, "-m", "bdfoa.cli", "value-function", "--builtin", "toy-convex", "--x", "0.5"],
        capture_output=True, text=True, check=False,
    )
    assert res.returncode == 0
    assert json.loads(res.stdout)["summary"]["exit_code"] == 0

import csv
import json

import pytest

from dipopt.cli import build_parser, main
from dipopt.problem import dump_pnlp

from conftest import TWO_BUS, equality_qp


def test_no_command_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_tol_flag_parsed():
    args = build_parser().parse_args(["solve-opf", "--case", "case14", "--tol", "1e-7"])
    assert args.tol == 1e-7 and args.command == "solve-opf"


@pytest.mark.parametrize("argv,msg", [
    (["solve-opf", "--case", "case118", "--copies", "6"], "--copies requires --ties"),
    (["solve-opf", "--case", "case118", "--ties", "default"], "--ties requires --copies"),
    (["solve-opf", "--case", "case118", "--copies", "2", "--ties", "default",
      "--partition", "p.json"], "--partition conflicts"),
])
def test_flag_conflicts(argv, msg, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2 and msg in capsys.readouterr().err


def test_missing_case_file_is_error(capsys):
    assert main(["solve-opf", "--case", "no_such_case.m"]) == 1
    assert "error:" in capsys.readouterr().err


def test_solve_pnlp_equality_qp(tmp_path, capsys):
    path = tmp_path / "qp.json"
    dump_pnlp(equality_qp(), path)
    out = tmp_path / "run.csv"
    assert main(["solve-pnlp", "--problem", str(path), "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert 1 <= len(rows) <= 5
    assert capsys.readouterr().out.startswith("converged")


def test_check_derivatives_case118(capsys):
    assert main(["check-derivatives", "--case", "case118", "--points", "1"]) == 0
    assert capsys.readouterr().out.startswith("pass")


def test_make_interconnected_round_trip(tmp_path, capsys):
    src = tmp_path / "two.m"
    src.write_text(TWO_BUS)
    ties = tmp_path / "ties.json"
    ties.write_text(json.dumps([{"copy_a": 1, "bus_a": 2, "copy_b": 2, "bus_b": 2}]))
    out, assign = tmp_path / "joined.m", tmp_path / "assign.json"
    assert main(["make-interconnected", "--case", str(src), "--copies", "2", "--ties", str(ties),
                 "--out", str(out), "--assignment", str(assign)]) == 0
    assert capsys.readouterr().out.startswith("4 buses, 3 branches")
    # the written case and assignment feed straight back into the solver
    summary = tmp_path / "s.json"
    assert main(["solve-opf", "--case", str(out), "--partition", str(assign),
                 "--summary", str(summary)]) == 0
    assert json.loads(summary.read_text())["status"] == "converged"


def _run_two_copies(tmp_path, tag):
    out, summary = tmp_path / f"{tag}.csv", tmp_path / f"{tag}.json"
    code = main(["solve-opf", "--case", "case118", "--copies", "2", "--ties", "default",
                 "--reference", "--out", str(out), "--summary", str(summary)])
    return code, out.read_bytes(), json.loads(summary.read_text())


def test_solve_opf_reference_and_determinism(tmp_path, capsys):
    code, first, doc = _run_two_copies(tmp_path, "a")
    assert code == 0 and doc["status"] == "converged"
    rows = list(csv.DictReader(first.decode().splitlines()))
    assert float(rows[-1]["objective_error"]) <= 1e-4
    _, second, _ = _run_two_copies(tmp_path, "b")
    assert first == second

import csv
import io
import json
import subprocess
import sys
from pathlib import Path

import pytest

from rmaft.cli import main

FIXTURES = Path(__file__).parent / "fixtures"


def _rows(text):
    return list(csv.reader(io.StringIO(text)))


def test_sim_ten_trials(tmp_path, capsys):
    out = tmp_path / "out.csv"
    code = main(["sim", "--scenario", str(FIXTURES / "gsync.json"), "--trials", "10",
                 "--seed", "100", "--out", str(out)])
    rows = _rows(out.read_text())
    assert code == 0
    assert rows[0] == ["seed", "digest", "fallbacks", "cf", "event_count"]
    assert [r[0] for r in rows[1:]] == [str(100 + i) for i in range(10)]


def test_sim_is_stable_across_thread_counts(tmp_path, monkeypatch):
    outs = []
    for threads in ("1", "4"):
        monkeypatch.setenv("RMAFT_THREADS", threads)
        out = tmp_path / f"{threads}.csv"
        assert main(["sim", "--scenario", str(FIXTURES / "gsync.json"), "--trials", "4",
                     "--out", str(out)]) == 0
        outs.append(out.read_text())
    assert outs[0] == outs[1]


def test_sim_malformed_json(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"n": 2,\n  "workload": }\n')
    assert main(["sim", "--scenario", str(bad)]) == 2
    assert f"{bad}:2:15:" in capsys.readouterr().err


def test_sim_corrupted_log_fails(capsys):
    assert main(["sim", "--scenario", str(FIXTURES / "corrupt_log.json")]) == 1
    assert "invariant violated" in capsys.readouterr().err


def test_sim_usage_errors(tmp_path, capsys):
    assert main(["sim", "--scenario", str(tmp_path / "missing.json")]) == 2
    assert main(["sim", "--scenario", str(FIXTURES / "gsync.json"), "--trials", "0"]) == 2
    assert main([]) == 2
    assert main(["frobnicate"]) == 2


def test_pcf_grid(capsys):
    assert main(["pcf", "--machine", "tsubame2", "--n-procs", "4000",
                 "--ch-fraction", "0.01,0.05"]) == 0
    rows = _rows(capsys.readouterr().out)
    assert rows[0] == ["topo_level", "ch_fraction", "p_cf"]
    assert len(rows) == 11
    assert {r[0] for r in rows[1:]} == {"none", "nodes", "psus", "switches", "racks"}
    five = {r[0]: float(r[2]) for r in rows[1:] if r[1] == "0.05"}
    assert five["none"] / five["nodes"] >= 10


def test_pcf_single_row_and_errors(capsys):
    assert main(["pcf", "--n-procs", "4000", "--ch-fraction", "0.05", "--topo-level", "switch"]) == 0
    rows = _rows(capsys.readouterr().out)
    assert len(rows) == 2 and rows[1][:2] == ["switches", "0.05"]
    assert len(rows[1][2].replace(".", "").lstrip("0").split("e")[0]) <= 9
    assert main(["pcf", "--n-procs", "4000", "--ch-fraction", "0"]) == 2
    assert main(["pcf", "--n-procs", "4000", "--ch-fraction", "0.05", "--topo-level", "moon"]) == 2
    assert main(["pcf", "--machine", "/nonexistent.json", "--n-procs", "4", "--ch-fraction", "0.5"]) == 2


def test_pcf_custom_profile(tmp_path, capsys):
    prof = tmp_path / "m.json"
    prof.write_text(json.dumps({"levels": [{"name": "nodes", "count": 16,
                                            "pdf": {"A": 0.01, "lambda": 1.0}}]}))
    assert main(["pcf", "--machine", str(prof), "--n-procs", "16", "--ch-fraction", "0.25",
                 "--topo-level", "none,1"]) == 0
    rows = _rows(capsys.readouterr().out)
    assert [r[0] for r in rows[1:]] == ["none", "nodes"]


def test_daly(capsys):
    assert main(["daly", "--delta", "1", "--mtbf", "200"]) == 0
    assert capsys.readouterr().out.strip() == "19.3388889"
    assert main(["daly", "--delta", "2", "--mtbf", "1"]) == 0
    assert capsys.readouterr().out.strip() == "1"
    assert main(["daly", "--delta", "0", "--mtbf", "1"]) == 2


def test_placement(capsys):
    assert main(["placement", "--n-procs", "8", "--groups", "2", "--level", "4"]) == 0
    rows = _rows(capsys.readouterr().out)
    assert rows[0] == ["process", "group", "nodes", "psus", "switches", "racks"]
    for g in ("0", "1"):
        racks = [r[5] for r in rows[1:] if r[1] == g]
        assert len(set(racks)) == len(racks)
    assert main(["placement", "--n-procs", "100", "--groups", "1", "--level", "4"]) == 1
    assert main(["placement", "--n-procs", "9", "--groups", "2"]) == 2


@pytest.mark.parametrize("what", ["logs", "trace", "replay"])
def test_dump_logs(what, capsys):
    assert main(["dump-logs", "--scenario", str(FIXTURES / "gsync.json"), "--what", what]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert all(isinstance(json.loads(line), dict) for line in lines)
    if what == "trace":
        assert lines


def test_console_script_entry_point():
    res = subprocess.run([sys.executable, "-m", "rmaft.cli", "daly", "--delta", "1",
                          "--mtbf", "200"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip() == "19.3388889"

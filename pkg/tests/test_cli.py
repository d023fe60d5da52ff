import json
import math
import socket
import subprocess
import sys

import pytest

from conftest import make_cohort, split
from pooledlogit import io
from pooledlogit.cli import main

MODEL = "term = x\nterm = z2\nterm = x*z2\n"


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def cli(*args):
    return subprocess.Popen([sys.executable, "-m", "pooledlogit.cli", *args], stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)


def test_intercept_only_fit(tmp_path, capsys):
    rows = "".join(f"s{i},{int(i < 3)}\n" for i in range(10))
    data = write(tmp_path, "d.csv", "subject_id,outcome\n" + rows)
    model = write(tmp_path, "m.cfg", "baseline = yes\n")
    out = tmp_path / "fit.json"
    assert main(["fit", "--data", data, "--model", model, "--out", str(out)]) == 0
    record = json.loads(out.read_text())
    assert record["fit"]["coefficients"][0] == pytest.approx(math.log(3 / 7), abs=1e-10)
    assert "-0.847298" in capsys.readouterr().out


def test_malformed_row_reports_line(tmp_path, capsys):
    data = write(tmp_path, "d.csv", "subject_id,outcome,x\na,1,0.5\nb,0,oops\n")
    model = write(tmp_path, "m.cfg", "term = x\n")
    assert main(["fit", "--data", data, "--model", model]) == 2
    err = capsys.readouterr().err
    assert "d.csv:3" in err and "ParseError" in err


def test_empty_file_is_a_parse_error(tmp_path, capsys):
    data = write(tmp_path, "d.csv", "")
    model = write(tmp_path, "m.cfg", "term = x\n")
    assert main(["fit", "--data", data, "--model", model]) == 2
    assert "ParseError" in capsys.readouterr().err


def test_missing_file_exits_2(tmp_path):
    assert main(["fit", "--data", str(tmp_path / "none.csv"), "--model", str(tmp_path / "none.cfg")]) == 2


def test_unit_pools_match_standard_fit(tmp_path):
    recs = make_cohort(200, seed=3)
    data = write(tmp_path, "d.csv", io.format_microdata(recs))
    model = write(tmp_path, "m.cfg", MODEL)
    assert main(["fit", "--data", data, "--model", model, "--out", str(tmp_path / "std.json")]) == 0
    assert main(["pool-fit", "--data", data, "--model", model, "--seed", "1", "--pool-size", "1", "--research", "--mode", "real", "--out-dir", str(tmp_path / "p")]) == 0
    std = json.loads((tmp_path / "std.json").read_text())["fit"]["coefficients"]
    pooled = json.loads((tmp_path / "p" / "fit.json").read_text())["fit"]["coefficients"]
    n = sum(r.outcome for r in recs)
    assert pooled[1:] == pytest.approx(std[1:], abs=1e-8)
    assert pooled[0] == pytest.approx(std[0] - math.log(n / (200 - n)), abs=1e-8)


def test_unit_pools_need_research_flag(tmp_path, capsys):
    data = write(tmp_path, "d.csv", io.format_microdata(make_cohort(50, seed=3)))
    model = write(tmp_path, "m.cfg", MODEL)
    assert main(["pool-fit", "--data", data, "--model", model, "--seed", "1", "--pool-size", "1"]) == 2
    assert "PrivacyError" in capsys.readouterr().err


def test_strict_mode_rejects_cubic(tmp_path, capsys):
    data = write(tmp_path, "d.csv", io.format_microdata(make_cohort(120, seed=3)))
    model = write(tmp_path, "m.cfg", "term = x\nterm = x^2\nterm = x^3\n")
    assert main(["pool-fit", "--data", data, "--model", model, "--seed", "1", "--pool-size", "3", "--strict"]) == 2
    assert "StrictModePrivacyViolation" in capsys.readouterr().err
    # without --strict it is only a warning
    assert main(["pool-fit", "--data", data, "--model", model, "--seed", "1", "--pool-size", "3"]) == 0
    assert "warning" in capsys.readouterr().err


def test_pool_counts_option(tmp_path):
    recs = [r for r in make_cohort(600, seed=8)]
    n = sum(r.outcome for r in recs)
    m = len(recs) - n
    data = write(tmp_path, "d.csv", io.format_microdata(recs))
    model = write(tmp_path, "m.cfg", "term = x\n")
    counts = f"3*{n // 3}:3*{m // 3}"
    assert main(["pool-fit", "--data", data, "--model", model, "--seed", "4", "--pool-counts", counts, "--out-dir", str(tmp_path / "o")]) == 0
    plan = io.parse_plan((tmp_path / "o" / "plan.csv").read_text())
    assert plan.sizes == [3]


def test_socket_session_matches_pool_fit(tmp_path):
    recs = make_cohort(240, seed=12)
    parts = split(recs, 2, seed=1)
    files = {nid: write(tmp_path, f"{nid}.csv", io.format_microdata(rs)) for nid, rs in parts.items()}
    combined = write(tmp_path, "all.csv", io.format_microdata([r for rs in parts.values() for r in rs]))
    model = write(tmp_path, "m.cfg", MODEL)
    address = f"127.0.0.1:{free_port()}"
    coord = cli("coordinator", "--session", "t1", "--nodes", ",".join(parts), "--model", model, "--seed", "9", "--pool-size", "3", "--listen", address, "--timeout", "20", "--out-dir", str(tmp_path / "c"))
    nodes = [
        cli("node", "--id", nid, "--session", "t1", "--data", path, "--coordinator", address, "--mask-seed", str(50 + i), "--timeout", "20")
        for i, (nid, path) in enumerate(files.items())
    ]
    outs = [p.communicate(timeout=120) for p in [coord, *nodes]]
    assert [p.returncode for p in [coord, *nodes]] == [0, 0, 0], outs
    assert main(["pool-fit", "--data", combined, "--model", model, "--seed", "9", "--pool-size", "3", "--out-dir", str(tmp_path / "p")]) == 0
    assert (tmp_path / "c" / "pooled.csv").read_bytes() == (tmp_path / "p" / "pooled.csv").read_bytes()
    # the centre only ever sees slot tokens, so compare the pool layout
    central = io.parse_plan((tmp_path / "c" / "plan.csv").read_text())
    local = io.parse_plan((tmp_path / "p" / "plan.csv").read_text())
    assert [(p.pool_id, p.stratum, p.size_g) for p in central.pools] == [(p.pool_id, p.stratum, p.size_g) for p in local.pools]
    assert (tmp_path / "c" / "transcript.jsonl").stat().st_size > 0


def test_absent_node_times_out(tmp_path):
    model = write(tmp_path, "m.cfg", MODEL)
    address = f"127.0.0.1:{free_port()}"
    coord = cli("coordinator", "--session", "t2", "--nodes", "a,b", "--model", model, "--seed", "9", "--pool-size", "3", "--listen", address, "--timeout", "1")
    _, err = coord.communicate(timeout=60)
    assert coord.returncode == 4
    assert "NodeTimeout" in err and "no count from node(s) a, b" in err


def test_simulate_smoke_and_determinism(tmp_path, capsys):
    args = ["simulate", "--seed", "5", "--reps", "3", "--subjects", "3000", "--sizes", "2,3", "--quiet", "--scatter", "2"]
    assert main(args + ["--out-dir", str(tmp_path / "a")]) == 0
    first = capsys.readouterr().out
    assert main(args + ["--out-dir", str(tmp_path / "b")]) == 0
    assert capsys.readouterr().out == first
    assert "Unpooled" in first and "g=3" in first and "agreement" in first
    for name in ("table.csv", "reps.csv", "scatter_g2.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

import json
import subprocess
import sys
from pathlib import Path

import pytest

from hybridcuts.cli import build_parser, main
from hybridcuts.model import load_instance

FIXTURE = Path(__file__).parent / "fixtures" / "scalar_period.json"


def _record(path):
    return dict(line.split("=", 1) for line in Path(path).read_text().splitlines())


def test_solve_fixture_is_optimal(tmp_path):
    out = tmp_path / "rep.txt"
    assert main(["solve", "--in", str(FIXTURE), "--variant", "wc-g", "--time-limit", "60", "--out", str(out)]) == 0
    rec = _record(out)
    assert rec["status"] == "optimal"
    assert main(["solve", "--in", str(FIXTURE), "--variant", "miqp", "--out", str(tmp_path / "b.txt")]) == 0
    assert float(_record(tmp_path / "b.txt")["incumbent"]) == pytest.approx(float(rec["incumbent"]), rel=1e-7)


def test_missing_required_flag_is_usage_error(capsys):
    assert main(["solve"]) == 1
    err = capsys.readouterr().err
    assert "usage:" in err and "--in" in err
    assert main(["solve", "--in", str(FIXTURE), "--bogus"]) == 1
    assert "unrecognized" in capsys.readouterr().err
    assert main([]) == 1


def test_io_errors_exit_3(tmp_path, capsys):
    assert main(["solve", "--in", str(tmp_path / "nope.json")]) == 3
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "n": 1,\n  "dx": \n}\n')
    assert main(["solve", "--in", str(bad)]) == 3
    assert "line 4" in capsys.readouterr().err


def test_invalid_instance_is_solve_failure(tmp_path):
    data = json.loads(FIXTURE.read_text())
    data["R"] = [[[-1.0]]]
    path = tmp_path / "neg.json"
    path.write_text(json.dumps(data))
    assert main(["solve", "--in", str(path)]) == 2


def test_generate_single_and_many(tmp_path):
    one = tmp_path / "a.json"
    assert main(["generate", "--dx", "2", "--dy", "2", "--n", "3", "--seed", "4", "--out", str(one)]) == 0
    inst = load_instance(one)
    assert (inst.n, inst.dx, inst.dy) == (3, 2, 2)
    assert main(["generate", "--n", "2", "--seed", "7", "--count", "3", "--out", str(tmp_path / "many")]) == 0
    names = sorted(p.name for p in (tmp_path / "many").iterdir())
    assert names == [f"dx1-dy1-n2-s{s}.json" for s in (7, 8, 9)]
    again = tmp_path / "b.json"
    main(["generate", "--dx", "2", "--dy", "2", "--n", "3", "--seed", "4", "--out", str(again)])
    assert one.read_bytes() == again.read_bytes()
    assert main(["generate", "--dx", "9", "--seed", "0", "--out", str(one)]) == 1


def _drop_time(text):
    lines = text.splitlines()
    col = lines[0].split(",").index("time_s")
    return [[c for i, c in enumerate(l.split(",")) if i != col] for l in lines]


def test_bench_rerun_identical_modulo_time(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    argv = ["bench", "--cells", "1x1,2x2", "--seeds", "0-1", "--variant", "miqp", "wc-g", "--n", "4"]
    assert main(argv + ["--out", str(a)]) == 0
    assert main(argv + ["--out", str(b)]) == 0
    assert _drop_time(a.read_text()) == _drop_time(b.read_text())
    assert len(a.read_text().splitlines()) == 1 + 8 + 4
    assert main(["bench", "--cells", "1by1", "--out", str(a)]) == 1


def test_hev_sim_short_run(tmp_path):
    params = tmp_path / "p.json"
    params.write_text(json.dumps({"duration": 2.0, "horizon": 5}))
    out = tmp_path / "trace.csv"
    code = main(["hev-sim", "--params", str(params), "--variant", "wc-g", "--r1", "10", "--gamma", "0.01",
                 "--out", str(out)])
    assert code == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 3 and "soc" in lines[0].split(",")
    params.write_text(json.dumps({"warp": 1}))
    assert main(["hev-sim", "--params", str(params), "--out", str(out)]) == 1


def test_help_lists_flags_with_defaults():
    ap = build_parser()
    sub = next(a for a in ap._actions if a.dest == "command")
    for name, parser in sub.choices.items():
        text = parser.format_help()
        for action in parser._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)
            if action.default not in (None, False) and not action.required and action.dest != "help":
                assert f"(default: {action.default}" in text or "(default: [" in text, (name, action.dest)


def test_module_entry_point_runs(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hybridcuts.cli", "solve", "--in", str(FIXTURE)],
                          capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0
    assert "status=optimal" in proc.stdout

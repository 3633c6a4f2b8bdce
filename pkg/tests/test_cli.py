import csv
import io

import pytest

from tcsap.cli import main
from tcsap.scenario import ScenarioError, apply_axis, parse_scenario, parse_sweep
from tcsap.sweep import COLUMNS, run_sweep

MINIMAL = """
k = 3
t_end = 5
[[nodes]]
count = 3
placement = "cluster"
radius = 30
"""

SMALL_SWEEP = """
t_end = 10
[[nodes]]
count_from = "k"
placement = "cluster"
radius = 30
[sweep]
axis = "threshold"
values = [3, 4, 5]
runs = 5
"""


def errors_of(text, parser=parse_scenario):
    with pytest.raises(ScenarioError) as exc:
        parser(text)
    return exc.value.errors


# -- scenario files ------------------------------------------------------------------------


def test_minimal_scenario_parses():
    sc = parse_scenario(MINIMAL)
    assert sc.k == 3 and sc.rc_thresh == 3 and sc.t_end == 5
    assert sc.group_count(sc.node_groups[0]) == 3


def test_threshold_below_two_is_rejected():
    assert "k: k must be ≥ 2" in errors_of(MINIMAL.replace("k = 3", "k = 1"))


def test_duplicate_identity_is_named():
    text = """
[[nodes]]
ids = [41, 42]
placement = "random"
[[nodes]]
ids = [42]
placement = "random"
"""
    errs = errors_of(text)
    assert any("duplicate node identity 42" in e for e in errs)


def test_unknown_fields_and_bad_toml_are_reported():
    assert any("unknown field" in e for e in errors_of(MINIMAL + "colour = 'red'\n"))
    errs = errors_of("k = [")
    assert errs


def test_all_errors_are_collected_together():
    errs = errors_of("k = 1\narea = [0, 10]\n")
    assert len(errs) >= 2


def test_small_founding_group_warns():
    sc = parse_scenario(MINIMAL)
    assert any("below 2k-1" in w for w in sc.warnings)


def test_sweep_requires_axis_and_values():
    errs = errors_of(MINIMAL + "[sweep]\nruns = 2\n", parse_sweep)
    assert any(e.startswith("sweep.axis") for e in errs) and any(e.startswith("sweep.values") for e in errs)
    assert errors_of(MINIMAL, parse_sweep) == ["sweep: a [sweep] table is required"]


def test_threshold_axis_sets_k():
    sw = parse_sweep(SMALL_SWEEP)
    assert [apply_axis(sw.base, sw.axis, v).k for v in sw.values] == [3, 4, 5]


# -- sweep CSV -------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_csv():
    return run_sweep(parse_sweep(SMALL_SWEEP), 0)


def test_sweep_has_a_row_per_run_and_a_mean_per_value(small_csv):
    rows = list(csv.reader(io.StringIO(small_csv)))
    assert tuple(rows[0]) == COLUMNS
    body = rows[1:]
    assert len(body) == 3 * 5 + 3
    assert [r[1] for r in body] == (["0", "1", "2", "3", "4", "mean"]) * 3
    assert [r[0] for r in body] == ["3"] * 6 + ["4"] * 6 + ["5"] * 6


def test_mean_rows_match_run_rows(small_csv):
    rows = list(csv.DictReader(io.StringIO(small_csv)))
    for value in ("3", "4", "5"):
        runs = [r for r in rows if r["axis_value"] == value and r["seed"] != "mean"]
        mean = next(r for r in rows if r["axis_value"] == value and r["seed"] == "mean")
        for col in ("init_delay_s", "control_msg_count", "retry_count"):
            expect = sum(float(r[col]) for r in runs) / len(runs)
            assert abs(float(mean[col]) - expect) <= 1e-6


def test_sweep_csv_is_byte_stable_and_parallel_matches_serial(small_csv):
    sw = parse_sweep(SMALL_SWEEP)
    assert run_sweep(sw, 0) == small_csv
    assert run_sweep(sw, 0, jobs=2) == small_csv
    assert run_sweep(sw, 1) != small_csv


def test_sweep_csv_uses_six_decimals(small_csv):
    row = small_csv.splitlines()[1].split(",")
    assert len(row[2].split(".")[1]) == 6


# -- command line -------------------------------------------------------------------------------


@pytest.fixture
def scenario_file(tmp_path):
    p = tmp_path / "s.toml"
    p.write_text(MINIMAL, encoding="utf-8")
    return p


def test_run_writes_csv_and_trace(scenario_file, tmp_path, capsys):
    trace = tmp_path / "trace.tsv"
    assert main(["run", str(scenario_file), "--seed", "3", "--trace", str(trace)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("row,seed,node,") and "\nrun,3," in out
    lines = trace.read_text(encoding="utf-8").splitlines()
    assert lines and all(len(line.split("\t")) == 4 for line in lines)


def test_run_is_reproducible_through_the_cli(scenario_file, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    ta, tb = tmp_path / "a.tsv", tmp_path / "b.tsv"
    assert main(["run", str(scenario_file), "--out", str(a), "--trace", str(ta)]) == 0
    assert main(["run", str(scenario_file), "--out", str(b), "--trace", str(tb)]) == 0
    assert a.read_bytes() == b.read_bytes() and ta.read_bytes() == tb.read_bytes()


def test_sweep_command_writes_csv(tmp_path):
    src = tmp_path / "sw.toml"
    src.write_text(SMALL_SWEEP.replace("[3, 4, 5]", "[3]").replace("runs = 5", "runs = 2"), encoding="utf-8")
    out = tmp_path / "sw.csv"
    assert main(["sweep", str(src), "--out", str(out), "--jobs", "2"]) == 0
    assert out.read_text(encoding="utf-8").splitlines()[-1].startswith("3,mean,")


def test_invalid_scenario_exits_one(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("k = 1\n", encoding="utf-8")
    assert main(["run", str(bad)]) == 1
    assert "k must be ≥ 2" in capsys.readouterr().err


def test_missing_file_and_bad_jobs_exit_one(scenario_file, tmp_path):
    assert main(["run", str(tmp_path / "nope.toml")]) == 1
    assert main(["sweep", str(scenario_file), "--jobs", "0"]) == 1


def test_runtime_failure_exits_two(tmp_path, capsys):
    # two preconfigured members cannot hold a 3-of-n key
    p = tmp_path / "short.toml"
    p.write_text('k = 3\nbootstrap = "preconfigured"\n[[nodes]]\ncount = 2\npreconfigured = true\n', encoding="utf-8")
    assert main(["run", str(p)]) == 2
    assert "error:" in capsys.readouterr().err


def test_every_shipped_scenario_is_valid():
    from conftest import SCENARIOS

    for path in sorted(SCENARIOS.glob("*.toml")):
        text = path.read_text(encoding="utf-8")
        (parse_sweep if "[sweep]" in text else parse_scenario)(text)

import csv
import io
import json

import pytest

from ccasim import bench
from ccasim.cli import main
from ccasim.costs import MEASURED_ROWS, measurements_to_json
from ccasim.errors import EmptyRows, InvalidParams, MismatchedRows

MIB = 1 << 20


def row(scenario="smc_rt", backend="single", instr=182.0, cycles=421.0, ram=None):
    return bench.ResultRow(scenario, backend, instr, cycles, 0.0, 0.0, ram_size=ram)


def test_scenario_validation():
    with pytest.raises(InvalidParams):
        bench.Scenario("nope")
    with pytest.raises(InvalidParams):
        bench.Scenario("shadow_gpt_create", "single")
    with pytest.raises(InvalidParams):
        bench.Scenario("cvm_boot", ram_size=0)
    with pytest.raises(InvalidParams):
        bench.Scenario("smc_rt", iterations=0)
    with pytest.raises(InvalidParams):
        bench.Scenario("smc_rt", profile="not-a-board")


def test_microbenchmark_rows():
    got = bench.run_scenario(bench.Scenario("rmi_version", iterations=3))
    assert (got.mean_instr, got.mean_cycles) == (994, 3583)
    assert got.stdev_instr == 0 and got.iterations == 3


def test_expand_defaults():
    sc = bench.expand("cvm_boot")
    assert {(s.backend, s.ram_size) for s in sc} == {(b, r) for b in ("single", "two-gpt")
                                                     for r in (256 * MIB, 1024 * MIB)}
    assert len(bench.expand("all")) >= len(bench.SCHEMAS)
    assert all(s.backend == "shadow" for s in bench.expand("all", "shadow"))
    with pytest.raises(InvalidParams):
        bench.expand("shadow_gpt_create", "single")


def test_emit_formats():
    rows = [row(), row("cvm_boot", "two-gpt", 1924.5, 2680.25, ram=256 * MIB)]
    table = bench.emit_table(rows)
    assert "== Two-GPT ==" in table and "cvm_boot 256M" in table
    parsed = list(csv.reader(io.StringIO(bench.emit_table(rows, "csv"))))
    assert tuple(parsed[0]) == bench.CSV_FIELDS
    assert parsed[1][:4] == ["smc_rt", "single", "182", "421"]
    assert bench.rows_from_json(bench.emit_table(rows, "json")) == rows
    with pytest.raises(EmptyRows):
        bench.emit_table([])
    with pytest.raises(InvalidParams):
        bench.emit_table(rows, "xml")


def test_compare():
    a = [row(), row("rmi_delegate", instr=100, cycles=200)]
    b = [row(backend="two-gpt"), row("rmi_delegate", "two-gpt", 150, 210)]
    same, dlg = bench.compare(a, b)
    assert (same.instr_pct, same.cycles_pct) == (0.0, 0.0)
    assert dlg.instr_pct == pytest.approx(50) and dlg.cycles_pct == pytest.approx(5)
    with pytest.raises(MismatchedRows):
        bench.compare(a, b[:1])
    assert bench.Overhead.display(21.66) == "+21.7%"
    assert bench.Overhead.display(1.194) == "+1.19%"


def test_fwb_and_fp_demo_rows():
    off = bench.run_scenario(bench.Scenario("fwb_demo", fwb_maintenance=False, iterations=2))
    assert off.extra["stale_fraction"] == 1.0
    demo = bench.run_scenario(bench.Scenario("fp_timer_demo", iterations=1, rounds=10))
    assert demo.mean_instr > 0


def test_parallel_matches_serial():
    sc = bench.Scenario("rmi_delegate", "two-gpt", iterations=4, seed=5, noise=True)
    assert bench.run_scenario(sc, jobs=2) == bench.run_scenario(sc)


def test_noise_is_seeded():
    sc = bench.Scenario("rmi_delegate", iterations=50, seed=9, noise=True)
    a, b = bench.run_scenario(sc), bench.run_scenario(sc)
    assert a == b and a.stdev_instr > 0


# -- CLI


def test_cli_list(capsys):
    assert main(["list"]) == 0
    out = capsys.readouterr().out
    assert all(sid in out for sid in bench.SCHEMAS)


def test_cli_run_json(tmp_path, capsys):
    out = tmp_path / "rows.json"
    assert main(["run", "--scenario", "smc_rt", "--iterations", "2", "--format", "json", "--out", str(out)]) == 0
    rows = bench.rows_from_json(out.read_text())
    assert rows[0].mean_instr == 182


def test_cli_exit_codes(capsys):
    assert main(["run", "--scenario", "cvm_boot", "--ram", "0"]) == 2
    assert main(["run", "--scenario", "bogus"]) == 2
    assert main(["run", "--scenario", "smc_rt", "--jobs", "0"]) == 2
    assert main(["compare", "only-one.json"]) == 2
    with pytest.raises(SystemExit):
        main(["run", "--format", "yaml"])


def test_cli_run_is_deterministic(capsys):
    args = ["run", "--scenario", "rmi_delegate", "--iterations", "5", "--seed", "3", "--noise", "--format", "csv"]
    main(args)
    first = capsys.readouterr().out
    main(args)
    assert capsys.readouterr().out == first


def test_cli_compare_files(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    a.write_text(bench.emit_table([row("rmi_delegate", instr=2865, cycles=7988)], "json"))
    b.write_text(bench.emit_table([row("rmi_delegate", "two-gpt", 3488, 8654)], "json"))
    assert main(["compare", str(a), str(b)]) == 0
    assert "+21.7%" in capsys.readouterr().out
    b.write_text(bench.emit_table([row("smc_rt", "two-gpt")], "json"))
    assert main(["compare", str(a), str(b)]) == 1


def test_cli_calibrate(tmp_path, capsys):
    src = tmp_path / "m.json"
    src.write_text(json.dumps(measurements_to_json(MEASURED_ROWS)))
    out = tmp_path / "w.json"
    assert main(["calibrate", "--from", str(src), "--out", str(out)]) == 0
    weights = json.loads(out.read_text())
    assert weights["rmi_handler"]["VERSION"] == {"instr": 62, "cycles": 213}
    assert "residual" in capsys.readouterr().err
    assert main(["calibrate", "--from", str(tmp_path / "missing.json")]) == 2


def test_cli_run_with_weights(tmp_path, capsys):
    out = tmp_path / "w.json"
    main(["calibrate", "--out", str(out)])
    capsys.readouterr()
    assert main(["run", "--scenario", "smc_rt", "--weights", str(out), "--format", "csv"]) == 0
    assert "182" in capsys.readouterr().out
    assert main(["run", "--scenario", "smc_rt", "--weights", str(tmp_path / "nope.json")]) == 2


def test_cli_verify_subset(capsys):
    assert main(["verify", "--only", "1,4"]) == 0
    assert capsys.readouterr().out.count("[PASS]") == 2

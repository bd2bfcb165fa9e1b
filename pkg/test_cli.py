import csv
import json

import pytest

import cli
import isa
import reference
from mapper import TensorPlan


def test_assemble_then_disassemble(fixture, tmp_path):
    source = fixture("programs", "diagonal_gather.asm")
    binary = tmp_path / "diagonal_gather.bin"
    assert cli.main(["assemble", source, "-o", str(binary)]) == 0
    assert binary.stat().st_size == 22 * 4
    text = tmp_path / "diagonal_gather.asm"
    assert cli.main(["disassemble", str(binary), "-o", str(text)]) == 0
    with open(source) as f:
        assert isa.assemble(text.read_text()) == isa.assemble(f.read())


def test_assembly_error_is_usage_error(tmp_path, capsys):
    source = tmp_path / "bad.asm"
    source.write_text("halt\nrd-buf bank-start=99 bank-offset=0 length=1\n")
    assert cli.main(["assemble", str(source)]) == 2
    assert "error:" in capsys.readouterr().err


def test_disassemble_prints(tmp_path, capsys):
    binary = tmp_path / "p.bin"
    binary.write_bytes(isa.encode_program([isa.set_reg("k-len", 9), isa.Halt()]))
    assert cli.main(["disassemble", str(binary)]) == 0
    assert capsys.readouterr().out.splitlines() == ["set-reg reg=k-len value=9", "halt"]


def test_run_from_manifest(fixture, tmp_path):
    assert cli.main(["run", "--manifest", fixture("inputs", "run_fir.json"), "--out", str(tmp_path)]) == 0
    outputs = json.loads((tmp_path / "outputs.json").read_text())
    ramp = [i * 8 - 60 for i in range(16)]
    # unit-gain coefficients need no requantization shift
    assert outputs == {"fir.y": reference.fir(ramp, [1, 2, 2, 1])}
    # the manifest asks for a CSV report
    header = (tmp_path / "report.csv").read_text().splitlines()[0]
    assert header.startswith("workload,total_cycles,")


def test_run_json_report_to_stdout(capsys):
    assert cli.main(["run", "--workload", "fir16", "--timing-only"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["total_cycles"] > 0
    assert report["mac_ops"] == 4 * 16


def test_verify_passes(capsys):
    assert cli.main(["verify", "--workload", "fir8", "--seed", "11"]) == 0
    out = capsys.readouterr().out
    assert "pass" in out and "FAIL" not in out
    assert "1/1 checks passed" in out


def test_verify_catches_corrupted_twiddle(capsys):
    assert cli.main(["verify", "--workload", "fft128_corrupt"]) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out and "golden" in out


def test_verify_pipeline_stage_by_stage(capsys):
    assert cli.main(["verify", "--workload", "pipeline"]) == 0
    out = capsys.readouterr().out
    assert "s0.fft" in out and "s1.network.1.y" in out


def test_unknown_machine_key(capsys):
    assert cli.main(["verify", "--workload", "fir8", "--machine", "bad_key"]) == 2
    assert "no_such_key" in capsys.readouterr().err


def test_cycle_budget_is_engine_fault():
    assert cli.main(["run", "--workload", "fir80", "--machine", "tiny_budget", "--timing-only"]) == 3


def test_missing_workload():
    assert cli.main(["run", "--workload", "no-such-workload"]) == 2
    assert cli.main(["run"]) == 2


def test_map_writes_program_and_plan(tmp_path):
    out = tmp_path / "fir16"
    assert cli.main(["map", "--workload", "fir16", "--out", str(out)]) == 0
    program = isa.decode_program((out / "program.bin").read_bytes())
    assert isinstance(program[len(program) - 1], isa.Halt)
    assert isa.assemble((out / "program.asm").read_text()) == program
    plan = TensorPlan.load(str(out))
    assert plan.outputs == ["fir.y"]
    assert plan.constants["fir.h"] == [1, 2, 2, 1]


def test_bench_empty_suite(capsys):
    assert cli.main(["bench", "empty"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines == [",".join(["workload", "cfg", "speedup"] + cli.CycleReport.csv_header() + ["error"])]


@pytest.fixture
def small_suite(tmp_path):
    path = tmp_path / "suite.json"
    path.write_text(json.dumps({
        "name": "small",
        "configs": ["16x16", "8x8", "4x4"],
        "workloads": ["fir8", {"kind": "fft", "points": 64}],
    }))
    return str(path)


def test_bench_csv(small_suite, capsys):
    assert cli.main(["bench", small_suite]) == 0
    rows = list(csv.reader(capsys.readouterr().out.splitlines()))[1:]
    assert [(r[0], r[1]) for r in rows] == [("fir8", "16x16"), ("fir8", "8x8"), ("fir8", "4x4"),
                                            ("fft64", "16x16"), ("fft64", "8x8"), ("fft64", "4x4")]
    assert rows[0][2] == "1.000"
    assert float(rows[1][2]) > 1
    # the FFT does not map at 4 bits
    assert rows[5][2:-1] == [""] * (len(rows[5]) - 3)
    assert "FFT" in rows[5][-1]
    assert all(r[-1] == "" for r in rows[:5])


def test_bench_json(small_suite, tmp_path):
    out = tmp_path / "bench.json"
    assert cli.main(["bench", small_suite, "--format", "json", "--out", str(out)]) == 0
    data = json.loads(out.read_text())
    assert data["suite"] == "small"
    assert data["machine"]["bank_count"] == 18
    assert len(data["rows"]) == 6
    assert data["rows"][5]["total_cycles"] is None
    assert data["rows"][5]["error"]
    assert data["rows"][3]["speedup"] == 1.0


def test_bench_baseline_failure_gives_no_ratios(tmp_path):
    suite = tmp_path / "suite.json"
    suite.write_text(json.dumps({"configs": ["4x4", "8x8"], "workloads": [{"kind": "fft", "points": 64}]}))
    _, entries, configs = cli.load_suite(str(suite))
    rows = cli.bench_rows(entries, configs, cli.DEFAULT_MACHINE)
    (_, _, base, base_speedup, base_error), (_, _, report, speedup, error) = rows
    assert base is None and base_speedup is None and "FFT" in base_error
    assert report.total_cycles > 0
    assert speedup is None
    assert error.startswith("baseline 4x4 failed")


def test_cnn_suite_maps_at_every_width():
    _, entries, configs = cli.load_suite("cnn")
    assert cli.BENCH_BASELINE in configs
    for wl in entries:
        for cfg in configs:
            program, plan = cli.map_workload(wl.with_cfg(cfg))
            assert plan.mult_adds == cli.count_mult_adds(wl)


def test_count_table(capsys):
    assert cli.main(["count"]) == 0
    out = capsys.readouterr().out
    for name in ("radix2-FFT 1024", "80-tap FIR 256", "tiny_vgg", "ultranet", "resnet20"):
        assert name in out


def test_count_one_workload(capsys):
    assert cli.main(["count", "--workload", "fir8"]) == 0
    row = capsys.readouterr().out.splitlines()[1].split()
    assert row == ["fir8", "1,600", "8"]


def test_signal_inputs(tmp_path):
    csv_path = tmp_path / "x.csv"
    csv_path.write_text("# re,im\n1,2\n-3,4\n")
    assert cli.read_signal(str(csv_path)).tolist() == [1 + 2j, -3 + 4j]
    bin_path = tmp_path / "x.bin"
    bin_path.write_bytes(b"\x01\x00\xff\xff")
    assert cli.read_signal(str(bin_path)).tolist() == [1, -1]


def test_json_values():
    assert cli._to_json_value([1 + 2j, 3.5]) == [[1, 2], [3.5, 0]]
    assert cli._from_json_value([[1, 2], [3, -4]]).tolist() == [1 + 2j, 3 - 4j]

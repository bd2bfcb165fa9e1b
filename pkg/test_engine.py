import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import isa
import reference
from cli import verify_outputs
from config import MachineConfig
from engine import CycleReport, MachineState, compare_configs, reports_to_csv, run, run_workload
from errors import (AccumulatorOverflow, CycleBudgetExceeded, EngineFault, MappingError,
                    ShuffleError)
from mac_array import BitwidthConfig, step_count, value_range
from mapper import (WAVELETS, ConvLayer, Workload, map_conv_layer, map_dct2d, map_dwt, map_fft,
                    map_fir, map_workload, plan_weights)
from memory import transfer_cycles
from shuffle_fabric import UNITS, nibble

DIAGONAL_WORDS = [0x0123456789ABCDEF, 0xFEDCBA9876543210, 0x1111222233334444, 0xAAAABBBBCCCCDDDD]


@pytest.fixture
def gather_program(fixture):
    with open(fixture("programs", "diagonal_gather.asm")) as f:
        return isa.assemble(f.read())


def workload(fixture, name):
    return Workload.from_json(fixture("workloads", name + ".json"))


def sample(plan, seed=0):
    return plan.sample_inputs(np.random.default_rng(seed))


def conv_program(**regs):
    """ctrl-bitwidth 8x8, the given registers, one conv-exec, halt."""
    program = [isa.CtrlBitwidth(8, 8)]
    program += [isa.set_reg(name.replace("_", "-"), value) for name, value in regs.items()]
    return program + [isa.ConvExec(), isa.Halt()]


# -- hand written programs --------------------------------------------------------------

def test_gather_program_result(gather_program):
    state = MachineState()
    base = state.onchip.address(16, 0)
    state.onchip.write_words(base, DIAGONAL_WORDS)
    state.run(gather_program)
    expected = 0
    for u in range(UNITS):
        expected |= nibble(DIAGONAL_WORDS[u // 4], u) << (4 * u)
    assert state.onchip.read_words(base + 4, 1) == [(expected & ~0xFF) | 1]
    # the source words are untouched
    assert state.onchip.read_words(base, 4) == DIAGONAL_WORDS


def test_gather_program_costs(gather_program):
    _, report = run(gather_program)
    assert report.instructions == 22
    # bitwidth, 16 shuffling units, padding and halt stall one cycle each
    assert report.stall_cycles == 19
    # four words read, one window, one word written
    assert report.shuffle_cycles == 6
    assert report.compute_cycles == report.dma_cycles == 0
    assert report.total_cycles == 25


def test_conv_cost_is_step_count():
    program = conv_program(out_rows=10, out_cols=9, k_len=5, fmap_c=5)
    _, report = run(program, functional=False)
    assert report.compute_cycles == step_count(10, 9, 5, BitwidthConfig(8, 8)) == 40
    assert report.mac_ops == 10 * 9 * 5


def test_dma_overlap_hides_transfer_behind_conv():
    program = ([isa.LoadTile(0, 0, 2)] + conv_program(out_rows=10, out_cols=9, k_len=5, fmap_c=5))
    _, plain = run(program, functional=False)
    _, overlapped = run(program, machine=MachineConfig(overlap_dma=True), functional=False)
    dma = transfer_cycles(16, 1600.0, 100.0, 20)
    assert plain.dma_cycles == overlapped.dma_cycles == dma == 21
    assert overlapped.overlapped_cycles == dma
    assert plain.total_cycles - overlapped.total_cycles == dma


def test_missing_halt_faults():
    with pytest.raises(EngineFault) as info:
        run([isa.set_reg("shift", 3)])
    assert info.value.pc == 1


def test_fault_records_pc():
    program = [isa.CtrlBitwidth(8, 8), isa.ShuffleExec(0, 0, 1, 0), isa.Halt()]
    state = MachineState()
    with pytest.raises(ShuffleError) as info:
        state.run(program)
    assert info.value.pc == 1
    assert state.halted
    assert state.fault.startswith("pc 1: shuffle-exec")


def test_k_len_must_match_kernel():
    with pytest.raises(EngineFault) as info:
        run(conv_program(k_len=5))
    assert info.value.pc == 2


def test_cycle_budget(gather_program):
    with pytest.raises(CycleBudgetExceeded):
        run(gather_program, machine=MachineConfig(cycle_budget=10))
    _, report = run(gather_program, machine=MachineConfig(cycle_budget=25))
    assert report.total_cycles == 25


def test_budget_fixture_stops_long_workload(fixture):
    machine = MachineConfig.from_json(fixture("machines", "tiny_budget.json"))
    with pytest.raises(CycleBudgetExceeded):
        run_workload(workload(fixture, "fir80"), machine=machine, functional=False)


def test_requantized_overflow_is_reported():
    program, plan = map_fir(2, 16, "8x8", coefficients=[127, 127], shift=0, out_bits=8)
    with pytest.raises(AccumulatorOverflow) as info:
        run(program, plan, {"fir.x": [127] * 16})
    assert isinstance(program[info.value.pc], isa.ConvExec)


def test_non_functional_plan_needs_timing_only(fixture):
    program, plan = map_workload(workload(fixture, "tiny_vgg"))
    assert not plan.functional
    with pytest.raises(MappingError):
        run(program, plan)
    outputs, report = run(program, plan, functional=False)
    assert outputs == {}
    assert report.mac_ops > 0


# -- signal processing kernels ----------------------------------------------------------

def test_fir_identity():
    program, plan = map_fir(1, 16, "8x8", coefficients=[1])
    x = list(range(-8, 8))
    outputs, _ = run(program, plan, {"fir.x": x})
    assert outputs["fir.y"].tolist() == x


def test_fir_matches_direct_convolution(fixture):
    wl = workload(fixture, "fir8")
    program, plan = map_workload(wl)
    inputs = sample(plan, 1)
    outputs, report = run(program, plan, inputs)
    shift = plan.notes["shifts"]["fir"]
    expected = [reference.requantize(v, shift) for v in reference.fir(inputs["fir.x"], wl.coefficients)]
    assert outputs["fir.y"].tolist() == expected
    assert report.mac_ops == 8 * 200


CONFIGS = [f"{a}x{w}" for a in (4, 8, 16) for w in (4, 8, 16)]


@pytest.mark.slow
@settings(max_examples=1000, deadline=None)
@given(st.sampled_from(CONFIGS), st.integers(1, 12), st.integers(0, 40), st.data())
def test_fir_random_cases(cfg, taps, extra, data):
    cfg = BitwidthConfig.parse(cfg)
    lo, hi = value_range(cfg.a_bits)
    # keep the worst-case sum inside the 32-bit lane accumulators
    bound = min(value_range(cfg.w_bits)[1], ((1 << 31) - 1) // (taps << (cfg.a_bits - 1)))
    h = data.draw(st.lists(st.integers(-bound, bound), min_size=taps, max_size=taps))
    x = data.draw(st.lists(st.integers(lo, hi), min_size=taps + extra, max_size=taps + extra))
    program, plan = map_fir(taps, len(x), cfg, coefficients=h)
    y = run(program, plan, {"fir.x": x})[0]["fir.y"]
    shift = plan.notes["shifts"]["fir"]
    assert y.tolist() == [reference.requantize(v, shift) for v in reference.fir(x, h)]


def test_fft_two_points():
    program, plan = map_fft(2, "16x16")
    outputs, _ = run(program, plan, {"fft.x": [3, 1 + 5j]})
    assert outputs["fft.y"].tolist() == [2 + 2j, 1 - 2j]


@pytest.mark.parametrize("name, points, cfg, tolerance", [
    ("fft128", 128, "16x16", 5e-3),
    ("fft256", 256, "16x16", 5e-3),
    ("fft512", 512, "16x16", 5e-3),
    pytest.param("fft1024", 1024, "16x16", 5e-3, marks=pytest.mark.slow),
    ("fft64-8bit", 64, "8x8", 0.5),
])
def test_fft_bit_exact_and_accurate(name, points, cfg, tolerance):
    program, plan = map_workload(Workload("fft", cfg, points=points, name=name))
    x = sample(plan, 2)["fft.x"]
    y = run(program, plan, {"fft.x": x})[0]["fft.y"]
    bits = BitwidthConfig.parse(cfg).a_bits
    re, im = reference.fixed_fft(x.real.astype(np.int64), x.imag.astype(np.int64), bits)
    assert np.array_equal(y, np.array(re) + 1j * np.array(im))
    assert reference.relative_rms(y, reference.dft(x) / points) <= tolerance


def test_inverse_fft(fixture):
    wl = workload(fixture, "ifft128")
    program, plan = map_workload(wl)
    x = sample(plan, 3)["fft.x"]
    y = run(program, plan, {"fft.x": x})[0]["fft.y"]
    re, im = reference.fixed_fft(x.real.astype(np.int64), x.imag.astype(np.int64), 16, True)
    assert np.array_equal(y, np.array(re) + 1j * np.array(im))


def test_corrupted_twiddle_breaks_golden_match(fixture):
    wl = workload(fixture, "fft128_corrupt")
    program, plan = map_workload(wl)
    inputs = sample(plan, 4)
    outputs, _ = run(program, plan, inputs)
    checks = verify_outputs(wl, plan, inputs, outputs)
    assert not checks[0].passed
    assert checks[0].max_error > 0


def test_dct_constant_block_is_dc_only():
    program, plan = map_dct2d("16x16", blocks=2, input_bits=8)
    x = np.stack([np.full((8, 8), 100), np.zeros((8, 8), dtype=int)])
    y = run(program, plan, {"dct2d.x": x})[0]["dct2d.y"]
    assert y.shape == (2, 8, 8)
    assert y[0, 0, 0] == pytest.approx(800, abs=0.5)
    assert np.allclose(y[0].ravel()[1:], 0, atol=0.5)
    assert not y[1].any()


@pytest.mark.parametrize("cfg, blocks, tolerance", [
    ("16x16", 4, 1e-2),
    ("16x8", 4, 1e-2),
    # 8-bit row results are stored two bits coarse
    ("8x8", 4, 2.5e-2),
    ("8x8", 8, 2.5e-2),
])
def test_dct_tracks_float_transform(cfg, blocks, tolerance):
    program, plan = map_dct2d(cfg, blocks=blocks, input_bits=8)
    x = np.random.default_rng(5).integers(-128, 128, (blocks, 8, 8))
    y = run(program, plan, {"dct2d.x": x})[0]["dct2d.y"]
    expected = np.stack([reference.dct2d(block) for block in x])
    assert reference.relative_rms(y.ravel(), expected.ravel()) <= tolerance


def test_dct_8bit_shifts_and_verify():
    wl = Workload("dct2d", "8x8", blocks=4)
    program, plan = map_workload(wl)
    assert plan.notes["shifts"]["dct2d"] == [10, 1]
    inputs = sample(plan, 6)
    outputs, _ = run(program, plan, inputs)
    (check,) = verify_outputs(wl, plan, inputs, outputs)
    assert check.passed
    assert "tolerance 0.025" in check.line()


def test_dwt_matches_integer_filter_bank(fixture):
    wl = workload(fixture, "dwt")
    program, plan = map_workload(wl)
    x = sample(plan, 6)["dwt.x"]
    outputs, _ = run(program, plan, {"dwt.x": x})
    taps = plan.notes["taps"]["dwt"]
    hi1, hi2, lo = reference.dwt_fixed(x, taps["lo"], taps["hi"], 2, plan.notes["shifts"]["dwt"])
    assert outputs["dwt.hi1"].tolist() == hi1
    assert outputs["dwt.hi2"].tolist() == hi2
    assert outputs["dwt.lo"].tolist() == lo
    assert len(hi1) == 32 and len(lo) == 16


def test_db2_dwt_zero_extends():
    lo, hi = WAVELETS["db2"]
    program, plan = map_dwt(1, lo, hi, "16x8", 32)
    x = np.random.default_rng(12).integers(-4000, 4000, 32)
    outputs, report = run(program, plan, {"dwt.x": x})
    taps = plan.notes["taps"]["dwt"]
    hi1, low = reference.dwt_fixed(x, taps["lo"], taps["hi"], 1, plan.notes["shifts"]["dwt"])
    assert outputs["dwt.hi1"].tolist() == hi1
    assert outputs["dwt.lo"].tolist() == low
    assert report.mac_ops == 16 * 2 * 4


@pytest.mark.slow
@settings(max_examples=1000, deadline=None)
@given(st.sampled_from(CONFIGS), st.sampled_from(sorted(WAVELETS)), st.integers(1, 3),
       st.integers(4, 8), st.data())
def test_dwt_random_cases(cfg, wavelet, levels, blocks, data):
    cfg = BitwidthConfig.parse(cfg)
    # inputs get one headroom bit per level and keep at least two bits
    levels = min(levels, cfg.a_bits - 2)
    lo, hi = WAVELETS[wavelet]
    program, plan = map_dwt(levels, lo, hi, cfg, blocks << levels)
    bits = plan.notes["input_bits"]["dwt.x"]
    x = data.draw(st.lists(st.integers(*value_range(bits)), min_size=blocks << levels,
                           max_size=blocks << levels))
    outputs, _ = run(program, plan, {"dwt.x": x})
    taps = plan.notes["taps"]["dwt"]
    expected = reference.dwt_fixed(x, taps["lo"], taps["hi"], levels, plan.notes["shifts"]["dwt"])
    names = [f"dwt.hi{l}" for l in range(1, levels + 1)] + ["dwt.lo"]
    assert [outputs[n].tolist() for n in names] == expected


# -- convolution ------------------------------------------------------------------------

def conv_expected(plan, layer, x):
    w = plan_weights(plan, "conv", layer)
    return reference.conv_layer(x, w, layer.stride, (layer.pad_h, layer.pad_w),
                                plan.notes["shifts"]["conv"], layer.relu)


def test_resident_conv_exact(fixture):
    wl = workload(fixture, "conv_small")
    program, plan = map_workload(wl)
    assert "tiling" not in plan.notes
    x = sample(plan, 7)["conv.x"]
    y = run(program, plan, {"conv.x": x})[0]["conv.y"]
    assert y.shape == (6, 6, 8)
    assert np.array_equal(y, conv_expected(plan, wl.layer, x))


@pytest.mark.parametrize("layer", [
    ConvLayer(6, 6, 4, 8, kernel_h=3, pad_h=1, relu=True),
    ConvLayer(9, 7, 3, 16, kernel_h=3, stride=2, pad_h=1),
])
def test_tiled_conv_exact(layer):
    program, plan = map_conv_layer(layer, "8x8", tiled=True, seed=8)
    assert "conv" in plan.notes["tiling"]
    x = sample(plan, 8)["conv.x"]
    outputs, report = run(program, plan, {"conv.x": x})
    assert np.array_equal(outputs["conv.y"], conv_expected(plan, layer, x))
    assert report.dma_cycles > 0


def test_kernel_tiles_narrower_than_array():
    machine = MachineConfig(bank_count=4, bank_bytes=1024, signal_banks=(3,))
    layer = ConvLayer(2, 2, 256, 12, kernel_h=1)
    program, plan = map_conv_layer(layer, "8x8", machine, tiled=True, seed=11)
    assert plan.notes["tiling"]["conv"] == {"rows": 2, "kernels": 3}
    x = sample(plan, 11)["conv.x"]
    outputs, report = run(program, plan, {"conv.x": x}, machine)
    assert np.array_equal(outputs["conv.y"], conv_expected(plan, layer, x))
    # idle lanes still cost a full step
    assert report.compute_cycles == 4 * step_count(4, 3, 256, BitwidthConfig(8, 8))


@st.composite
def small_layers(draw):
    in_h, in_w = draw(st.integers(1, 6)), draw(st.integers(1, 6))
    pad = draw(st.integers(0, 1))
    kernel = draw(st.integers(1, min(3, in_h + 2 * pad, in_w + 2 * pad)))
    return ConvLayer(in_h, in_w, draw(st.integers(1, 4)), draw(st.integers(1, 10)), kernel_h=kernel,
                     stride=draw(st.integers(1, 2)), pad_h=pad, relu=draw(st.booleans()))


# full-range 16x16 weights can overflow a 32-bit lane sum over 36 products
@pytest.mark.slow
@settings(max_examples=1000, deadline=None)
@given(small_layers(), st.sampled_from([c for c in CONFIGS if c != "16x16"]), st.booleans(),
       st.integers(0, 2**16))
def test_conv_random_cases(layer, cfg, tiled, seed):
    program, plan = map_conv_layer(layer, cfg, tiled=tiled, seed=seed)
    x = sample(plan, seed)["conv.x"]
    y = run(program, plan, {"conv.x": x})[0]["conv.y"]
    assert np.array_equal(y, conv_expected(plan, layer, x))


# -- pipelines and whole runs -----------------------------------------------------------

def test_fused_and_staged_pipelines_agree(fixture):
    fused, staged = workload(fixture, "pipeline"), workload(fixture, "pipeline_staged")
    runs = {}
    for wl in (fused, staged):
        program, plan = map_workload(wl)
        inputs = sample(plan, 9)
        outputs, report = run(program, plan, inputs)
        assert all(c.passed for c in verify_outputs(wl, plan, inputs, outputs))
        runs[wl.fused] = outputs, report
    (f_out, f_report), (s_out, s_report) = runs[True], runs[False]
    for key in ("s0.fft.y", "s1.network.1.y"):
        assert np.array_equal(f_out[key], s_out[key])
    assert f_report.inter_stage_dma_bytes == 0
    assert s_report.inter_stage_dma_bytes > 0
    assert s_report.total_cycles > f_report.total_cycles


def test_runs_are_deterministic(fixture):
    program, plan = map_workload(workload(fixture, "fir8"))
    inputs = sample(plan, 10)
    first = run(program, plan, inputs)
    second = run(program, plan, inputs)
    assert first[0]["fir.y"].tolist() == second[0]["fir.y"].tolist()
    assert first[1] == second[1]


def test_timing_only_has_same_cycles(fixture):
    program, plan = map_workload(workload(fixture, "conv_small"))
    _, functional = run(program, plan, sample(plan))
    _, timing = run(program, plan, functional=False)
    assert timing == functional


def test_narrower_widths_speed_up(fixture):
    assert compare_configs(workload(fixture, "fir8"), "16x16", "8x8") > 1
    conv = workload(fixture, "conv_small")
    forward = compare_configs(conv, "8x8", "4x4")
    assert forward > 1
    assert forward * compare_configs(conv, "4x4", "8x8") == pytest.approx(1)


@pytest.mark.parametrize("network", ["ultranet", "resnet20"])
def test_cnn_4bit_speedup_is_near_sixteen(fixture, network):
    wl = Workload("network", network=network)
    unlimited = MachineConfig.from_json(fixture("machines", "unlimited.json"))
    compute_bound = compare_configs(wl, "16x16", "4x4", unlimited)
    assert 12 <= compute_bound <= 16
    # 1600 MB/s makes the smaller runs wait on weights and activations
    assert compare_configs(wl, "16x16", "4x4") < compute_bound
    assert compute_bound > compare_configs(wl, "16x16", "8x8", unlimited) > 1


def test_dsp_8bit_speedups(fixture):
    fir = compare_configs(workload(fixture, "fir8"), "16x16", "8x8")
    dct = compare_configs(workload(fixture, "dct16"), "16x16", "8x8")
    fft = compare_configs(workload(fixture, "fft128"), "16x16", "8x8")
    assert 3.5 <= fir <= 4.0
    assert 3.5 <= dct <= 4.0
    # shuffles do not get cheaper with narrower operands
    assert 1 < fft < min(fir, dct)


def test_report_rows():
    report = CycleReport(total_cycles=5, stall_cycles=5, instructions=5)
    assert report.to_dict()["total_cycles"] == 5
    text = reports_to_csv([("a", report), ("b", CycleReport())])
    lines = text.strip().splitlines()
    assert lines[0].split(",") == ["workload"] + CycleReport.csv_header()
    assert lines[1].startswith("a,5,0,0,0,5")
    assert len(lines) == 3

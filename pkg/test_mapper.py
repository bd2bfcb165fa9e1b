import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import isa
from config import DEFAULT_MACHINE, MachineConfig
from engine import run
from errors import MappingError
from mac_array import BitwidthConfig
from mapper import (Allocator, ConvLayer, GatherBuilder, ProgramBuilder, TensorPlan, TensorSpec,
                    Workload, bit_reverse, build_layers, count_mult_adds, count_parameters,
                    dct_coefficients, decode_tensor, encode_tensor, fft_layout_model, fft_twiddles,
                    load_network, map_conv_layer, map_fft, map_fir, map_pipeline, map_workload,
                    quantize)


# -- layers and counting ---------------------------------------------------------

def test_conv_layer_shapes():
    layer = ConvLayer(32, 32, 3, 16, kernel_h=3, pad_h=1, stride=2)
    assert layer.out_shape == (16, 16, 16)
    assert layer.k_len == 27
    assert layer.mult_adds == 16 * 16 * 27 * 16
    assert layer.parameters == 27 * 16
    with pytest.raises(MappingError):
        ConvLayer(2, 2, 1, 1, kernel_h=5)
    with pytest.raises(MappingError):
        ConvLayer(4, 4, 1, 1, kind="deconv")


def test_build_layers_propagates_shapes():
    layers = build_layers([
        {"type": "conv", "out": 8, "kernel": 3, "pad": 1},
        {"type": "conv", "out": 16, "kernel": 1, "stride": 2, "shortcut": True},
        {"type": "pool", "size": 2},
        {"type": "fc", "out": 10},
    ], (8, 8, 3))
    assert [l.kind for l in layers] == ["conv", "conv", "pool", "fc"]
    assert layers[1].in_c == 8 and layers[1].out_shape == (4, 4, 16)
    # the shortcut does not advance the chain
    assert layers[2].in_c == 8 and layers[2].out_shape == (4, 4, 8)
    assert layers[3].in_c == 4 * 4 * 8
    with pytest.raises(MappingError):
        build_layers([{"type": "lstm"}], (1, 1, 1))


def test_tiny_vgg_counts():
    wl = Workload("network", network="tiny_vgg")
    assert count_mult_adds(wl) == 169_476_736
    assert count_parameters(wl) == 1_157_440


def test_ultranet_mult_adds():
    assert count_mult_adds(Workload("network", network="ultranet")) == 3_843_072


def test_unknown_network():
    with pytest.raises(MappingError):
        load_network("no_such_net")


@pytest.mark.parametrize("wl, mult_adds, params", [
    (Workload("fft", points=1024), 51_200, 5 * 1024),
    (Workload("fft", points=128), 10 * 64 * 7, 5 * 128),
    (Workload("fir", taps=80, length=256), 80 * 256, 80),
    (Workload("dct2d", blocks=3), 3 * 1024, 64),
    (Workload("dwt", length=64, levels=2), 32 * 4 + 16 * 4, 4),
    (Workload("dwt", length=64, levels=1, wavelet="db2"), 32 * 8, 8),
])
def test_counts(wl, mult_adds, params):
    assert count_mult_adds(wl) == mult_adds
    assert count_parameters(wl) == params


def test_pipeline_counts_sum_stages():
    stages = [Workload("fft", points=128), Workload("fir", taps=4, length=256)]
    wl = Workload("pipeline", stages=stages)
    assert count_mult_adds(wl) == sum(count_mult_adds(s) for s in stages)


# -- workloads -----------------------------------------------------------------------

def test_workload_dict_form(fixture):
    wl = Workload.from_json(fixture("workloads", "pipeline.json"))
    assert wl.kind == "pipeline"
    assert [s.cfg for s in wl.stages] == [BitwidthConfig(8, 8), BitwidthConfig(8, 4)]
    again = Workload.from_dict(wl.to_dict())
    assert again == wl
    assert wl.with_cfg("16x16").stages[1].cfg == BitwidthConfig(16, 16)


def test_workload_errors():
    with pytest.raises(MappingError):
        Workload("sort")
    with pytest.raises(MappingError):
        Workload.from_dict({"points": 8})
    with pytest.raises(MappingError):
        Workload.from_dict({"kind": "fft", "colour": "red"})
    with pytest.raises(MappingError):
        Workload.from_json("/nonexistent/workload.json")


# -- numerics ------------------------------------------------------------------------

def test_quantize_rounds_half_even_and_saturates():
    ints, saturated = quantize([0.5, 1.5, -0.5, 0.25], 8, 1)
    assert ints.tolist() == [1, 3, -1, 0]
    assert saturated == 0
    ints, saturated = quantize([1.0, -1.0], 8, 7)
    assert ints.tolist() == [127, -128]
    assert saturated == 1


def test_fft_twiddles():
    assert fft_twiddles(4, 16) == [[16384, 0], [0, -16384]]
    assert fft_twiddles(4, 16, inverse=True) == [[16384, 0], [0, 16384]]
    assert fft_twiddles(8, 8)[1] == [round(np.cos(np.pi / 4) * 64), -round(np.sin(np.pi / 4) * 64)]


def test_dct_coefficients_fill_weight_range():
    coeffs, frac = dct_coefficients(16)
    assert np.abs(coeffs).max() <= 32767
    assert np.abs(coeffs).max() * 2 > 32767
    assert coeffs[0, 0] == round((1 / np.sqrt(8)) * (1 << frac))


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([2, 4, 8, 16, 64, 256]), st.sampled_from([8, 16]), st.booleans(),
       st.integers(0, 2 ** 31))
def test_fft_layout_model_matches_dft(n, bits, inverse, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n) + 1j * rng.normal(size=n)
    expected = (np.fft.ifft(x) if inverse else np.fft.fft(x) / n)
    assert np.allclose(fft_layout_model(x, inverse, bits), expected, atol=1e-9)


# -- tensors -------------------------------------------------------------------------

def test_bit_reversed_layout():
    spec = TensorSpec("x", "onchip", 0, 16, 16, layout="complex-bitrev")
    values = np.arange(8) + 1j * -np.arange(8)
    elements = encode_tensor(spec, values)
    assert elements[0::2].tolist() == [bit_reverse(i, 3) for i in range(8)]
    assert np.array_equal(decode_tensor(spec, elements), values)


def test_hwc_layout_pads_rows():
    spec = TensorSpec("x", "offchip", 0, 8, 16, layout="hwc", shape=(2, 3, 1), pitch=8)
    elements = encode_tensor(spec, [[[1], [2], [3]], [[4], [5], [6]]])
    assert elements.tolist() == [1, 2, 3, 0, 0, 0, 0, 0, 4, 5, 6, 0, 0, 0, 0, 0]
    assert decode_tensor(spec, elements)[:, :, 0].tolist() == [[1, 2, 3], [4, 5, 6]]


def test_tensor_element_count_checked():
    with pytest.raises(MappingError):
        encode_tensor(TensorSpec("x", "onchip", 0, 8, 4), [1, 2, 3])
    with pytest.raises(MappingError):
        encode_tensor(TensorSpec("x", "onchip", 0, 8, 8, layout="complex"), [1j] * 3)


# -- allocation and emission ---------------------------------------------------------

def test_allocator_pools():
    alloc = Allocator(DEFAULT_MACHINE)
    assert alloc.capacity("signal") == 2 * 1024
    assert alloc.capacity("main") == 16 * 1024
    assert alloc.alloc(10, "signal") == 16 * 1024
    assert alloc.alloc(10) == 0
    # falls back to the other pool when the preferred one is full
    assert alloc.alloc(2040, "signal") == 10
    with pytest.raises(MappingError):
        alloc.alloc(20000)


def test_builder_skips_unchanged_registers():
    b = ProgramBuilder()
    b.set(shift=3, out_rows=1)
    b.set(shift=3, k_len=9)
    regs = [ins.name for ins in b.program if isinstance(ins, isa.SetReg)]
    assert regs == ["shift", "k-len"]
    b.bitwidth(BitwidthConfig(8, 8))
    b.bitwidth(BitwidthConfig(8, 8))
    assert sum(isinstance(i, isa.CtrlBitwidth) for i in b.program) == 1
    with pytest.raises(MappingError):
        b.set(shift=1 << 22)


def test_dma_split_into_length_field_chunks():
    b = ProgramBuilder()
    b.dma("load", 0, 0, 5000)
    tiles = [i for i in b.program if isinstance(i, isa.LoadTile)]
    assert [t.length for t in tiles] == [4095, 905]
    assert (tiles[1].bank_start, tiles[1].bank_offset) == divmod(4095, 1024)
    addrs = [i.value for i in b.program if isinstance(i, isa.SetReg)]
    assert addrs == [4095]


def _run_gather(moves, bits=8, words=4):
    """Gather through the shuffle fabric and return the destination elements."""
    b = ProgramBuilder(kind="gather")
    cfg = BitwidthConfig(bits, bits)
    b.bitwidth(cfg)
    per = 64 // bits
    src = b.tensor("src", bits, 32 * per, "input", prefer="signal")
    dst = b.tensor("dst", bits, words * per, "output", prefer="signal")
    g = GatherBuilder(words)
    for d, s in moves:
        g.move(d, bits, src.address, s)
    b.gather(dst.address, g.outputs())
    program, plan = b.finish()
    assert plan.validate(program) == []
    source = np.arange(32 * per) % (1 << (bits - 1))
    outputs, _ = run(program, plan, {"src": source})
    return source, outputs["dst"]


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(0, 8 * 8 - 1), min_size=32, max_size=32))
def test_gather_places_every_element(picks):
    # destination word j draws from source words near 2j, well inside one window
    moves = [(d, min(picks[d] % 64 + 16 * (d // 8), 32 * 8 - 1)) for d in range(32)]
    source, out = _run_gather(moves)
    for d, s in moves:
        assert out[d] == source[s]


def test_gather_padding_slots():
    b = ProgramBuilder(kind="gather")
    b.bitwidth(BitwidthConfig(16, 16))
    src = b.tensor("src", 16, 8, "input", prefer="signal")
    dst = b.tensor("dst", 16, 4, "output", prefer="signal")
    g = GatherBuilder(1)
    g.move(2, 16, src.address, 5)
    g.move(3, 16, src.address, 0)
    g.padding[0] = ((0, 1), (1, 0xFFFF))
    b.gather(dst.address, g.outputs())
    program, plan = b.finish()
    outputs, _ = run(program, plan, {"src": [10, 11, 12, 13, 14, 15, 16, 17]})
    assert outputs["dst"].tolist() == [1, -1, 15, 10]


def test_gather_from_distant_words():
    # source words 0, 20 and 31 are staged next to each other
    moves = [(0, 0), (1, 8 * 20), (2, 255), (8, 7)]
    source, out = _run_gather(moves)
    assert [out[d] for d, _ in moves] == [source[s] for _, s in moves]


def test_validate_reports_problems():
    plan = TensorPlan("x", BitwidthConfig())
    program = isa.assemble("shuffle-exec src=0 dst=0 count=1 step=0\nconv-exec relu=0")
    problems = plan.validate(program)
    assert any("halt" in p for p in problems)
    assert any("armed" in p for p in problems)
    assert any("fmap-base" in p for p in problems)


def test_plan_save_and_load(tmp_path):
    program, plan = map_fir(4, 16, "8x8", coefficients=[1, 2, 3, 4])
    plan.save(str(tmp_path))
    loaded = TensorPlan.load(str(tmp_path))
    assert loaded.tensors == plan.tensors
    assert loaded.constants == plan.constants
    assert loaded.notes == plan.notes
    assert loaded.validate(program) == []


# -- mapping entry points ------------------------------------------------------------

@pytest.mark.parametrize("n, cfg", [(12, "16x16"), (1, "16x16"), (8192, "16x16"), (64, "4x4"), (64, "16x8")])
def test_fft_rejects_bad_sizes_and_widths(n, cfg):
    with pytest.raises(MappingError):
        map_fft(n, cfg)


def test_fft_rejects_wrong_twiddle_count():
    with pytest.raises(MappingError):
        map_fft(8, "16x16", twiddles=[[1, 0]])


def test_fir_argument_checks():
    with pytest.raises(MappingError):
        map_fir(8, 4, "8x8")
    with pytest.raises(MappingError):
        map_fir(2, 8, "8x8", coefficients=[1, 2, 3])
    with pytest.raises(MappingError):
        map_fir(2, 8, "8x4", coefficients=[1, 9])


def test_fir_program_shape():
    program, plan = map_fir(8, 200, "8x8")
    assert isinstance(program[len(program) - 1], isa.Halt)
    assert sum(isinstance(i, isa.ConvExec) for i in program) == 1
    assert plan.inputs == ["fir.x"] and plan.outputs == ["fir.y"]
    assert plan.validate(program) == []


def test_conv_layer_tiles_when_too_big():
    small = ConvLayer(8, 8, 4, 8, pad_h=1)
    big = ConvLayer(64, 64, 32, 64, pad_h=1)
    program, plan = map_conv_layer(small, "8x8")
    assert not any(isinstance(i, isa.LoadTile) for i in program)
    program, plan = map_conv_layer(big, "8x8")
    assert any(isinstance(i, isa.LoadTile) for i in program)
    assert plan.tensors["conv.y"].space == "offchip"
    assert "conv" in plan.notes["tiling"]


def test_network_with_pool_is_timing_only():
    program, plan = map_workload(Workload("network", network="tiny_vgg"))
    assert not plan.functional
    assert plan.mult_adds == count_mult_adds(Workload("network", network="tiny_vgg"))


def test_wide_fc_layer_gets_leftover_buffer():
    # 3072 inputs at 16 bits: eight kernels need 6144 of the 16384 main words
    program, plan = map_workload(Workload("network", "16x16", network="tiny_vgg"))
    assert plan.notes["tiling"]["tiny_vgg.10.fc10"] == {"rows": 1, "kernels": 16}
    assert plan.notes["tiling"]["tiny_vgg.11.fc11"] == {"rows": 1, "kernels": 10}
    assert plan.validate(program) == []


def test_network_without_pool_is_functional():
    program, plan = map_workload(Workload("network", network="toy_cnn", cfg="8x8"))
    assert plan.functional
    assert plan.outputs == ["toy_cnn.1.conv1.y"]


def test_single_stage_pipeline_matches_plain_mapping():
    plain_program, plain_plan = map_fft(64, "16x16")
    pipe_program, pipe_plan = map_pipeline([Workload("fft", points=64)])
    assert list(plain_program) == list(pipe_program)
    x = np.arange(64) - 32 + 1j * np.arange(64)[::-1]
    plain, _ = run(plain_program, plain_plan, {"fft.x": x})
    piped, _ = run(pipe_program, pipe_plan, {"s0.fft.x": x})
    assert np.array_equal(plain["fft.y"], piped["s0.fft.y"])


def test_pipeline_width_mismatch():
    stages = [Workload("fft", points=64, cfg="16x16"), Workload("fir", taps=4, length=128, cfg="8x8")]
    with pytest.raises(MappingError):
        map_pipeline(stages)


def test_mapping_fails_on_small_machine():
    tiny = MachineConfig(bank_count=2, bank_bytes=1024, signal_banks=(1,))
    with pytest.raises(MappingError):
        map_fft(1024, "16x16", tiny)

import struct

import pytest
from hypothesis import given, strategies as st

import isa
from errors import AssemblyError, DecodeError, OperandRangeError


def instructions():
    """Any encodable instruction."""
    def build(cls):
        if not cls.FIELDS:
            return st.just(cls())
        kwargs = {}
        for f in cls.FIELDS:
            if f.kind == "bool":
                kwargs[f.name] = st.booleans()
            elif f.kind == "width":
                kwargs[f.name] = st.sampled_from([4, 8, 16])
            elif f.kind == "reg":
                kwargs[f.name] = st.integers(0, len(isa.REGISTERS) - 1)
            else:
                kwargs[f.name] = st.integers(0, (1 << f.bits) - 1)
        return st.builds(cls, **kwargs)
    return st.one_of([build(cls) for cls in isa.VARIANTS])


@given(instructions())
def test_decode_inverts_encode(ins):
    word = isa.encode(ins)
    assert 0 <= word < 1 << 32
    assert isa.decode(word) == ins


@given(instructions())
def test_text_form_reassembles(ins):
    program = isa.assemble(isa.format_instruction(ins))
    assert list(program) == [ins]


def test_opcode_in_top_five_bits():
    assert isa.encode(isa.Halt()) == 0
    assert isa.encode(isa.ConvExec(relu=True)) == (8 << 27) | 1
    # fields LSB-first: bank-start, then bank-offset, then length
    assert isa.encode(isa.RdBuf(1, 2, 3)) == (1 << 27) | 1 | (2 << 5) | (3 << 15)


def test_field_limits():
    isa.RdBuf(31, 1023, 127)
    with pytest.raises(OperandRangeError):
        isa.RdBuf(32, 0, 1)
    with pytest.raises(OperandRangeError):
        isa.CtrlBitwidth(32, 8)
    with pytest.raises(OperandRangeError):
        isa.CtrlShuffling(16, 0, 0, False)
    with pytest.raises(OperandRangeError):
        isa.CtrlShuffling(0, 0, 0, 1)


def test_reserved_width_code_rejected():
    word = (isa.CtrlBitwidth.OPCODE << 27) | 0b11
    with pytest.raises(DecodeError):
        isa.decode(word)


def test_unknown_opcode_and_stray_bits_rejected():
    with pytest.raises(DecodeError):
        isa.decode(31 << 27)
    with pytest.raises(DecodeError):
        isa.decode(1 << 26)  # halt with a payload bit
    with pytest.raises(DecodeError):
        isa.decode((isa.SetReg.OPCODE << 27) | len(isa.REGISTERS))


def test_program_binary_is_little_endian():
    program = isa.assemble("conv-exec relu=1\nhalt\n")
    data = isa.encode_program(program)
    assert data == struct.pack("<2I", (8 << 27) | 1, 0)
    assert list(isa.decode_program(data)) == list(program)
    with pytest.raises(DecodeError):
        isa.decode_program(data[:5])


def test_assembler_syntax():
    program = isa.assemble("""
        # comment line
        RD-BUF bank-start=0x10 bank-offset=0 length=4   # trailing comment
        set-reg reg=shift value=7
        set-reg reg=3 value=12
    """)
    assert list(program) == [isa.RdBuf(16, 0, 4), isa.set_reg("shift", 7), isa.SetReg(3, 12)]
    assert program[1].name == "shift"


@pytest.mark.parametrize("source, line, column", [
    ("halt\nfrobnicate x=1", 2, 1),
    ("rd-buf bank-start=0 bank-offset=0", 1, 1),
    ("rd-buf bank-start=0 bank-offset=0 length=200", 1, 35),
    ("ctrl-padding position=1 value=zz", 1, 25),
    ("conv-exec relu=2", 1, 11),
    ("conv-exec relu", 1, 11),
    ("halt extra=1", 1, 6),
    ("ctrl-bitwidth a-bits=8 a-bits=8 w-bits=4", 1, 24),
])
def test_assembly_errors_carry_position(source, line, column):
    with pytest.raises(AssemblyError) as exc:
        isa.assemble(source)
    assert exc.value.line == line
    assert exc.value.column == column


def test_unknown_register_name():
    with pytest.raises(AssemblyError):
        isa.assemble("set-reg reg=nope value=1")
    with pytest.raises(OperandRangeError):
        isa.set_reg("nope", 1)


def test_disassemble_names_registers(fixture):
    with open(fixture("programs", "diagonal_gather.asm")) as f:
        program = isa.assemble(f.read())
    text = isa.disassemble(program)
    assert text.splitlines()[0] == "ctrl-bitwidth a-bits=8 w-bits=8"
    assert list(isa.assemble(text)) == list(program)
    assert isa.format_instruction(isa.set_reg("out-offset", 5)) == "set-reg reg=out-offset value=5"


def test_gather_fixture_configures_each_unit_once(fixture):
    with open(fixture("programs", "diagonal_gather.asm")) as f:
        program = isa.assemble(f.read())
    units = [i for i in program if isinstance(i, isa.CtrlShuffling)]
    assert [u.unit_num for u in units] == list(range(16))
    assert [u.finish_flag for u in units].count(True) == 1 and units[-1].finish_flag
    # four units per 16-bit segment, one source word each
    assert [u.sel_code for u in units] == [s for s in range(4) for _ in range(4)]
    steps = [type(i) for i in program if not isinstance(i, (isa.CtrlShuffling, isa.CtrlBitwidth,
                                                             isa.ShuffleExec, isa.Halt))]
    assert steps == [isa.RdBuf, isa.CtrlPadding, isa.WrBuf]
    assert len(steps) + 4 == 7
    assert len(program) == 22

"""Instruction set: the five shuffling instructions plus tensor plumbing.

Every instruction is one 32-bit word. The opcode sits in bits [31:27] and
the remaining fields are packed LSB-first in declaration order. Programs
are stored as little-endian sequences of those words.

Assembly is one instruction per line, a mnemonic followed by key=value
operands, with '#' starting a comment::

    rd-buf bank-start=1 bank-offset=0 length=4
    ctrl-shuffling unit=3 sel=5 split=12 finish=0
"""
import logging
import re
import struct
from dataclasses import dataclass, field, fields

from errors import AssemblyError, DecodeError, OperandRangeError

log = logging.getLogger(__name__)

OPCODE_SHIFT = 27
OPCODE_BITS = 5
PAYLOAD_BITS = OPCODE_SHIFT

WIDTH_CODES = {4: 0b00, 8: 0b01, 16: 0b10}
CODE_WIDTHS = {v: k for k, v in WIDTH_CODES.items()}

# Tensor-engine register file written by set-reg. Six addresses do not fit a
# 32-bit word, so conv-exec and the DMA tiles read their operands from here.
REGISTERS = (
    "dma-addr",       # off-chip address in 8-byte words
    "fmap-base",      # on-chip word address of the feature map
    "weight-base",
    "out-base",
    "out-rows",       # output rows (height)
    "out-cols",       # output channels, one per kernel
    "k-len",          # dot-product length = kernel-h * kernel-w * fmap-c
    "fmap-h",
    "fmap-w",
    "fmap-c",
    "fmap-pitch",     # elements between feature-map rows, 0 = fmap-w * fmap-c
    "kernel-h",
    "kernel-w",
    "stride",
    "pad-top",
    "pad-left",
    "out-w",
    "out-y-stride",   # 0 = out-w * out-cols
    "out-x-stride",   # 0 = out-cols
    "out-m-stride",   # 0 = 1
    "shift",          # requantization right shift
    "out-bits",       # 0 = activation width
    "weight-stride",  # elements between kernels, 0 = k-len
    "out-offset",     # element offset added to every output index
)
REGISTER_INDEX = {name: i for i, name in enumerate(REGISTERS)}
RESET_VALUES = {name: 0 for name in REGISTERS}
RESET_VALUES.update({
    "out-rows": 1, "out-cols": 1, "k-len": 1, "fmap-h": 1, "fmap-w": 1,
    "fmap-c": 1, "kernel-h": 1, "kernel-w": 1, "stride": 1, "out-w": 1,
})


@dataclass(frozen=True)
class Field:
    name: str       # dataclass attribute
    key: str        # assembly operand key
    bits: int
    kind: str = "uint"   # uint | bool | width | reg


class Instruction:
    """Base for all instruction variants."""
    OPCODE = None
    MNEMONIC = None
    FIELDS = ()

    def __post_init__(self):
        for f in self.FIELDS:
            check_field(f, getattr(self, f.name))

    def values(self):
        return tuple(getattr(self, f.name) for f in self.FIELDS)


def check_field(f, value):
    if f.kind == "bool":
        if not isinstance(value, bool):
            raise OperandRangeError(f"{f.key} must be a boolean, got {value!r}")
        return
    if f.kind == "width":
        if value not in WIDTH_CODES:
            raise OperandRangeError(f"{f.key} must be one of 4, 8, 16, got {value!r}")
        return
    if isinstance(value, bool) or not isinstance(value, int):
        raise OperandRangeError(f"{f.key} must be an integer, got {value!r}")
    limit = len(REGISTERS) if f.kind == "reg" else 1 << f.bits
    if not 0 <= value < limit:
        raise OperandRangeError(f"{f.key} out of range 0..{limit - 1}: {value}")


@dataclass(frozen=True)
class Halt(Instruction):
    OPCODE = 0
    MNEMONIC = "halt"
    FIELDS = ()


@dataclass(frozen=True)
class RdBuf(Instruction):
    bank_start: int
    bank_offset: int
    length: int
    OPCODE = 1
    MNEMONIC = "rd-buf"
    FIELDS = (Field("bank_start", "bank-start", 5), Field("bank_offset", "bank-offset", 10),
              Field("length", "length", 7))


@dataclass(frozen=True)
class WrBuf(Instruction):
    bank_start: int
    bank_offset: int
    length: int
    OPCODE = 2
    MNEMONIC = "wr-buf"
    FIELDS = RdBuf.FIELDS


@dataclass(frozen=True)
class CtrlBitwidth(Instruction):
    a_bits: int
    w_bits: int
    OPCODE = 3
    MNEMONIC = "ctrl-bitwidth"
    FIELDS = (Field("a_bits", "a-bits", 2, "width"), Field("w_bits", "w-bits", 2, "width"))


@dataclass(frozen=True)
class CtrlShuffling(Instruction):
    unit_num: int
    sel_code: int
    split_code: int
    finish_flag: bool
    OPCODE = 4
    MNEMONIC = "ctrl-shuffling"
    FIELDS = (Field("unit_num", "unit", 4), Field("sel_code", "sel", 4),
              Field("split_code", "split", 4), Field("finish_flag", "finish", 1, "bool"))


@dataclass(frozen=True)
class CtrlPadding(Instruction):
    position: int
    value: int
    OPCODE = 5
    MNEMONIC = "ctrl-padding"
    FIELDS = (Field("position", "position", 4), Field("value", "value", 16))


@dataclass(frozen=True)
class LoadTile(Instruction):
    """Off-chip -> on-chip copy of `length` words; source address from dma-addr."""
    bank_start: int
    bank_offset: int
    length: int
    OPCODE = 6
    MNEMONIC = "load-tile"
    FIELDS = (Field("bank_start", "bank-start", 5), Field("bank_offset", "bank-offset", 10),
              Field("length", "length", 12))


@dataclass(frozen=True)
class StoreTile(Instruction):
    bank_start: int
    bank_offset: int
    length: int
    OPCODE = 7
    MNEMONIC = "store-tile"
    FIELDS = LoadTile.FIELDS


@dataclass(frozen=True)
class ConvExec(Instruction):
    relu: bool = False
    OPCODE = 8
    MNEMONIC = "conv-exec"
    FIELDS = (Field("relu", "relu", 1, "bool"),)


@dataclass(frozen=True)
class ShuffleExec(Instruction):
    """Run the DSU+DPU over `word_count` windows of staged input.

    Window j covers staged words src_base + j*src_step .. +15 and its result
    lands in output slot dst_base + j.
    """
    src_base: int
    dst_base: int
    word_count: int
    src_step: int = 1
    OPCODE = 9
    MNEMONIC = "shuffle-exec"
    FIELDS = (Field("src_base", "src", 7), Field("dst_base", "dst", 7),
              Field("word_count", "count", 7), Field("src_step", "step", 6))


@dataclass(frozen=True)
class SetReg(Instruction):
    reg: int
    value: int
    OPCODE = 10
    MNEMONIC = "set-reg"
    FIELDS = (Field("reg", "reg", 5, "reg"), Field("value", "value", 22))

    @property
    def name(self):
        return REGISTERS[self.reg]


VARIANTS = (Halt, RdBuf, WrBuf, CtrlBitwidth, CtrlShuffling, CtrlPadding,
            LoadTile, StoreTile, ConvExec, ShuffleExec, SetReg)
BY_OPCODE = {cls.OPCODE: cls for cls in VARIANTS}
BY_MNEMONIC = {cls.MNEMONIC: cls for cls in VARIANTS}
SHUFFLING_OPS = (RdBuf, WrBuf, CtrlBitwidth, CtrlShuffling, CtrlPadding)


def set_reg(name, value):
    try:
        return SetReg(REGISTER_INDEX[name], value)
    except KeyError:
        raise OperandRangeError(f"unknown register {name!r}") from None


@dataclass
class Program:
    """Ordered instruction list; positions are kept for diagnostics only."""
    instructions: list = field(default_factory=list)
    positions: list = field(default_factory=list, compare=False, repr=False)

    def __len__(self):
        return len(self.instructions)

    def __iter__(self):
        return iter(self.instructions)

    def __getitem__(self, i):
        return self.instructions[i]

    def append(self, instruction, position=None):
        self.instructions.append(instruction)
        self.positions.append(position)

    def extend(self, instructions):
        for i in instructions:
            self.append(i)

    def position(self, index):
        if index < len(self.positions):
            return self.positions[index]
        return None


# -- binary ------------------------------------------------------------------

def _raw(f, value):
    if f.kind == "bool":
        return int(value)
    if f.kind == "width":
        return WIDTH_CODES[value]
    return value


def encode(instruction):
    """Pack one instruction into a 32-bit word."""
    word = instruction.OPCODE << OPCODE_SHIFT
    shift = 0
    for f in instruction.FIELDS:
        word |= _raw(f, getattr(instruction, f.name)) << shift
        shift += f.bits
    return word


def decode(word):
    """Unpack a 32-bit word; raises DecodeError for anything encode() cannot produce."""
    if not 0 <= word < (1 << 32):
        raise DecodeError(f"not a 32-bit word: {word!r}")
    opcode = word >> OPCODE_SHIFT
    cls = BY_OPCODE.get(opcode)
    if cls is None:
        raise DecodeError(f"unknown opcode {opcode} in word 0x{word:08x}")
    payload = word & ((1 << PAYLOAD_BITS) - 1)
    values = {}
    shift = 0
    for f in cls.FIELDS:
        raw = (payload >> shift) & ((1 << f.bits) - 1)
        shift += f.bits
        if f.kind == "bool":
            values[f.name] = bool(raw)
        elif f.kind == "width":
            if raw not in CODE_WIDTHS:
                raise DecodeError(f"{f.key} code {raw:02b} is reserved in word 0x{word:08x}")
            values[f.name] = CODE_WIDTHS[raw]
        elif f.kind == "reg" and raw >= len(REGISTERS):
            raise DecodeError(f"register index {raw} undefined in word 0x{word:08x}")
        else:
            values[f.name] = raw
    if payload >> shift:
        raise DecodeError(f"reserved bits set in {cls.MNEMONIC} word 0x{word:08x}")
    return cls(**values)


def encode_program(program):
    """Little-endian byte image of a program."""
    words = [encode(i) for i in program]
    return struct.pack(f"<{len(words)}I", *words)


def decode_program(data):
    if len(data) % 4:
        raise DecodeError(f"binary length {len(data)} is not a multiple of 4")
    program = Program()
    for index, (word,) in enumerate(struct.iter_unpack("<I", data)):
        try:
            program.append(decode(word), (index + 1, None))
        except DecodeError as e:
            raise DecodeError(f"word {index}: {e}") from e
    return program


# -- text --------------------------------------------------------------------

_TOKEN = re.compile(r"\S+")


def _parse_number(text):
    return int(text, 0)


def _parse_operand(f, text):
    if f.kind == "reg":
        if text in REGISTER_INDEX:
            return REGISTER_INDEX[text]
        value = _parse_number(text)
        if not 0 <= value < len(REGISTERS):
            raise OperandRangeError(f"reg out of range 0..{len(REGISTERS) - 1}: {value}")
        return value
    value = _parse_number(text)
    if f.kind == "bool":
        if value not in (0, 1):
            raise OperandRangeError(f"{f.key} must be 0 or 1, got {value}")
        return bool(value)
    return value


def assemble(source):
    """Parse assembly text into a Program."""
    program = Program()
    for lineno, line in enumerate(source.splitlines(), start=1):
        code = line.split("#", 1)[0]
        tokens = [(m.group(), m.start() + 1) for m in _TOKEN.finditer(code)]
        if not tokens:
            continue
        mnemonic, col = tokens[0]
        cls = BY_MNEMONIC.get(mnemonic.lower())
        if cls is None:
            raise AssemblyError(f"unknown mnemonic {mnemonic!r}", lineno, col)
        by_key = {f.key: f for f in cls.FIELDS}
        values = {}
        for token, tcol in tokens[1:]:
            key, eq, text = token.partition("=")
            if not eq or not text:
                raise AssemblyError(f"operand {token!r} is not key=value", lineno, tcol)
            f = by_key.get(key.lower())
            if f is None:
                raise AssemblyError(f"{mnemonic} has no operand {key!r}", lineno, tcol)
            if f.name in values:
                raise AssemblyError(f"operand {key!r} given twice", lineno, tcol)
            try:
                value = _parse_operand(f, text)
                check_field(f, value)
            except OperandRangeError as e:
                raise AssemblyError(str(e), lineno, tcol) from e
            except ValueError:
                raise AssemblyError(f"bad number {text!r} for {key}", lineno, tcol) from None
            values[f.name] = value
        missing = [f.key for f in cls.FIELDS if f.name not in values]
        if missing:
            raise AssemblyError(f"{mnemonic} missing operand(s): {', '.join(missing)}", lineno, col)
        program.append(cls(**values), (lineno, col))
    log.debug("assembled %d instructions", len(program))
    return program


def format_instruction(instruction):
    parts = [instruction.MNEMONIC]
    for f in instruction.FIELDS:
        value = getattr(instruction, f.name)
        if f.kind == "bool":
            text = str(int(value))
        elif f.kind == "reg":
            text = REGISTERS[value]
        else:
            text = str(value)
        parts.append(f"{f.key}={text}")
    return " ".join(parts)


def disassemble(program):
    return "\n".join(format_instruction(i) for i in program)

"""Programmable shuffling fabric: BCIF staging, DSU and DPU.

A Word64 is a plain int in [0, 2**64). Nibble i occupies bits [4i, 4i+3].
The DSU has 16 units; unit i picks nibble `split_code` of staged word
`sel_code` and drives output nibble i. The DPU then overwrites selected
element slots with constants.
"""
import logging
from dataclasses import dataclass, field

from errors import MemoryFault, OperandRangeError, ShuffleError

log = logging.getLogger(__name__)

UNITS = 16
WINDOW = 16
WORD_MASK = (1 << 64) - 1


def nibble(word, index):
    return (word >> (4 * index)) & 0xF


def set_nibble(word, index, value):
    shift = 4 * index
    return (word & ~(0xF << shift) & WORD_MASK) | ((value & 0xF) << shift)


def nibbles(word):
    return [nibble(word, i) for i in range(16)]


def from_nibbles(values):
    word = 0
    for i, v in enumerate(values):
        word |= (v & 0xF) << (4 * i)
    return word


@dataclass(frozen=True)
class ShuffleUnitConfig:
    sel_code: int
    split_code: int

    def __post_init__(self):
        if not (0 <= self.sel_code < 16 and 0 <= self.split_code < 16):
            raise OperandRangeError(f"shuffle unit config out of range: {self}")


@dataclass
class ShuffleArrayConfig:
    """Per-unit configuration; a unit is unconfigured while its entry is None."""
    units: list = field(default_factory=lambda: [None] * UNITS)
    armed: bool = False

    @classmethod
    def from_pairs(cls, pairs):
        cfg = cls([ShuffleUnitConfig(s, p) for s, p in pairs], armed=True)
        if len(cfg.units) != UNITS:
            raise OperandRangeError(f"need {UNITS} unit configs, got {len(cfg.units)}")
        return cfg

    def configure(self, unit, sel, split, finish):
        if not 0 <= unit < UNITS:
            raise OperandRangeError(f"unit out of range: {unit}")
        self.units[unit] = ShuffleUnitConfig(sel, split)
        if finish:
            missing = [i for i, u in enumerate(self.units) if u is None]
            if missing:
                raise ShuffleError(f"finish flag with unconfigured units {missing}")
            self.armed = True
        else:
            self.armed = False

    @property
    def complete(self):
        return all(u is not None for u in self.units)


def element_slots(element_width):
    if element_width not in (4, 8, 16):
        raise OperandRangeError(f"element width must be 4, 8 or 16, got {element_width}")
    return 64 // element_width


@dataclass
class PaddingConfig:
    element_width: int = 8
    values: dict = field(default_factory=dict)   # slot -> value

    def __post_init__(self):
        slots = element_slots(self.element_width)
        for slot, value in self.values.items():
            self._check(slot, value, slots)

    def _check(self, slot, value, slots):
        if not 0 <= slot < slots:
            raise OperandRangeError(
                f"padding slot {slot} invalid for {self.element_width}-bit elements (0..{slots - 1})")
        if not 0 <= value < (1 << self.element_width):
            raise OperandRangeError(
                f"padding value {value} exceeds {self.element_width}-bit element width")

    def add(self, slot, value):
        self._check(slot, value, element_slots(self.element_width))
        self.values[slot] = value

    @property
    def mask(self):
        return sorted(self.values)


def shuffle_unit(inputs, cfg):
    return nibble(inputs[cfg.sel_code], cfg.split_code)


def shuffle_step(inputs, cfg):
    if len(inputs) != WINDOW:
        raise ShuffleError(f"shuffle step needs {WINDOW} input words, got {len(inputs)}")
    if not cfg.complete or not cfg.armed:
        raise ShuffleError("shuffle array not fully configured (finish flag not asserted)")
    out = 0
    for i, unit in enumerate(cfg.units):
        out |= shuffle_unit(inputs, unit) << (4 * i)
    return out


def pad(word, cfg):
    width = cfg.element_width
    mask = (1 << width) - 1
    for slot, value in cfg.values.items():
        if value > mask:
            raise OperandRangeError(f"padding value {value} exceeds {width}-bit element")
        shift = slot * width
        word = (word & ~(mask << shift) & WORD_MASK) | (value << shift)
    return word


@dataclass
class BcifRegisterFile:
    """Read/write descriptors plus the staging buffer.

    Region A (first half) receives rd-buf data, region B (second half)
    receives shuffled words and is drained by wr-buf.
    """
    capacity: int = 64
    read_desc: tuple = (0, 0, 0)
    write_desc: tuple = (0, 0, 0)
    staging: list = None
    fill: int = 0          # words staged in region A
    produced: int = 0      # high-water mark of region B

    def __post_init__(self):
        if self.staging is None:
            self.staging = [0] * self.capacity

    @property
    def half(self):
        return self.capacity // 2

    def region_a(self):
        return self.staging[:self.half]

    def region_b(self):
        return self.staging[self.half:]

    def reset(self):
        self.fill = 0
        self.produced = 0


def _word_address(buffer, bank_start, bank_offset):
    if not 0 <= bank_start < buffer.bank_count:
        raise MemoryFault(f"bank {bank_start} outside 0..{buffer.bank_count - 1}")
    if not 0 <= bank_offset < buffer.bank_words:
        raise MemoryFault(f"bank offset {bank_offset} beyond bank size {buffer.bank_words}")
    return bank_start * buffer.bank_words + bank_offset


def bcif_read(buffer, rf):
    """Stage `length` words from the read descriptor into region A."""
    bank_start, bank_offset, length = rf.read_desc
    base = _word_address(buffer, bank_start, bank_offset)
    if rf.fill + length > rf.half:
        raise ShuffleError(f"staging overflow: {rf.fill} + {length} words > {rf.half}")
    words = buffer.read_words(base, length)
    rf.staging[rf.fill:rf.fill + length] = words
    rf.fill += length
    return words


def bcif_write(buffer, rf):
    """Drain region B to the write descriptor."""
    bank_start, bank_offset, length = rf.write_desc
    base = _word_address(buffer, bank_start, bank_offset)
    if length > rf.half:
        raise ShuffleError(f"write of {length} words exceeds staging region ({rf.half})")
    words = rf.region_b()[:length]
    buffer.write_words(base, words)
    return words


class ShuffleFabric:
    """DSU + DPU + BCIF state driven by the engine."""

    def __init__(self, staging_words=64):
        self.rf = BcifRegisterFile(capacity=staging_words)
        self.array = ShuffleArrayConfig()
        self.padding = PaddingConfig()

    def set_element_width(self, width):
        # pending padding entries are dropped on a width change
        self.padding = PaddingConfig(width)

    def read(self, buffer, bank_start, bank_offset, length):
        self.rf.read_desc = (bank_start, bank_offset, length)
        return bcif_read(buffer, self.rf)

    def write(self, buffer, bank_start, bank_offset, length):
        self.rf.write_desc = (bank_start, bank_offset, length)
        words = bcif_write(buffer, self.rf)
        self.rf.reset()
        return words

    def configure(self, unit, sel, split, finish):
        self.array.configure(unit, sel, split, finish)

    def add_padding(self, position, value):
        self.padding.add(position, value)

    def execute(self, src_base, dst_base, word_count, src_step):
        """Shuffle and pad `word_count` windows; padding entries are consumed."""
        half = self.rf.half
        last_window = src_base + (word_count - 1) * src_step + WINDOW if word_count else 0
        if word_count and last_window > half:
            raise ShuffleError(f"shuffle window reaches staged word {last_window - 1}, region A holds {half}")
        if dst_base + word_count > half:
            raise ShuffleError(f"shuffle output {dst_base}+{word_count} exceeds region B ({half})")
        region_a = self.rf.region_a()
        for j in range(word_count):
            start = src_base + j * src_step
            word = shuffle_step(region_a[start:start + WINDOW], self.array)
            word = pad(word, self.padding)
            self.rf.staging[half + dst_base + j] = word
        self.rf.produced = max(self.rf.produced, dst_base + word_count)
        self.padding = PaddingConfig(self.padding.element_width)
        return word_count

"""On-chip data buffer, off-chip memory and the DMA engine.

Both memories are zero-initialised. The on-chip buffer is a flat array of
64-bit words split into equal banks; the last two banks form the 16 KB
signal-processing region. Word addresses are used internally, byte
addresses (multiples of 8) at the read_word/write_word surface.
"""
import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from config import DEFAULT_MACHINE, WORD_BYTES
from errors import MemoryFault, OperandRangeError

log = logging.getLogger(__name__)


# -- element packing ----------------------------------------------------------

def pack_elements(values, bits):
    """Pack signed integers of `bits` width into little-endian 64-bit words."""
    per_word = 64 // bits
    values = np.asarray(values, dtype=np.int64).ravel()
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    if values.size and (values.min() < lo or values.max() > hi):
        raise OperandRangeError(f"value outside {bits}-bit signed range")
    count = -(-values.size // per_word)
    padded = np.zeros(count * per_word, dtype=np.uint64)
    padded[:values.size] = (values & ((1 << bits) - 1)).astype(np.uint64)
    shifts = (np.arange(per_word, dtype=np.uint64) * np.uint64(bits))
    lanes = padded.reshape(count, per_word) << shifts
    return np.bitwise_or.reduce(lanes, axis=1) if count else np.zeros(0, dtype=np.uint64)


def unpack_elements(words, bits, count=None, signed=True):
    per_word = 64 // bits
    words = np.asarray(words, dtype=np.uint64)
    shifts = np.arange(per_word, dtype=np.uint64) * np.uint64(bits)
    raw = ((words[:, None] >> shifts) & np.uint64((1 << bits) - 1)).astype(np.int64).ravel()
    if count is not None:
        raw = raw[:count]
    if signed:
        raw = np.where(raw >= (1 << (bits - 1)), raw - (1 << bits), raw)
    return raw


def words_for(count, bits):
    return -(-count * bits // 64)


class OnChipBuffer:
    def __init__(self, machine=DEFAULT_MACHINE):
        self.bank_count = machine.bank_count
        self.bank_words = machine.bank_words
        self.signal_banks = tuple(machine.signal_banks)
        self.words = np.zeros(machine.onchip_words, dtype=np.uint64)

    @property
    def size_words(self):
        return self.words.size

    @property
    def size_bytes(self):
        return self.words.size * WORD_BYTES

    def address(self, bank_start, bank_offset):
        return bank_start * self.bank_words + bank_offset

    def split(self, word_addr):
        return divmod(word_addr, self.bank_words)

    def signal_region(self):
        """(first word, word count) of the signal-processing banks."""
        first = min(self.signal_banks) * self.bank_words
        return first, len(self.signal_banks) * self.bank_words

    def _check(self, word_addr, count):
        if word_addr < 0 or count < 0 or word_addr + count > self.words.size:
            raise MemoryFault(
                f"on-chip access [{word_addr}, {word_addr + count}) outside 0..{self.words.size}")

    def read_words(self, word_addr, count):
        self._check(word_addr, count)
        return [int(w) for w in self.words[word_addr:word_addr + count]]

    def write_words(self, word_addr, words):
        self._check(word_addr, len(words))
        self.words[word_addr:word_addr + len(words)] = np.asarray(
            [int(w) for w in words], dtype=np.uint64)

    def read_word(self, addr):
        if addr % WORD_BYTES:
            raise MemoryFault(f"unaligned on-chip address 0x{addr:x}")
        return self.read_words(addr // WORD_BYTES, 1)[0]

    def write_word(self, addr, word):
        if addr % WORD_BYTES:
            raise MemoryFault(f"unaligned on-chip address 0x{addr:x}")
        self.write_words(addr // WORD_BYTES, [word])

    def read_elements(self, word_addr, start, count, bits, signed=True):
        """Elements [start, start+count) of a region beginning at word_addr."""
        if count == 0:
            return np.zeros(0, dtype=np.int64)
        per_word = 64 // bits
        first = word_addr + start // per_word
        last = word_addr + (start + count - 1) // per_word
        self._check(first, last - first + 1)
        values = unpack_elements(self.words[first:last + 1], bits, signed=signed)
        skip = start % per_word
        return values[skip:skip + count]

    def gather_elements(self, word_addr, indices, bits):
        """Signed elements at arbitrary element indices of a region."""
        indices = np.asarray(indices, dtype=np.int64)
        per_word = 64 // bits
        word_idx = word_addr + indices // per_word
        if indices.size:
            self._check(int(word_idx.min()), int(word_idx.max() - word_idx.min()) + 1)
        shifts = ((indices % per_word) * bits).astype(np.uint64)
        raw = ((self.words[word_idx] >> shifts) & np.uint64((1 << bits) - 1)).astype(np.int64)
        return np.where(raw >= (1 << (bits - 1)), raw - (1 << bits), raw)

    def scatter_elements(self, word_addr, indices, values, bits):
        indices = np.asarray(indices, dtype=np.int64).ravel()
        values = np.asarray(values, dtype=np.int64).ravel()
        per_word = 64 // bits
        word_idx = word_addr + indices // per_word
        if indices.size:
            self._check(int(word_idx.min()), int(word_idx.max() - word_idx.min()) + 1)
        if not indices.size:
            return
        mask = np.uint64((1 << bits) - 1)
        shifts = ((indices % per_word) * bits).astype(np.uint64)
        raw = (values & ((1 << bits) - 1)).astype(np.uint64)
        # several elements may land in one word, so merge per word first
        touched, slot = np.unique(word_idx, return_inverse=True)
        clear = np.zeros(touched.size, dtype=np.uint64)
        fill = np.zeros(touched.size, dtype=np.uint64)
        np.bitwise_or.at(clear, slot, mask << shifts)
        np.bitwise_or.at(fill, slot, raw << shifts)
        self.words[touched] = (self.words[touched] & ~clear) | fill

    def write_elements(self, word_addr, values, bits):
        packed = pack_elements(values, bits)
        self.write_words(word_addr, packed.tolist())
        return packed.size


class OffChipMemory:
    def __init__(self, size_bytes=None, bandwidth_mb_s=1600.0, latency_cycles=20, machine=None):
        if machine is not None:
            size_bytes = machine.offchip_bytes
            bandwidth_mb_s = machine.bandwidth_mb_s
            latency_cycles = machine.dma_setup_cycles
        if bandwidth_mb_s is not None and bandwidth_mb_s < 0:
            raise OperandRangeError("bandwidth must be positive")
        self.data = np.zeros(size_bytes or DEFAULT_MACHINE.offchip_bytes, dtype=np.uint8)
        self.bandwidth_mb_s = bandwidth_mb_s
        self.latency_cycles = latency_cycles
        # bytes written by StoreTile during the current run
        self.stored = np.zeros(self.data.size, dtype=bool)

    @property
    def size_bytes(self):
        return self.data.size

    def _check(self, addr, length):
        if addr < 0 or length < 0 or addr + length > self.data.size:
            raise MemoryFault(f"off-chip access [{addr}, {addr + length}) outside 0..{self.data.size}")

    def read_bytes(self, addr, length):
        self._check(addr, length)
        return self.data[addr:addr + length].tobytes()

    def write_bytes(self, addr, payload):
        self._check(addr, len(payload))
        self.data[addr:addr + len(payload)] = np.frombuffer(payload, dtype=np.uint8)

    def read_word(self, addr):
        if addr % WORD_BYTES:
            raise MemoryFault(f"unaligned off-chip address 0x{addr:x}")
        return int.from_bytes(self.read_bytes(addr, WORD_BYTES), "little")

    def write_word(self, addr, word):
        if addr % WORD_BYTES:
            raise MemoryFault(f"unaligned off-chip address 0x{addr:x}")
        self.write_bytes(addr, int(word).to_bytes(WORD_BYTES, "little"))

    def write_elements(self, addr, values, bits):
        packed = pack_elements(values, bits)
        self.write_bytes(addr, packed.astype("<u8").tobytes())
        return packed.size * WORD_BYTES

    def read_elements(self, addr, count, bits):
        nbytes = words_for(count, bits) * WORD_BYTES
        words = np.frombuffer(self.read_bytes(addr, nbytes), dtype="<u8")
        return unpack_elements(words, bits, count)


@dataclass(frozen=True)
class DmaDescriptor:
    direction: str          # "load" (off-chip -> on-chip) or "store"
    dram_addr: int
    bank_start: int
    bank_offset: int
    length_bytes: int

    def __post_init__(self):
        if self.direction not in ("load", "store"):
            raise OperandRangeError(f"DMA direction must be load or store, got {self.direction!r}")
        if self.length_bytes < 0 or self.length_bytes % WORD_BYTES:
            raise OperandRangeError(f"DMA length {self.length_bytes} is not a multiple of {WORD_BYTES}")
        if self.dram_addr % WORD_BYTES:
            raise MemoryFault(f"unaligned DMA address 0x{self.dram_addr:x}")


def transfer_cycles(length_bytes, bandwidth_mb_s, frequency_mhz, setup_cycles):
    """setup + ceil(length / bytes_per_cycle); unlimited bandwidth costs setup only."""
    if not bandwidth_mb_s:
        return setup_cycles
    bytes_per_cycle = bandwidth_mb_s / frequency_mhz
    return setup_cycles + math.ceil(length_bytes / bytes_per_cycle)


class DmaEngine:
    def __init__(self, onchip, offchip, frequency_mhz=100.0):
        self.onchip = onchip
        self.offchip = offchip
        self.frequency_mhz = frequency_mhz
        self.bytes_moved = 0
        self.roundtrip_bytes = 0

    def transfer(self, desc, frequency_mhz=None):
        """Copy the described range; returns the cycles consumed."""
        freq = frequency_mhz or self.frequency_mhz
        words = desc.length_bytes // WORD_BYTES
        word_addr = self.onchip.address(desc.bank_start, desc.bank_offset)
        if not 0 <= desc.bank_start < self.onchip.bank_count or \
                not 0 <= desc.bank_offset < self.onchip.bank_words:
            raise MemoryFault(f"DMA bank address ({desc.bank_start}, {desc.bank_offset}) invalid")
        self.offchip._check(desc.dram_addr, desc.length_bytes)
        self.onchip._check(word_addr, words)
        if desc.direction == "load":
            payload = self.offchip.read_bytes(desc.dram_addr, desc.length_bytes)
            if words:
                self.onchip.words[word_addr:word_addr + words] = np.frombuffer(payload, dtype="<u8")
            span = self.offchip.stored[desc.dram_addr:desc.dram_addr + desc.length_bytes]
            self.roundtrip_bytes += int(span.sum())
        else:
            payload = self.onchip.words[word_addr:word_addr + words].astype("<u8").tobytes()
            self.offchip.write_bytes(desc.dram_addr, payload)
            self.offchip.stored[desc.dram_addr:desc.dram_addr + desc.length_bytes] = True
        self.bytes_moved += desc.length_bytes
        return transfer_cycles(desc.length_bytes, self.offchip.bandwidth_mb_s, freq,
                               self.offchip.latency_cycles)


# -- memory images -------------------------------------------------------------

def save_image(directory, segments, manifest_name="manifest.json"):
    """Write {name: (address, bytes)} as raw binaries plus a JSON manifest."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for name, (address, payload) in sorted(segments.items()):
        filename = f"{name}.bin"
        with open(os.path.join(directory, filename), "wb") as f:
            f.write(payload)
        entries.append({"name": name, "address": address, "length": len(payload), "file": filename})
    path = os.path.join(directory, manifest_name)
    with open(path, "w") as f:
        json.dump({"segments": entries}, f, indent=2)
    return path


def load_image(manifest_path):
    """Inverse of save_image: {name: (address, bytes)}."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    with open(manifest_path) as f:
        manifest = json.load(f)
    segments = {}
    for entry in manifest["segments"]:
        with open(os.path.join(base, entry.get("file", entry["name"] + ".bin")), "rb") as f:
            payload = f.read()
        if len(payload) != entry["length"]:
            raise MemoryFault(f"segment {entry['name']}: file holds {len(payload)} bytes, "
                              f"manifest says {entry['length']}")
        segments[entry["name"]] = (entry["address"], payload)
    return segments

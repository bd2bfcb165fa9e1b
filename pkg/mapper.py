"""Lowers workloads to instruction streams plus tensor placements.

Every mapped kernel becomes conv-exec calls on the computing array; data
rearrangement between calls (bit reversal, butterfly operand pairing,
building the twiddle matrices) is compiled into shuffling instructions.
The returned TensorPlan says where inputs, constants and outputs live so
the engine can preload and read them back.
"""
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

import isa
from config import DEFAULT_MACHINE, WORD_BYTES, fixture_path
from errors import MappingError, OperandRangeError
from mac_array import BitwidthConfig, value_range
from memory import load_image, pack_elements, save_image, unpack_elements, words_for
from shuffle_fabric import UNITS, WINDOW

log = logging.getLogger(__name__)

KINDS = ("fft", "fir", "dct2d", "dwt", "conv", "network", "pipeline")
MAX_FFT_POINTS = 4096
DCT_SIZE = 8
WAVELETS = {
    "haar": ([1 / math.sqrt(2), 1 / math.sqrt(2)], [1 / math.sqrt(2), -1 / math.sqrt(2)]),
    "db2": ([0.48296291314469025, 0.8365163037378079, 0.22414386804185735, -0.12940952255092145],
            [-0.12940952255092145, -0.22414386804185735, 0.8365163037378079, -0.48296291314469025]),
}


# -- layers and workloads ---------------------------------------------------------

@dataclass
class ConvLayer:
    in_h: int
    in_w: int
    in_c: int
    out_c: int
    kernel_h: int = 3
    kernel_w: int = None
    stride: int = 1
    pad_h: int = 0
    pad_w: int = None
    relu: bool = False
    shift: int = None
    kind: str = "conv"          # conv | fc | pool
    shortcut: bool = False      # consumes the block input, output not chained
    name: str = ""
    weights: list = None        # M x KH x KW x C ints, random when absent

    def __post_init__(self):
        if self.kernel_w is None:
            self.kernel_w = self.kernel_h
        if self.pad_w is None:
            self.pad_w = self.pad_h
        if self.kind not in ("conv", "fc", "pool"):
            raise MappingError(f"unknown layer kind {self.kind!r}")
        for name in ("in_h", "in_w", "in_c", "out_c", "kernel_h", "kernel_w", "stride"):
            if getattr(self, name) <= 0:
                raise MappingError(f"layer {self.name or '?'}: {name} must be positive")
        if self.out_h <= 0 or self.out_w <= 0:
            raise MappingError(
                f"layer {self.name or '?'}: kernel {self.kernel_h}x{self.kernel_w} larger than "
                f"padded input {self.in_h}x{self.in_w}")

    @property
    def out_h(self):
        return (self.in_h + 2 * self.pad_h - self.kernel_h) // self.stride + 1

    @property
    def out_w(self):
        return (self.in_w + 2 * self.pad_w - self.kernel_w) // self.stride + 1

    @property
    def k_len(self):
        return self.kernel_h * self.kernel_w * self.in_c

    @property
    def mult_adds(self):
        if self.kind == "pool":
            return 0
        return self.out_h * self.out_w * self.k_len * self.out_c

    @property
    def parameters(self):
        if self.kind == "pool":
            return 0
        return self.k_len * self.out_c

    @property
    def out_shape(self):
        return (self.out_h, self.out_w, self.out_c)

    def to_dict(self):
        data = asdict(self)
        if data["weights"] is None:
            data.pop("weights")
        return data

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def _pair(value):
    if isinstance(value, (list, tuple)):
        return int(value[0]), int(value[1])
    return int(value), int(value)


def build_layers(entries, input_shape):
    """Propagate shapes through a list of fixture layer entries."""
    h, w, c = input_shape
    layers = []
    for i, entry in enumerate(entries):
        kind = entry.get("type", "conv")
        name = entry.get("name", f"{kind}{i}")
        if kind == "pool":
            size = int(entry.get("size", 2))
            layer = ConvLayer(h, w, c, c, size, size, stride=size, kind="pool", name=name)
        elif kind == "fc":
            layer = ConvLayer(1, 1, h * w * c, int(entry["out"]), 1, 1, relu=entry.get("relu", False),
                              shift=entry.get("shift"), kind="fc", name=name)
        elif kind == "conv":
            kh, kw = _pair(entry.get("kernel", 3))
            ph, pw = _pair(entry.get("pad", 0))
            layer = ConvLayer(h, w, c, int(entry["out"]), kh, kw,
                              stride=int(entry.get("stride", 1)), pad_h=ph, pad_w=pw,
                              relu=entry.get("relu", False), shift=entry.get("shift"),
                              shortcut=bool(entry.get("shortcut", False)), name=name,
                              weights=entry.get("weights"))
        else:
            raise MappingError(f"layer {name}: unknown type {kind!r}")
        layers.append(layer)
        if not layer.shortcut:
            h, w, c = layer.out_shape
    return layers


def load_network(name_or_path):
    """Layers of a network fixture, by fixture name or JSON path."""
    path = name_or_path
    if not os.path.exists(path):
        path = fixture_path("networks", f"{name_or_path}.json")
    try:
        with open(path) as f:
            data = json.load(f)
    except FileNotFoundError:
        raise MappingError(f"network {name_or_path!r} not found") from None
    except json.JSONDecodeError as e:
        raise MappingError(f"network file {path} is not valid JSON: {e}") from e
    return build_layers(data["layers"], tuple(data["input"]))


@dataclass
class Workload:
    kind: str
    cfg: BitwidthConfig = field(default_factory=lambda: BitwidthConfig(16, 16))
    points: int = 0              # fft
    inverse: bool = False
    twiddles: list = None        # fft: [[wr, wi], ...] for k < n/2, already quantized
    taps: int = 0                # fir
    length: int = 0              # fir, dwt
    coefficients: list = None    # fir taps as ints
    blocks: int = 1              # dct2d
    levels: int = 1              # dwt
    wavelet: str = "haar"
    lo: list = None
    hi: list = None
    layer: ConvLayer = None      # conv
    network: str = None          # network fixture name or path
    layers: list = None          # network, explicit layer list
    stages: list = None          # pipeline: list of Workload
    fused: bool = True
    shift: int = None
    out_bits: int = None
    input_bits: int = None
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise MappingError(f"unknown workload kind {self.kind!r}, expected one of {KINDS}")
        self.cfg = BitwidthConfig.parse(self.cfg)

    def with_cfg(self, cfg):
        cfg = BitwidthConfig.parse(cfg)
        stages = [s.with_cfg(cfg) for s in self.stages] if self.stages else self.stages
        return replace(self, cfg=cfg, stages=stages)

    @property
    def label(self):
        if self.name:
            return self.name
        size = {"fft": self.points, "fir": self.taps, "dct2d": self.blocks,
                "dwt": self.length}.get(self.kind, "")
        return f"{self.kind}{size}" if size else self.kind

    def network_layers(self):
        if self.layers is not None:
            return [l if isinstance(l, ConvLayer) else ConvLayer.from_dict(l) for l in self.layers]
        if self.network:
            return load_network(self.network)
        raise MappingError("network workload needs `network` or `layers`")

    def to_dict(self):
        data = {"kind": self.kind, "cfg": str(self.cfg)}
        for key, default in (("points", 0), ("inverse", False), ("twiddles", None), ("taps", 0),
                             ("length", 0), ("coefficients", None), ("blocks", 1), ("levels", 1),
                             ("wavelet", "haar"), ("lo", None), ("hi", None), ("network", None),
                             ("fused", True), ("shift", None), ("out_bits", None),
                             ("input_bits", None), ("seed", 0), ("name", "")):
            value = getattr(self, key)
            if value != default:
                data[key] = value
        if self.layer is not None:
            data["layer"] = self.layer.to_dict()
        if self.layers is not None:
            data["layers"] = [l.to_dict() if isinstance(l, ConvLayer) else l for l in self.layers]
        if self.stages:
            data["stages"] = [s.to_dict() for s in self.stages]
        return data

    @classmethod
    def from_dict(cls, data):
        values = dict(data)
        if "kind" not in values:
            raise MappingError("workload needs a `kind`")
        if "layer" in values and isinstance(values["layer"], dict):
            values["layer"] = ConvLayer.from_dict(values["layer"])
        if "stages" in values:
            values["stages"] = [s if isinstance(s, Workload) else cls.from_dict(s)
                                for s in values["stages"]]
        try:
            return cls(**values)
        except TypeError as e:
            raise MappingError(f"bad workload: {e}") from e

    @classmethod
    def from_json(cls, path):
        try:
            with open(path) as f:
                return cls.from_dict(json.load(f))
        except FileNotFoundError:
            raise MappingError(f"workload file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise MappingError(f"workload {path} is not valid JSON: {e}") from e


# -- tensor placement -------------------------------------------------------------

@dataclass
class TensorSpec:
    """Where one tensor lives and how its elements map to user values.

    On-chip tensors are addressed in words, off-chip tensors in bytes.
    `offset` is an element offset from the start address.
    """
    name: str
    space: str                  # onchip | offchip
    address: int
    bits: int
    count: int                  # elements, including row padding
    role: str = "scratch"       # input | output | constant | scratch
    layout: str = "real"        # real | complex | complex-bitrev | hwc | blocks
    shape: tuple = ()
    pitch: int = 0              # hwc: elements between rows
    offset: int = 0
    scale: float = 1.0          # user value = element * scale

    @property
    def words(self):
        return words_for(self.offset + self.count, self.bits)

    @property
    def nbytes(self):
        return self.words * WORD_BYTES

    def contains(self, word_addr):
        if self.space != "onchip":
            return False
        return self.address <= word_addr < self.address + max(self.words, 1)

    def to_dict(self):
        data = asdict(self)
        data["shape"] = list(self.shape)
        return data

    @classmethod
    def from_dict(cls, data):
        values = dict(data)
        values["shape"] = tuple(values.get("shape", ()))
        return cls(**values)


def bit_reverse(i, bits):
    return int(format(i, f"0{bits}b")[::-1], 2) if bits else 0


def _complex_parts(value, n):
    arr = np.asarray(value)
    if np.iscomplexobj(arr):
        re, im = arr.real, arr.imag
    elif arr.ndim == 2 and arr.shape[1] == 2:
        re, im = arr[:, 0], arr[:, 1]
    else:
        re, im = arr, np.zeros_like(arr)
    re = np.rint(np.asarray(re, dtype=np.float64)).astype(np.int64)
    im = np.rint(np.asarray(im, dtype=np.float64)).astype(np.int64)
    if re.size != n:
        raise MappingError(f"expected {n} complex values, got {re.size}")
    return re, im


def encode_tensor(spec, value):
    """User value -> element vector in the tensor's layout."""
    if spec.layout in ("complex", "complex-bitrev"):
        n = spec.count // 2
        re, im = _complex_parts(value, n)
        if spec.layout == "complex-bitrev":
            order = [bit_reverse(i, n.bit_length() - 1) for i in range(n)]
            re, im = re[order], im[order]
        out = np.empty(2 * n, dtype=np.int64)
        out[0::2], out[1::2] = re, im
        return out
    arr = np.asarray(value, dtype=np.int64)
    if spec.layout == "hwc":
        h, w, c = spec.shape
        arr = arr.reshape(h, w, c)
        pitch = spec.pitch or w * c
        out = np.zeros(h * pitch, dtype=np.int64)
        for y in range(h):
            out[y * pitch:y * pitch + w * c] = arr[y].ravel()
        return out
    arr = arr.ravel()
    if arr.size != spec.count:
        raise MappingError(f"tensor {spec.name}: expected {spec.count} elements, got {arr.size}")
    return arr


def decode_tensor(spec, elements):
    """Element vector -> user value (complex array, HxWxC array, blocks, ...)."""
    elements = np.asarray(elements, dtype=np.int64)
    if spec.layout in ("complex", "complex-bitrev"):
        values = elements[0::2] + 1j * elements[1::2]
        if spec.layout == "complex-bitrev":
            n = values.size
            order = [bit_reverse(i, n.bit_length() - 1) for i in range(n)]
            natural = np.empty_like(values)
            natural[order] = values
            values = natural
        return values * spec.scale if spec.scale != 1.0 else values
    if spec.layout == "hwc":
        h, w, c = spec.shape
        pitch = spec.pitch or w * c
        out = np.stack([elements[y * pitch:y * pitch + w * c] for y in range(h)]).reshape(h, w, c)
    elif spec.layout == "blocks":
        out = elements.reshape(-1, DCT_SIZE, DCT_SIZE)
    else:
        out = elements
    return out * spec.scale if spec.scale != 1.0 else out


@dataclass
class TensorPlan:
    kind: str
    cfg: BitwidthConfig
    tensors: dict = field(default_factory=dict)      # name -> TensorSpec
    constants: dict = field(default_factory=dict)    # name -> element list
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    functional: bool = True
    mult_adds: int = 0
    notes: dict = field(default_factory=dict)

    def add(self, spec):
        if spec.name in self.tensors:
            raise MappingError(f"tensor {spec.name!r} placed twice")
        self.tensors[spec.name] = spec
        if spec.role == "input":
            self.inputs.append(spec.name)
        elif spec.role == "output":
            self.outputs.append(spec.name)
        return spec

    def mark_output(self, name):
        spec = self.tensors[name]
        if name not in self.outputs:
            self.outputs.append(name)
        if spec.role == "scratch":
            spec.role = "output"

    def encode_input(self, name, value):
        return encode_tensor(self.tensors[name], value)

    def decode_output(self, name, elements):
        return decode_tensor(self.tensors[name], elements)

    def sample_inputs(self, rng):
        """Random inputs inside each input's safe range, in user layout."""
        ranges = self.notes.get("input_bits", {})
        inputs = {}
        for name in self.inputs:
            spec = self.tensors[name]
            lo, hi = value_range(ranges.get(name, spec.bits))
            if spec.layout in ("complex", "complex-bitrev"):
                n = spec.count // 2
                inputs[name] = rng.integers(lo, hi + 1, n) + 1j * rng.integers(lo, hi + 1, n)
            elif spec.layout == "hwc":
                inputs[name] = rng.integers(lo, hi + 1, spec.shape)
            elif spec.layout == "blocks":
                inputs[name] = rng.integers(lo, hi + 1, (spec.count // DCT_SIZE ** 2, DCT_SIZE, DCT_SIZE))
            else:
                inputs[name] = rng.integers(lo, hi + 1, spec.count)
        return inputs

    def validate(self, program):
        """Static checks: ends in halt, shuffles armed, conv operands inside placed tensors."""
        problems = []
        if not len(program) or not isinstance(program[len(program) - 1], isa.Halt):
            problems.append("program does not end with halt")
        regs = dict(isa.RESET_VALUES)
        configured = set()
        armed = False
        onchip = [t for t in self.tensors.values() if t.space == "onchip"]
        for pc, ins in enumerate(program):
            if isinstance(ins, isa.SetReg):
                regs[ins.name] = ins.value
            elif isinstance(ins, isa.CtrlShuffling):
                configured.add(ins.unit_num)
                armed = ins.finish_flag and len(configured) == UNITS
            elif isinstance(ins, isa.ShuffleExec) and not armed:
                problems.append(f"pc {pc}: shuffle-exec before the shuffle array is armed")
            elif isinstance(ins, isa.ConvExec):
                for reg in ("fmap-base", "weight-base", "out-base"):
                    if not any(t.contains(regs[reg]) for t in onchip):
                        problems.append(f"pc {pc}: {reg}={regs[reg]} outside every placed tensor")
        return problems

    def to_dict(self):
        return {
            "kind": self.kind,
            "cfg": self.cfg.to_dict(),
            "tensors": {k: v.to_dict() for k, v in self.tensors.items()},
            "inputs": list(self.inputs),
            "outputs": list(self.outputs),
            "functional": self.functional,
            "mult_adds": self.mult_adds,
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, data, constants=None):
        plan = cls(data["kind"], BitwidthConfig.parse(data["cfg"]),
                   functional=data.get("functional", True), mult_adds=data.get("mult_adds", 0),
                   notes=data.get("notes", {}))
        plan.tensors = {k: TensorSpec.from_dict(v) for k, v in data["tensors"].items()}
        plan.inputs = list(data["inputs"])
        plan.outputs = list(data["outputs"])
        plan.constants = constants or {}
        return plan

    def save(self, directory):
        """Plan JSON plus packed constant images next to it."""
        os.makedirs(directory, exist_ok=True)
        segments = {}
        for name, values in self.constants.items():
            spec = self.tensors[name]
            segments[name] = (spec.address, pack_elements(values, spec.bits).astype("<u8").tobytes())
        save_image(os.path.join(directory, "constants"), segments)
        path = os.path.join(directory, "plan.json")
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
        return path

    @classmethod
    def load(cls, directory):
        with open(os.path.join(directory, "plan.json")) as f:
            data = json.load(f)
        constants = {}
        manifest = os.path.join(directory, "constants", "manifest.json")
        if os.path.exists(manifest):
            for name, (_, payload) in load_image(manifest).items():
                spec = TensorSpec.from_dict(data["tensors"][name])
                words = np.frombuffer(payload, dtype="<u8")
                constants[name] = unpack_elements(words, spec.bits, spec.offset + spec.count)[spec.offset:].tolist()
        return cls.from_dict(data, constants)


# -- program construction ---------------------------------------------------------

class Allocator:
    """Bump allocator over the main and signal-processing bank ranges."""

    def __init__(self, machine):
        self.machine = machine
        bw = machine.bank_words
        self.pools = {
            "signal": _ranges(sorted(machine.signal_banks), bw),
            "main": _ranges(machine.main_banks, bw),
        }
        self.reset()

    def reset(self):
        self.cursor = {name: [start for start, _ in ranges] for name, ranges in self.pools.items()}

    def capacity(self, pool):
        return sum(end - start for start, end in self.pools[pool])

    def largest_free(self, pool):
        return max((end - cur for (_, end), cur in zip(self.pools[pool], self.cursor[pool])), default=0)

    def alloc(self, words, prefer="main"):
        order = [prefer] + [p for p in self.pools if p != prefer]
        for pool in order:
            for i, (_, end) in enumerate(self.pools[pool]):
                start = self.cursor[pool][i]
                if start + words <= end:
                    self.cursor[pool][i] = start + words
                    return start
        raise MappingError(f"{words} words exceeds buffer capacity "
                           f"({self.largest_free('main')} main / {self.largest_free('signal')} signal free)")


def _ranges(banks, bank_words):
    out = []
    for b in banks:
        if out and out[-1][1] == b * bank_words:
            out[-1] = (out[-1][0], (b + 1) * bank_words)
        else:
            out.append((b * bank_words, (b + 1) * bank_words))
    return out


def element_sources(word_addr, element, bits):
    """(word, nibble) of each nibble of one element, low nibble first."""
    per = 64 // bits
    word = word_addr + element // per
    first = (element % per) * bits // 4
    return [(word, first + i) for i in range(bits // 4)]


class GatherBuilder:
    """Collects per-destination-word nibble sources for one gather."""

    def __init__(self, words):
        self.sources = [[None] * UNITS for _ in range(words)]
        self.padding = [() for _ in range(words)]

    def move(self, dst_element, dst_bits, src_word, src_element, src_bits=None):
        src_bits = src_bits or dst_bits
        if src_bits != dst_bits:
            raise MappingError("shuffles cannot change element width")
        per = 64 // dst_bits
        word = dst_element // per
        first = (dst_element % per) * dst_bits // 4
        for i, src in enumerate(element_sources(src_word, src_element, src_bits)):
            self.sources[word][first + i] = src

    def outputs(self):
        return list(zip(self.sources, self.padding))


class ProgramBuilder:
    """Emits instructions while shadowing register and shuffle-array state."""

    def __init__(self, machine=DEFAULT_MACHINE, kind="program", cfg=None):
        self.machine = machine
        self.program = isa.Program()
        self.regs = dict(isa.RESET_VALUES)
        self.cfg = None
        self.dsu = [None] * UNITS
        self.dsu_armed = False
        self.onchip = Allocator(machine)
        self.offchip_next = 0
        self.plan = TensorPlan(kind, cfg or BitwidthConfig())
        self.half = machine.staging_words // 2

    # placement

    def tensor(self, name, bits, count, role="scratch", layout="real", prefer="main", **extra):
        words = words_for(count, bits)
        address = self.onchip.alloc(max(words, 1), prefer)
        return self.plan.add(TensorSpec(name, "onchip", address, bits, count, role, layout, **extra))

    def dram_tensor(self, name, bits, count, role="scratch", layout="real", **extra):
        words = max(words_for(count, bits), 1)
        address = self.offchip_next
        if address + words * WORD_BYTES > self.machine.offchip_bytes:
            raise MappingError(f"off-chip memory exhausted placing {name}")
        self.offchip_next += words * WORD_BYTES
        return self.plan.add(TensorSpec(name, "offchip", address, bits, count, role, layout, **extra))

    def constant(self, spec, elements):
        spec.role = "constant"
        self.plan.constants[spec.name] = [int(v) for v in elements]
        return spec

    # instructions

    def emit(self, instruction):
        self.program.append(instruction)

    def set(self, **values):
        """set-reg for every changed register; keyword names use underscores."""
        for key, value in values.items():
            name = key.replace("_", "-")
            value = int(value)
            if self.regs[name] != value:
                try:
                    self.emit(isa.set_reg(name, value))
                except OperandRangeError as e:
                    raise MappingError(f"register {name}: {e}") from e
                self.regs[name] = value

    def bitwidth(self, cfg):
        if cfg != self.cfg:
            self.emit(isa.CtrlBitwidth(cfg.a_bits, cfg.w_bits))
            self.cfg = cfg

    def conv(self, relu=False, **values):
        self.set(**values)
        self.emit(isa.ConvExec(relu))

    def dma(self, direction, dram_addr, word_addr, words):
        """load-tile/store-tile in chunks the length field can hold."""
        cls = isa.LoadTile if direction == "load" else isa.StoreTile
        limit = (1 << 12) - 1
        done = 0
        while done < words:
            chunk = min(limit, words - done)
            bank, offset = divmod(word_addr + done, self.machine.bank_words)
            self.set(dma_addr=(dram_addr + done * WORD_BYTES) // WORD_BYTES)
            self.emit(cls(bank, offset, chunk))
            done += chunk

    def finish(self):
        self.emit(isa.Halt())
        return self.program, self.plan

    # shuffle compiler

    def gather(self, dst_word, outputs):
        """Fill words dst_word.. from nibble sources.

        outputs[j] is (sources, padding) for destination word dst_word + j:
        sources holds 16 entries of (word address, nibble) or None for a
        don't-care nibble, padding is ((slot, raw value), ...) applied by
        the padding unit. Destination words are written in full.
        """
        j = 0
        while j < len(outputs):
            start = j
            slots = {}
            order = []
            while j < len(outputs) and j - start < self.half:
                used = {s[0] for s in outputs[j][0] if s is not None}
                new = sorted(w for w in used if w not in slots)
                if len(order) + len(new) > self.half:
                    break
                idx = [slots[w] for w in used if w in slots] + list(range(len(order), len(order) + len(new)))
                if idx and (min(idx) > self.half - WINDOW or max(idx) - min(idx) >= WINDOW):
                    if j == start:
                        raise MappingError(f"destination word {dst_word + j} draws on {len(used)} "
                                           f"words more than {WINDOW - 1} apart")
                    break
                for w in new:
                    slots[w] = len(order)
                    order.append(w)
                j += 1
            self._stage(order)
            self._shuffle(outputs[start:j], slots)
            bank, offset = divmod(dst_word + start, self.machine.bank_words)
            self.emit(isa.WrBuf(bank, offset, j - start))

    def _stage(self, order):
        run_start = None
        run_len = 0
        for w in order + [None]:
            if run_start is not None and w == run_start + run_len:
                run_len += 1
                continue
            if run_start is not None:
                bank, offset = divmod(run_start, self.machine.bank_words)
                self.emit(isa.RdBuf(bank, offset, run_len))
            run_start, run_len = w, 1

    def _shuffle(self, batch, slots):
        runs = []
        last_w = 0
        for k, (sources, padding) in enumerate(batch):
            idx = [slots[s[0]] for s in sources if s is not None]
            w = min(idx) if idx else last_w
            rel = [None if s is None else (slots[s[0]] - w, s[1]) for s in sources]
            run = runs[-1] if runs else None
            if run is not None and run.accepts(rel, w, padding):
                run.extend(rel, w)
            else:
                runs.append(_ShuffleRun(rel, w, k, padding))
            last_w = w
        for run in runs:
            self._configure(run.rel)
            for slot, value in run.padding:
                self.emit(isa.CtrlPadding(slot, value))
            self.emit(isa.ShuffleExec(run.first_w, run.dst, run.count, run.step or 0))

    def _configure(self, rel):
        wanted = []
        for unit, entry in enumerate(rel):
            if entry is None:
                entry = self.dsu[unit] or (0, 0)
            wanted.append(entry)
        changed = [u for u in range(UNITS) if wanted[u] != self.dsu[u]]
        if not changed and self.dsu_armed:
            return
        if not changed:
            changed = [UNITS - 1]
        for i, unit in enumerate(changed):
            sel, split = wanted[unit]
            self.emit(isa.CtrlShuffling(unit, sel, split, i == len(changed) - 1))
            self.dsu[unit] = wanted[unit]
        self.dsu_armed = True


class _ShuffleRun:
    """Consecutive destination words sharing one DSU configuration."""

    def __init__(self, rel, w, dst, padding):
        self.rel = list(rel)
        self.first_w = w
        self.last_w = w
        self.step = None
        self.dst = dst
        self.count = 1
        self.padding = tuple(padding)

    def accepts(self, rel, w, padding):
        if tuple(padding) != self.padding:
            return False
        for mine, theirs in zip(self.rel, rel):
            if mine is not None and theirs is not None and mine != theirs:
                return False
        step = w - self.last_w
        if self.step is None:
            return 0 <= step < 64
        return step == self.step

    def extend(self, rel, w):
        self.rel = [m if m is not None else t for m, t in zip(self.rel, rel)]
        if self.step is None:
            self.step = w - self.last_w
        self.last_w = w
        self.count += 1


# -- quantization -----------------------------------------------------------------

def quantize(values, bits, frac_bits):
    """Round-half-to-even to Q(frac_bits) in `bits`; returns (ints, saturated count)."""
    scaled = np.rint(np.asarray(values, dtype=np.float64) * (1 << frac_bits))
    lo, hi = value_range(bits)
    saturated = int(np.count_nonzero((scaled < lo) | (scaled > hi)))
    if saturated:
        log.warning("%d value(s) saturated quantizing to %d bits", saturated, bits)
    return np.clip(scaled, lo, hi).astype(np.int64), saturated


def fft_twiddles(n, bits, inverse=False):
    """[[wr, wi], ...] for k < n/2, Q(bits-2), rounded half-to-even."""
    one = 1 << (bits - 2)
    sign = 1.0 if inverse else -1.0
    return [[round(math.cos(2 * math.pi * k / n) * one), round(sign * math.sin(2 * math.pi * k / n) * one)]
            for k in range(n // 2)]


# -- FFT ----------------------------------------------------------------------------

# Butterfly matrix rows [c0, c1, c2, c3] applied to kernel [pr, pi, qr, qi].
# c0/c1 come from the padding unit (1 or 0), c2/c3 are shuffled out of the
# twiddle word [wr, wi, -wr, -wi] by element index.
_BUTTERFLY_ROWS = (
    (True, 0, 3),    # [1, 0,  wr, -wi] -> re(p + wq)
    (False, 1, 0),   # [0, 1,  wi,  wr] -> im(p + wq)
    (True, 2, 1),    # [1, 0, -wr,  wi] -> re(p - wq)
    (False, 3, 2),   # [0, 1, -wi, -wr] -> im(p - wq)
)


def _check_fft(n, cfg):
    if n < 2 or n & (n - 1) or n > MAX_FFT_POINTS:
        raise MappingError(f"FFT size must be a power of two in 2..{MAX_FFT_POINTS}, got {n}")
    if cfg.a_bits != cfg.w_bits or cfg.a_bits not in (8, 16):
        raise MappingError(f"FFT needs matching 8- or 16-bit activations and weights, got {cfg}")


def _fft_stage(b, n, cfg, inverse=False, twiddles=None, source=None, prefix="fft"):
    """Emit an n-point DIT FFT; returns the natural-order output TensorSpec.

    `source` (a complex tensor in natural order) feeds the FFT from an
    earlier stage; without it the input is loaded bit-reversed by the host.
    """
    _check_fft(n, cfg)
    bits = cfg.a_bits
    per = 64 // bits
    stages = n.bit_length() - 1
    one = 1 << (bits - 2)
    twiddles = twiddles or fft_twiddles(n, bits, inverse)
    if len(twiddles) != n // 2:
        raise MappingError(f"FFT({n}) needs {n // 2} twiddles, got {len(twiddles)}")
    b.bitwidth(cfg)

    if source is None:
        src = b.tensor(f"{prefix}.x", bits, 2 * n, "input", "complex-bitrev", prefer="signal")
        b.plan.notes.setdefault("input_bits", {})[src.name] = bits - 1
        loc = [2 * i for i in range(n)]
    else:
        if source.bits != bits or source.count != 2 * n:
            raise MappingError(f"{prefix}: input {source.name} is not {n} complex {bits}-bit values")
        src = source
        loc = [source.offset + 2 * bit_reverse(i, stages) for i in range(n)]

    table = []
    for s in range(stages):
        h = 1 << s
        for t in range(h):
            wr, wi = twiddles[t * (n // (2 * h))]
            table.extend([wr, wi, -wr, -wi] + [0] * (per - 4))
    tw = b.constant(b.tensor(f"{prefix}.twiddles", bits, len(table), prefer="signal"), table)

    def group_words(h):
        return -(-4 * (n // (2 * h)) // per)

    kernel_words = max((1 << s) * group_words(1 << s) for s in range(stages))
    fmat = b.tensor(f"{prefix}.butterflies", bits, 4 * (n // 2) * per)
    kern = b.tensor(f"{prefix}.operands", bits, kernel_words * per)
    work = b.tensor(f"{prefix}.partials", bits, kernel_words * per)
    out = b.tensor(f"{prefix}.y", bits, 2 * n, "output", "complex")

    src_word = src.address
    for s in range(stages):
        h = 1 << s
        g = n // (2 * h)
        gw = group_words(h)
        g_pad = gw * per
        tw_word = tw.address + (h - 1)
        for r, (first_one, c2, c3) in enumerate(_BUTTERFLY_ROWS):
            rows = GatherBuilder(h)
            for t in range(h):
                rows.move(t * per + 2, bits, tw_word + t, c2)
                rows.move(t * per + 3, bits, tw_word + t, c3)
                rows.padding[t] = ((0, one if first_one else 0), (1, 0 if first_one else one))
            b.gather(fmat.address + r * h, rows.outputs())

        operands = GatherBuilder(h * gw)
        for t in range(h):
            for blk in range(g):
                p = blk * 2 * h + t
                q = p + h
                base = t * g_pad + blk * 4
                operands.move(base, bits, src_word, loc[p])
                operands.move(base + 1, bits, src_word, loc[p] + 1)
                operands.move(base + 2, bits, src_word, loc[q])
                operands.move(base + 3, bits, src_word, loc[q] + 1)
        b.gather(kern.address, operands.outputs())

        b.set(fmap_h=4, fmap_w=1, fmap_c=4, fmap_pitch=h * per, kernel_h=1, kernel_w=1, stride=1,
              pad_top=0, pad_left=0, out_rows=4, out_w=1, out_cols=g, k_len=4, weight_stride=4,
              out_y_stride=1, out_x_stride=1, out_m_stride=4, out_offset=0, shift=bits - 1,
              out_bits=bits)
        for t in range(h):
            b.conv(fmap_base=fmat.address + t, weight_base=kern.address + t * gw,
                   out_base=work.address + t * gw)
        for t in range(h):
            for blk in range(g):
                p = blk * 2 * h + t
                loc[p] = t * g_pad + blk * 4
                loc[p + h] = loc[p] + 2
        src_word = work.address

    result = GatherBuilder(out.words)
    for k in range(n):
        result.move(2 * k, bits, src_word, loc[k])
        result.move(2 * k + 1, bits, src_word, loc[k] + 1)
    b.gather(out.address, result.outputs())
    b.plan.mult_adds += count_mult_adds_fft(n)
    return out


def count_mult_adds_fft(n):
    return 10 * (n // 2) * (n.bit_length() - 1)


def fft_layout_model(x, inverse=False, bits=16):
    """Replays the FFT buffer layout in floating point.

    Uses the same operand placement and butterfly rows as the emitted
    program but exact twiddles and no rounding, so it isolates layout
    bookkeeping from quantization. Returns DFT(x)/n.
    """
    x = np.asarray(x, dtype=np.complex128)
    n = x.size
    _check_fft(n, BitwidthConfig(bits, bits))
    per = 64 // bits
    stages = n.bit_length() - 1
    sign = 1.0 if inverse else -1.0
    data = np.zeros(2 * n)
    data[0::2] = x.real[[bit_reverse(i, stages) for i in range(n)]]
    data[1::2] = x.imag[[bit_reverse(i, stages) for i in range(n)]]
    loc = [2 * i for i in range(n)]
    for s in range(stages):
        h = 1 << s
        g = n // (2 * h)
        g_pad = -(-4 * g // per) * per
        work = np.zeros(h * g_pad)
        for t in range(h):
            wr = math.cos(math.pi * t / h)
            wi = sign * math.sin(math.pi * t / h)
            rows = np.array([[1, 0, wr, -wi], [0, 1, wi, wr], [1, 0, -wr, wi], [0, 1, -wi, -wr]])
            for blk in range(g):
                p = blk * 2 * h + t
                q = p + h
                kernel = np.array([data[loc[p]], data[loc[p] + 1], data[loc[q]], data[loc[q] + 1]])
                base = t * g_pad + blk * 4
                work[base:base + 4] = rows @ kernel / 2
        for t in range(h):
            for blk in range(g):
                p = blk * 2 * h + t
                loc[p] = t * g_pad + blk * 4
                loc[p + h] = loc[p] + 2
        data = work
    return np.array([data[loc[k]] + 1j * data[loc[k] + 1] for k in range(n)])


# -- FIR ----------------------------------------------------------------------------

def _fir_stage(b, taps, length, cfg, coefficients=None, shift=None, out_bits=None,
               source=None, prefix="fir"):
    if taps < 1:
        raise MappingError(f"FIR needs at least one tap, got {taps}")
    if length < taps:
        raise MappingError(f"FIR input length {length} shorter than {taps} taps")
    coeffs = np.ones(taps, dtype=np.int64) if coefficients is None else np.asarray(coefficients, dtype=np.int64)
    if coeffs.size != taps:
        raise MappingError(f"FIR has {taps} taps but {coeffs.size} coefficients")
    _check_range(coeffs, cfg.w_bits, "FIR coefficient")
    out_bits = out_bits or 32
    shift = shift if shift is not None else _safe_shift([coeffs], cfg.a_bits, out_bits)
    b.bitwidth(cfg)
    if source is None:
        x = b.tensor(f"{prefix}.x", cfg.a_bits, length, "input", prefer="signal")
        b.plan.notes.setdefault("input_bits", {})[x.name] = cfg.a_bits
    else:
        if source.bits != cfg.a_bits or source.count != length:
            raise MappingError(f"{prefix}: input {source.name} is not {length} {cfg.a_bits}-bit samples")
        x = source
    h = b.constant(b.tensor(f"{prefix}.h", cfg.w_bits, taps, prefer="signal"), coeffs[::-1])
    y = b.tensor(f"{prefix}.y", out_bits, length, "output", prefer="signal")
    # one output row; kernel-w taps slide along x with taps-1 zeros of history
    b.conv(fmap_base=x.address, fmap_h=1, fmap_w=length, fmap_c=1, fmap_pitch=0,
           kernel_h=1, kernel_w=taps, stride=1, pad_top=0, pad_left=taps - 1,
           out_rows=1, out_w=length, out_cols=1, k_len=taps, weight_base=h.address,
           weight_stride=0, out_base=y.address, out_y_stride=0, out_x_stride=0,
           out_m_stride=0, out_offset=0, shift=shift, out_bits=out_bits)
    b.plan.notes.setdefault("shifts", {})[prefix] = shift
    b.plan.mult_adds += taps * length
    return y


def _check_range(values, bits, what):
    lo, hi = value_range(bits)
    values = np.asarray(values)
    if values.size and (values.min() < lo or values.max() > hi):
        raise MappingError(f"{what} outside the {bits}-bit range {lo}..{hi}")


def _safe_shift(kernels, a_bits, out_bits):
    """Smallest shift keeping any a_bits input within out_bits after requantization."""
    bound = max(int(np.abs(np.asarray(k, dtype=np.int64)).sum()) for k in kernels) << (a_bits - 1)
    return max(0, bound.bit_length() - out_bits + 2)


# -- 2-D DCT --------------------------------------------------------------------------

def dct_coefficients(w_bits):
    """Fixed-point DCT-II matrix and its fraction bits."""
    c = np.array([[math.sqrt((1 if m == 0 else 2) / DCT_SIZE)
                   * math.cos((2 * k + 1) * m * math.pi / (2 * DCT_SIZE))
                   for k in range(DCT_SIZE)] for m in range(DCT_SIZE)])
    limit = (1 << (w_bits - 1)) - 1
    frac = 0
    while np.abs(c).max() * (1 << (frac + 1)) <= limit:
        frac += 1
    return quantize(c, w_bits, frac)[0], frac


def _dct_stage(b, blocks, cfg, input_bits=None, out_bits=None, source=None, prefix="dct2d"):
    if blocks < 1:
        raise MappingError(f"DCT needs at least one block, got {blocks}")
    a = cfg.a_bits
    input_bits = input_bits or a
    out_bits = out_bits or 16
    coeffs, frac = dct_coefficients(cfg.w_bits)
    in_mag = input_bits - 1
    # each 1-D pass grows magnitudes by at most 2**1.5; keep what fits
    u_frac = min(frac, (a - 1) - (in_mag + 2))
    y_frac = min(frac + u_frac, (out_bits - 1) - (in_mag + 3))
    s1 = frac - u_frac
    s2 = frac + u_frac - y_frac
    count = blocks * DCT_SIZE * DCT_SIZE
    b.bitwidth(cfg)
    if source is None:
        x = b.tensor(f"{prefix}.x", a, count, "input", "blocks", prefer="signal")
        b.plan.notes.setdefault("input_bits", {})[x.name] = input_bits
    else:
        if source.bits != a or source.count != count:
            raise MappingError(f"{prefix}: input {source.name} is not {blocks} {a}-bit 8x8 blocks")
        x = source
    c = b.constant(b.tensor(f"{prefix}.coefficients", cfg.w_bits, DCT_SIZE * DCT_SIZE, prefer="signal"),
                   coeffs.ravel())
    u = b.tensor(f"{prefix}.rows", a, count, prefer="signal")
    y = b.tensor(f"{prefix}.y", out_bits, count, "output", "blocks", prefer="signal",
                 scale=2.0 ** -y_frac)
    # pass 1 transforms rows and writes them transposed, pass 2 does it again
    geometry = dict(fmap_h=blocks, fmap_w=DCT_SIZE, fmap_c=DCT_SIZE, fmap_pitch=DCT_SIZE * DCT_SIZE,
                    kernel_h=1, kernel_w=1, stride=1, pad_top=0, pad_left=0, out_rows=blocks,
                    out_w=DCT_SIZE, out_cols=DCT_SIZE, k_len=DCT_SIZE, weight_base=c.address,
                    weight_stride=0, out_y_stride=DCT_SIZE * DCT_SIZE, out_x_stride=1,
                    out_m_stride=DCT_SIZE, out_offset=0)
    b.conv(fmap_base=x.address, out_base=u.address, shift=s1, out_bits=a, **geometry)
    b.conv(fmap_base=u.address, out_base=y.address, shift=s2, out_bits=out_bits, **geometry)
    b.plan.notes.setdefault("shifts", {})[prefix] = [s1, s2]
    b.plan.mult_adds += blocks * 2 * DCT_SIZE ** 3
    return y


# -- DWT ------------------------------------------------------------------------------

def wavelet_taps(workload):
    if workload.lo is not None or workload.hi is not None:
        if workload.lo is None or workload.hi is None:
            raise MappingError("DWT needs both lo and hi taps")
        return list(workload.lo), list(workload.hi)
    try:
        return WAVELETS[workload.wavelet]
    except KeyError:
        raise MappingError(f"unknown wavelet {workload.wavelet!r}, expected one of {sorted(WAVELETS)}") from None


def _dwt_stage(b, length, levels, lo, hi, cfg, source=None, prefix="dwt"):
    if levels < 1:
        raise MappingError("DWT needs at least one level")
    if length <= 0 or length % (1 << levels):
        raise MappingError(f"DWT length {length} not divisible by 2**{levels}")
    frac = cfg.w_bits - 2
    lo_q = quantize(lo, cfg.w_bits, frac)[0]
    hi_q = quantize(hi, cfg.w_bits, frac)[0]
    taps = max(lo_q.size, hi_q.size)
    a = cfg.a_bits
    b.bitwidth(cfg)
    kernels = np.zeros((2, taps), dtype=np.int64)
    kernels[0, :lo_q.size] = lo_q
    kernels[1, :hi_q.size] = hi_q
    w = b.constant(b.tensor(f"{prefix}.taps", cfg.w_bits, 2 * taps, prefer="signal"), kernels.ravel())
    if source is None:
        x = b.tensor(f"{prefix}.x", a, length, "input", prefer="signal")
        b.plan.notes.setdefault("input_bits", {})[x.name] = max(2, a - levels)
    else:
        if source.bits != a or source.count != length:
            raise MappingError(f"{prefix}: input {source.name} is not {length} {a}-bit samples")
        x = source
    current, current_len = x, length
    for level in range(1, levels + 1):
        half = current_len // 2
        bands = b.tensor(f"{prefix}.level{level}", a, current_len, prefer="signal")
        b.conv(fmap_base=current.address, fmap_h=1, fmap_w=current_len, fmap_c=1, fmap_pitch=0,
               kernel_h=1, kernel_w=taps, stride=2, pad_top=0, pad_left=0, out_rows=1,
               out_w=half, out_cols=2, k_len=taps, weight_base=w.address, weight_stride=0,
               out_base=bands.address, out_y_stride=0, out_x_stride=1, out_m_stride=half,
               out_offset=0, shift=frac, out_bits=a)
        b.plan.add(TensorSpec(f"{prefix}.hi{level}", "onchip", bands.address, a, half, "output",
                              offset=half))
        b.plan.mult_adds += half * (lo_q.size + hi_q.size)
        current = TensorSpec(f"{prefix}.lo{level}", "onchip", bands.address, a, half)
        current_len = half
    lo_out = b.plan.add(replace(current, name=f"{prefix}.lo", role="output"))
    b.plan.notes.setdefault("shifts", {})[prefix] = frac
    b.plan.notes.setdefault("taps", {})[prefix] = {"lo": lo_q.tolist(), "hi": hi_q.tolist()}
    return lo_out


# -- convolution layers -----------------------------------------------------------------

def layer_weights(layer, cfg, rng):
    shape = (layer.out_c, layer.kernel_h, layer.kernel_w, layer.in_c)
    if layer.weights is not None:
        w = np.asarray(layer.weights, dtype=np.int64)
        if w.size != np.prod(shape):
            raise MappingError(f"layer {layer.name}: weights do not match {shape}")
        w = w.reshape(shape)
        _check_range(w, cfg.w_bits, f"layer {layer.name} weight")
        return w
    lo, hi = value_range(cfg.w_bits)
    return rng.integers(lo, hi + 1, size=shape, dtype=np.int64)


def _kernel_elements(w, stride):
    flat = w.reshape(w.shape[0], -1)
    out = np.zeros((w.shape[0], stride), dtype=np.int64)
    out[:, :flat.shape[1]] = flat
    return out.ravel()


def _layer_shift(layer, w, cfg, out_bits):
    if layer.shift is not None:
        return layer.shift
    return _safe_shift(list(w.reshape(w.shape[0], -1)), cfg.a_bits, out_bits)


def _conv_resident(b, layer, cfg, rng, source=None, prefix="conv", role="output"):
    """Whole layer on-chip, one conv-exec."""
    a = cfg.a_bits
    w = layer_weights(layer, cfg, rng)
    ws = words_for(layer.k_len, cfg.w_bits) * (64 // cfg.w_bits)
    shift = _layer_shift(layer, w, cfg, a)
    b.bitwidth(cfg)
    shape = (layer.in_h, layer.in_w, layer.in_c)
    if source is None:
        x = b.tensor(f"{prefix}.x", a, int(np.prod(shape)), "input", "hwc", shape=shape)
    else:
        if source.bits != a or source.count != int(np.prod(shape)):
            raise MappingError(f"{prefix}: input {source.name} does not match {shape} at {a} bits")
        x = source
    wt = b.constant(b.tensor(f"{prefix}.w", cfg.w_bits, layer.out_c * ws), _kernel_elements(w, ws))
    y = b.tensor(f"{prefix}.y", a, layer.out_h * layer.out_w * layer.out_c, role, "hwc",
                 shape=layer.out_shape)
    b.conv(layer.relu, fmap_base=x.address, fmap_h=layer.in_h, fmap_w=layer.in_w,
           fmap_c=layer.in_c, fmap_pitch=0, kernel_h=layer.kernel_h, kernel_w=layer.kernel_w,
           stride=layer.stride, pad_top=layer.pad_h, pad_left=layer.pad_w, out_rows=layer.out_h,
           out_w=layer.out_w, out_cols=layer.out_c, k_len=layer.k_len, weight_base=wt.address,
           weight_stride=ws, out_base=y.address, out_y_stride=0, out_x_stride=0, out_m_stride=0,
           out_offset=0, shift=shift, out_bits=a)
    b.plan.notes.setdefault("shifts", {})[prefix] = shift
    b.plan.mult_adds += layer.mult_adds
    return y


def _resident_words(layer, cfg):
    a = cfg.a_bits
    ws_words = words_for(layer.k_len, cfg.w_bits)
    return (words_for(layer.in_h * layer.in_w * layer.in_c, a) + layer.out_c * ws_words
            + words_for(layer.out_h * layer.out_w * layer.out_c, a))


def _conv_tiled(b, layer, cfg, rng, src, prefix="conv", role="output"):
    """Layer streamed through DRAM in output-row bands and kernel tiles."""
    a, wb = cfg.a_bits, cfg.w_bits
    per_a, per_w = 64 // a, 64 // wb
    w = layer_weights(layer, cfg, rng)
    shift = _layer_shift(layer, w, cfg, a)
    ws_words = words_for(layer.k_len, wb)
    m = layer.out_c
    in_row = words_for(layer.in_w * layer.in_c, a)
    out_row = words_for(layer.out_w * m, a)
    if src.pitch and src.pitch != in_row * per_a:
        raise MappingError(f"{prefix}: input pitch {src.pitch} does not match {in_row * per_a}")

    b.onchip.reset()
    budget = b.onchip.capacity("main")
    avail = budget - (layer.kernel_h * in_row + out_row)
    if avail < ws_words:
        raise MappingError(f"{prefix}: one kernel and one output row exceed buffer capacity")
    # a single row band (fc layers) may give weights everything it leaves free
    if m * ws_words <= (avail if layer.out_h == 1 else min(avail, budget // 2)):
        mt = m
    else:
        share = avail if layer.out_h == 1 else min(avail, max(budget // 4, ws_words))
        mt = min(m, share // ws_words)
        if mt >= 8:
            mt = mt // 8 * 8
    remaining = budget - mt * ws_words
    rb = 0
    for rows in range(1, layer.out_h + 1):
        need = ((rows - 1) * layer.stride + layer.kernel_h) * in_row + rows * out_row
        if need > remaining:
            break
        rb = rows
    if rb == 0:
        raise MappingError(f"{prefix}: one output row exceeds buffer capacity")

    wd = b.dram_tensor(f"{prefix}.w", wb, m * ws_words * per_w)
    b.constant(wd, _kernel_elements(w, ws_words * per_w))
    dst = b.dram_tensor(f"{prefix}.y", a, layer.out_h * out_row * per_a, role, "hwc",
                        shape=layer.out_shape, pitch=out_row * per_a)
    wt = b.tensor(f"{prefix}.w.tile", wb, mt * ws_words * per_w)
    band_in = b.tensor(f"{prefix}.x.band", a, ((rb - 1) * layer.stride + layer.kernel_h) * in_row * per_a)
    band_out = b.tensor(f"{prefix}.y.band", a, rb * out_row * per_a)

    b.bitwidth(cfg)
    b.set(fmap_w=layer.in_w, fmap_c=layer.in_c, fmap_pitch=in_row * per_a,
          kernel_h=layer.kernel_h, kernel_w=layer.kernel_w, stride=layer.stride,
          pad_left=layer.pad_w, out_w=layer.out_w, k_len=layer.k_len,
          weight_stride=ws_words * per_w, out_y_stride=out_row * per_a, out_x_stride=m,
          out_m_stride=1, shift=shift, out_bits=a)
    if mt == m:
        b.dma("load", wd.address, wt.address, m * ws_words)
    for oh0 in range(0, layer.out_h, rb):
        oh1 = min(layer.out_h, oh0 + rb)
        r0 = max(0, oh0 * layer.stride - layer.pad_h)
        r1 = min(layer.in_h, (oh1 - 1) * layer.stride - layer.pad_h + layer.kernel_h)
        b.dma("load", src.address + r0 * in_row * WORD_BYTES, band_in.address, (r1 - r0) * in_row)
        for m0 in range(0, m, mt):
            mc = min(mt, m - m0)
            if mt < m:
                b.dma("load", wd.address + m0 * ws_words * WORD_BYTES, wt.address, mc * ws_words)
            b.conv(layer.relu, fmap_base=band_in.address, fmap_h=r1 - r0,
                   pad_top=layer.pad_h + r0 - oh0 * layer.stride, out_rows=oh1 - oh0,
                   out_cols=mc, weight_base=wt.address, out_base=band_out.address, out_offset=m0)
        b.dma("store", dst.address + oh0 * out_row * WORD_BYTES, band_out.address,
              (oh1 - oh0) * out_row)
    b.plan.notes.setdefault("shifts", {})[prefix] = shift
    b.plan.notes.setdefault("tiling", {})[prefix] = {"rows": rb, "kernels": mt}
    b.plan.mult_adds += layer.mult_adds
    return dst


def _dram_input(b, name, shape, bits, role="input"):
    h, w, c = shape
    pitch = words_for(w * c, bits) * (64 // bits)
    return b.dram_tensor(name, bits, h * pitch, role, "hwc", shape=shape, pitch=pitch)


def map_network(layers, cfg, machine=DEFAULT_MACHINE, seed=0, name="network"):
    """Layer-by-layer schedule with every activation tensor in DRAM.

    Pooling layers only reshape (their output tensor is left zero) and
    shortcut convolutions read the block input without feeding the chain,
    so such networks map for timing only.
    """
    if not layers:
        raise MappingError("network has no layers")
    cfg = BitwidthConfig.parse(cfg)
    b = ProgramBuilder(machine, "network", cfg)
    rng = np.random.default_rng(seed)
    first = layers[0]
    cur = _dram_input(b, f"{name}.x", (first.in_h, first.in_w, first.in_c), cfg.a_bits)
    for i, layer in enumerate(layers):
        prefix = f"{name}.{i}.{layer.name or layer.kind}"
        if layer.kind == "pool":
            cur = _dram_input(b, f"{prefix}.y", layer.out_shape, cfg.a_bits, role="scratch")
            b.plan.functional = False
            continue
        src = cur
        if layer.kind == "fc" and cur.shape and (cur.shape[0] > 1 or cur.pitch != cur.shape[1] * cur.shape[2]):
            # rows are word padded; a dense copy would need a host-side flatten
            src = b.dram_tensor(f"{prefix}.flat", cfg.a_bits, layer.in_c, layout="hwc",
                                shape=(1, 1, layer.in_c), pitch=words_for(layer.in_c, cfg.a_bits) * (64 // cfg.a_bits))
            b.plan.functional = False
        out = _conv_tiled(b, layer, cfg, rng, src, prefix, role="scratch")
        if layer.shortcut:
            b.plan.functional = False
            continue
        cur = out
    b.plan.mark_output(cur.name)
    log.info("mapped %s: %d layers, %d mult-adds", name, len(layers), b.plan.mult_adds)
    return b.finish()


def _map_stage(b, wl, source, prefix, rng):
    cfg = wl.cfg
    if wl.kind == "fft":
        return _fft_stage(b, wl.points, cfg, wl.inverse, wl.twiddles, source, prefix)
    if wl.kind == "fir":
        return _fir_stage(b, wl.taps, wl.length, cfg, wl.coefficients, wl.shift, wl.out_bits,
                          source, prefix)
    if wl.kind == "dct2d":
        return _dct_stage(b, wl.blocks, cfg, wl.input_bits, wl.out_bits, source, prefix)
    if wl.kind == "dwt":
        lo, hi = wavelet_taps(wl)
        return _dwt_stage(b, wl.length, wl.levels, lo, hi, cfg, source, prefix)
    if wl.kind == "conv":
        if wl.layer is None:
            raise MappingError("conv workload needs a `layer`")
        return _conv_resident(b, wl.layer, cfg, rng, source, prefix)
    if wl.kind == "network":
        out = source
        layers = wl.network_layers()
        for i, layer in enumerate(layers):
            if layer.kind != "conv" or layer.shortcut:
                raise MappingError(f"{prefix}: on-chip networks take plain conv layers only")
            role = "output" if i == len(layers) - 1 else "scratch"
            out = _conv_resident(b, layer, cfg, rng, out, f"{prefix}.{i}", role)
        return out
    raise MappingError(f"{wl.kind} cannot be a pipeline stage")


def map_pipeline(stages, machine=DEFAULT_MACHINE, fused=True, seed=0):
    """Chain stages so each one reads the previous stage's output region.

    With fused=False every hand-off is spilled to DRAM and loaded back,
    which gives the same results at a higher cycle count.
    """
    if not stages:
        raise MappingError("pipeline has no stages")
    b = ProgramBuilder(machine, "pipeline", stages[0].cfg)
    rng = np.random.default_rng(seed)
    source = None
    for i, stage in enumerate(stages):
        prefix = f"s{i}.{stage.kind}"
        if source is not None and not fused:
            if source.offset:
                raise MappingError(f"{source.name} cannot be spilled, it starts mid-word")
            spill = b.dram_tensor(f"{prefix}.spill", source.bits, source.count)
            b.dma("store", spill.address, source.address, source.words)
            fresh = b.tensor(f"{prefix}.in", source.bits, source.count, layout=source.layout,
                             shape=source.shape, pitch=source.pitch)
            b.dma("load", spill.address, fresh.address, source.words)
            source = fresh
        source = _map_stage(b, stage, source, prefix, rng)
    b.plan.notes["stages"] = [s.label for s in stages]
    return b.finish()


def map_fft(n, cfg, machine=DEFAULT_MACHINE, inverse=False, twiddles=None):
    b = ProgramBuilder(machine, "fft", BitwidthConfig.parse(cfg))
    _fft_stage(b, n, b.plan.cfg, inverse, twiddles)
    return b.finish()


def map_fir(taps, length, cfg, machine=DEFAULT_MACHINE, coefficients=None, shift=None, out_bits=None):
    b = ProgramBuilder(machine, "fir", BitwidthConfig.parse(cfg))
    _fir_stage(b, taps, length, b.plan.cfg, coefficients, shift, out_bits)
    return b.finish()


def map_dct2d(cfg, blocks=1, machine=DEFAULT_MACHINE, input_bits=None, out_bits=None):
    b = ProgramBuilder(machine, "dct2d", BitwidthConfig.parse(cfg))
    _dct_stage(b, blocks, b.plan.cfg, input_bits, out_bits)
    return b.finish()


def map_dwt(levels, lo, hi, cfg, length, machine=DEFAULT_MACHINE):
    b = ProgramBuilder(machine, "dwt", BitwidthConfig.parse(cfg))
    _dwt_stage(b, length, levels, lo, hi, b.plan.cfg)
    return b.finish()


def map_conv_layer(layer, cfg, machine=DEFAULT_MACHINE, seed=0, tiled=None):
    """One layer, on-chip when it fits, otherwise tiled through DRAM."""
    cfg = BitwidthConfig.parse(cfg)
    b = ProgramBuilder(machine, "conv", cfg)
    rng = np.random.default_rng(seed)
    if tiled is None:
        tiled = _resident_words(layer, cfg) > b.onchip.capacity("main")
    if tiled:
        src = _dram_input(b, "conv.x", (layer.in_h, layer.in_w, layer.in_c), cfg.a_bits)
        _conv_tiled(b, layer, cfg, rng, src)
    else:
        _conv_resident(b, layer, cfg, rng)
    return b.finish()


def map_workload(wl, machine=DEFAULT_MACHINE):
    """(Program, TensorPlan) for any workload kind."""
    log.debug("mapping %s at %s", wl.label, wl.cfg)
    if wl.kind == "network":
        return map_network(wl.network_layers(), wl.cfg, machine, wl.seed, wl.network or "network")
    if wl.kind == "pipeline":
        return map_pipeline(wl.stages or [], machine, wl.fused, wl.seed)
    if wl.kind == "conv":
        if wl.layer is None:
            raise MappingError("conv workload needs a `layer`")
        return map_conv_layer(wl.layer, wl.cfg, machine, wl.seed)
    b = ProgramBuilder(machine, wl.kind, wl.cfg)
    _map_stage(b, wl, None, wl.kind, np.random.default_rng(wl.seed))
    return b.finish()


# -- cost model -------------------------------------------------------------------------

def count_mult_adds(wl):
    """Analytic multiply-adds of the algorithm itself, independent of mapping."""
    if wl.kind == "fft":
        return count_mult_adds_fft(wl.points)
    if wl.kind == "fir":
        return wl.taps * wl.length
    if wl.kind == "dct2d":
        return wl.blocks * 2 * DCT_SIZE ** 3
    if wl.kind == "dwt":
        lo, hi = wavelet_taps(wl)
        total, n = 0, wl.length
        for _ in range(wl.levels):
            total += (n // 2) * (len(lo) + len(hi))
            n //= 2
        return total
    if wl.kind == "conv":
        return wl.layer.mult_adds
    if wl.kind == "network":
        return sum(l.mult_adds for l in wl.network_layers())
    if wl.kind == "pipeline":
        return sum(count_mult_adds(s) for s in wl.stages or [])
    raise MappingError(f"cannot count {wl.kind}")


def count_parameters(wl):
    """Stored coefficients: twiddle factors, filter taps or conv weights."""
    if wl.kind == "fft":
        return 5 * wl.points
    if wl.kind == "fir":
        return wl.taps
    if wl.kind == "dct2d":
        return DCT_SIZE * DCT_SIZE
    if wl.kind == "dwt":
        lo, hi = wavelet_taps(wl)
        return len(lo) + len(hi)
    if wl.kind == "conv":
        return wl.layer.parameters
    if wl.kind == "network":
        return sum(l.parameters for l in wl.network_layers())
    if wl.kind == "pipeline":
        return sum(count_parameters(s) for s in wl.stages or [])
    raise MappingError(f"cannot count {wl.kind}")


def plan_weights(plan, prefix, layer):
    """M x KH x KW x C weights of a mapped layer, read back from its constant."""
    values = np.asarray(plan.constants[f"{prefix}.w"], dtype=np.int64)
    stride = values.size // layer.out_c
    flat = values.reshape(layer.out_c, stride)[:, :layer.k_len]
    return flat.reshape(layer.out_c, layer.kernel_h, layer.kernel_w, layer.in_c)

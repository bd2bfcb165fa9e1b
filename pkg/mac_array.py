"""Variable-bitwidth computing array.

Everything is built from one primitive, a 4-bit multiplier. Wider operands
are split in halves (low half unsigned, high half carrying the sign) and the
partial products are shifted and added: an 8x8 product uses shifts 0, 4, 4
and 8; a 16x16 product recurses to sixteen 4-bit partials with a largest
shift of 24.

The array holds 8 PEs of 16 multipliers. A PE spends
(a_bits/4) * (w_bits/4) multipliers per lane, so it has 16, 8, 4, 2 or 1
lanes depending on the configured widths.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from errors import AccumulatorOverflow, OperandRangeError

log = logging.getLogger(__name__)

PE_COUNT = 8
MULTIPLIERS_PER_PE = 16
WIDTHS = (4, 8, 16)
ACC_BITS = 32
ACC_MIN = -(1 << (ACC_BITS - 1))
ACC_MAX = (1 << (ACC_BITS - 1)) - 1


@dataclass(frozen=True)
class BitwidthConfig:
    a_bits: int = 8
    w_bits: int = 8

    def __post_init__(self):
        if self.a_bits not in WIDTHS or self.w_bits not in WIDTHS:
            raise OperandRangeError(f"bit widths must be in {WIDTHS}, got {self.a_bits}x{self.w_bits}")

    @property
    def lanes_per_pe(self):
        return MULTIPLIERS_PER_PE // ((self.a_bits // 4) * (self.w_bits // 4))

    @property
    def products_per_step(self):
        return self.lanes_per_pe * PE_COUNT

    def __str__(self):
        return f"{self.a_bits}x{self.w_bits}"

    @classmethod
    def parse(cls, text):
        """'8x4' or (8, 4) or {'a_bits': 8, 'w_bits': 4}."""
        if isinstance(text, BitwidthConfig):
            return text
        if isinstance(text, dict):
            return cls(int(text["a_bits"]), int(text["w_bits"]))
        if isinstance(text, (list, tuple)):
            return cls(int(text[0]), int(text[1]))
        a, _, w = str(text).lower().partition("x")
        try:
            return cls(int(a), int(w))
        except ValueError:
            raise OperandRangeError(f"bad bitwidth config {text!r}, expected e.g. 8x8") from None

    def to_dict(self):
        return {"a_bits": self.a_bits, "w_bits": self.w_bits}


def value_range(bits):
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


def _check_operand(value, bits, name):
    lo, hi = value_range(bits)
    if not lo <= value <= hi:
        raise OperandRangeError(f"{name}={value} not representable in {bits}-bit two's complement")


def mul4(a, b, a_signed, b_signed):
    """Multiply two raw nibbles; a signed nibble is the top nibble of its operand."""
    a &= 0xF
    b &= 0xF
    if a_signed and a >= 8:
        a -= 16
    if b_signed and b >= 8:
        b -= 16
    return a * b


def _compose(a, a_bits, a_signed, w, w_bits, w_signed, mul):
    if a_bits == 4 and w_bits == 4:
        return mul(a, w, a_signed, w_signed)
    if a_bits >= w_bits:
        half = a_bits // 2
        lo = a & ((1 << half) - 1)
        hi = a >> half
        return (_compose(lo, half, False, w, w_bits, w_signed, mul)
                + (_compose(hi, half, a_signed, w, w_bits, w_signed, mul) << half))
    half = w_bits // 2
    lo = w & ((1 << half) - 1)
    hi = w >> half
    return (_compose(a, a_bits, a_signed, lo, half, False, mul)
            + (_compose(a, a_bits, a_signed, hi, half, w_signed, mul) << half))


def partial_schedule(cfg):
    """(a nibble, w nibble, shift) for every 4-bit partial of one product."""
    return [(i, j, 4 * (i + j)) for i in range(cfg.a_bits // 4) for j in range(cfg.w_bits // 4)]


def compose_mul(a, w, cfg):
    """a * w computed only from mul4 partials."""
    _check_operand(a, cfg.a_bits, "a")
    _check_operand(w, cfg.w_bits, "w")
    return _compose(a, cfg.a_bits, True, w, cfg.w_bits, True, mul4)


def _mul4_array(a, b, a_signed, b_signed):
    a = a & 0xF
    b = b & 0xF
    if a_signed:
        a = np.where(a >= 8, a - 16, a)
    if b_signed:
        b = np.where(b >= 8, b - 16, b)
    return a * b


def compose_mul_array(a, w, cfg):
    """Elementwise compose_mul over broadcastable int64 arrays."""
    a = np.asarray(a, dtype=np.int64)
    w = np.asarray(w, dtype=np.int64)
    for arr, bits, name in ((a, cfg.a_bits, "activation"), (w, cfg.w_bits, "weight")):
        lo, hi = value_range(bits)
        if arr.size and (arr.min() < lo or arr.max() > hi):
            raise OperandRangeError(f"{name} outside {bits}-bit range")
    return _compose(a, cfg.a_bits, True, w, cfg.w_bits, True, _mul4_array)


@dataclass
class PeState:
    lanes: int = 16
    accumulators: list = None

    def __post_init__(self):
        if self.accumulators is None:
            self.accumulators = [0] * self.lanes

    def clear(self):
        self.accumulators = [0] * self.lanes


@dataclass
class ArrayState:
    cfg: BitwidthConfig = field(default_factory=BitwidthConfig)
    pes: list = None
    broadcast: list = field(default_factory=list)

    def __post_init__(self):
        if self.pes is None:
            self.pes = [PeState(self.cfg.lanes_per_pe) for _ in range(PE_COUNT)]

    def reconfigure(self, cfg):
        self.cfg = cfg
        self.pes = [PeState(cfg.lanes_per_pe) for _ in range(PE_COUNT)]
        self.broadcast = []


def _check_acc(value, where):
    if not ACC_MIN <= value <= ACC_MAX:
        raise AccumulatorOverflow(f"{where}: {value} overflows the {ACC_BITS}-bit accumulator")


def pe_dot(activations, weights, cfg, state=None):
    lanes = cfg.lanes_per_pe
    if len(activations) != lanes or len(weights) != lanes:
        raise OperandRangeError(
            f"PE at {cfg} takes {lanes} lanes, got {len(activations)} activations / {len(weights)} weights")
    if state is None:
        state = PeState(lanes)
    total = 0
    for lane, (a, w) in enumerate(zip(activations, weights)):
        product = compose_mul(int(a), int(w), cfg)
        state.accumulators[lane] += product
        _check_acc(state.accumulators[lane], f"lane {lane}")
        total += product
    _check_acc(total, "PE sum")
    return total


def array_step(activations, weight_sets, cfg, state=None):
    """One cycle: shared activations against up to 8 kernels."""
    if len(weight_sets) != PE_COUNT:
        raise OperandRangeError(f"array step needs {PE_COUNT} weight sets, got {len(weight_sets)}")
    if state is None:
        state = ArrayState(cfg)
    state.broadcast = list(activations)
    return [pe_dot(activations, ws, cfg, pe) for ws, pe in zip(weight_sets, state.pes)]


def step_count(rows, kernels, k_len, cfg):
    """Array steps needed for a rows x kernels x k_len product."""
    return rows * -(-kernels // PE_COUNT) * -(-k_len // cfg.lanes_per_pe)


class ComputeArray:
    """Vectorised array model used by the engine.

    gemm() returns the same sums a sequence of array_step calls would, with
    lane accumulators checked for overflow after every step.
    """

    def __init__(self, cfg=None, chunk_elements=1 << 21):
        self.state = ArrayState(cfg or BitwidthConfig())
        self.chunk_elements = chunk_elements

    @property
    def cfg(self):
        return self.state.cfg

    def configure(self, cfg):
        if cfg != self.state.cfg:
            self.state.reconfigure(cfg)

    def gemm(self, fmap, weights):
        """out[r, m] = sum_k fmap[r, k] * weights[m, k]."""
        fmap = np.asarray(fmap, dtype=np.int64)
        weights = np.asarray(weights, dtype=np.int64)
        rows, k_len = fmap.shape
        kernels = weights.shape[0]
        lanes = self.cfg.lanes_per_pe
        steps = -(-k_len // lanes)
        pad = steps * lanes - k_len
        if pad:
            fmap = np.pad(fmap, ((0, 0), (0, pad)))
            weights = np.pad(weights, ((0, 0), (0, pad)))
        out = np.zeros((rows, kernels), dtype=np.int64)
        row_chunk = max(1, self.chunk_elements // max(1, kernels * steps * lanes))
        for r0 in range(0, rows, row_chunk):
            block = fmap[r0:r0 + row_chunk]
            products = compose_mul_array(block[:, None, :], weights[None, :, :], self.cfg)
            lane_view = products.reshape(block.shape[0], kernels, steps, lanes)
            running = np.cumsum(lane_view, axis=2)
            if running.size and (running.min() < ACC_MIN or running.max() > ACC_MAX):
                raise AccumulatorOverflow("lane accumulator overflow during array steps")
            sums = running[:, :, -1, :].sum(axis=2)
            if sums.size and (sums.min() < ACC_MIN or sums.max() > ACC_MAX):
                raise AccumulatorOverflow("PE sum overflows the 32-bit accumulator")
            out[r0:r0 + block.shape[0]] = sums
        return out

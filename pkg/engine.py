"""Cycle-approximate execution of programs on the accelerator model.

One MachineState per run holds the register file, the shuffling fabric,
the computing array and both memories. step() retires one instruction and
charges its cycles to one of four buckets (compute, shuffle, dma, stall);
the total is their sum unless DMA overlap is enabled, in which case DMA
issued since the previous conv-exec hides behind it.
"""
import csv
import io
import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

import isa
from config import DEFAULT_MACHINE, WORD_BYTES
from errors import (AccumulatorOverflow, CycleBudgetExceeded, EngineFault, MappingError,
                    SigDlaError)
from mac_array import BitwidthConfig, ComputeArray, step_count, value_range
from mapper import map_workload
from memory import DmaDescriptor, DmaEngine, OffChipMemory, OnChipBuffer
from shuffle_fabric import ShuffleFabric

log = logging.getLogger(__name__)

OUTPUT_WIDTHS = (4, 8, 16, 32)


@dataclass
class CycleReport:
    total_cycles: int = 0
    compute_cycles: int = 0
    shuffle_cycles: int = 0
    dma_cycles: int = 0
    stall_cycles: int = 0
    overlapped_cycles: int = 0
    mac_ops: int = 0
    instructions: int = 0
    dma_bytes: int = 0
    inter_stage_dma_bytes: int = 0

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @staticmethod
    def csv_header():
        return list(CycleReport.__dataclass_fields__)

    def to_csv_row(self):
        return [getattr(self, k) for k in self.csv_header()]


def reports_to_csv(rows):
    """rows: [(label, CycleReport)] -> CSV text with a leading label column."""
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["workload"] + CycleReport.csv_header())
    for label, report in rows:
        writer.writerow([label] + report.to_csv_row())
    return out.getvalue()


def _round_shift(acc, shift):
    """Vectorised round-half-to-even of acc / 2**shift."""
    if shift == 0:
        return acc
    floor = acc >> shift
    rem = acc - (floor << shift)
    half = 1 << (shift - 1)
    up = (rem > half) | ((rem == half) & (floor & 1 == 1))
    return floor + up


class MachineState:
    def __init__(self, machine=DEFAULT_MACHINE, functional=True, trace=False):
        self.machine = machine
        self.functional = functional
        self.trace = trace
        self.onchip = OnChipBuffer(machine)
        self.offchip = OffChipMemory(machine=machine)
        self.dma = DmaEngine(self.onchip, self.offchip, machine.frequency_mhz)
        self.fabric = ShuffleFabric(machine.staging_words)
        self.array = ComputeArray(BitwidthConfig(8, 8))
        self.fabric.set_element_width(8)
        self.regs = dict(isa.RESET_VALUES)
        self.report = CycleReport()
        self.pending_dma = 0
        self.pc = 0
        self.halted = False
        self.fault = None

    @property
    def cfg(self):
        return self.array.cfg

    # -- program loop ------------------------------------------------------------

    def run(self, program):
        while not self.halted:
            if self.pc >= len(program):
                raise EngineFault("ran past the end of the program without halt", self.pc)
            self.step(program[self.pc])
        log.info("halted after %d instructions, %d cycles, %d mac ops",
                 self.report.instructions, self.report.total_cycles, self.report.mac_ops)
        return self.report

    def step(self, ins):
        pc = self.pc
        try:
            kind, cycles = self._execute(ins)
        except SigDlaError as e:
            self.halted = True
            self.fault = f"pc {pc}: {isa.format_instruction(ins)}: {e}"
            log.error("fault at pc %d (%s): %s", pc, ins.MNEMONIC, e)
            if not isinstance(e, EngineFault):
                e.pc = pc
            raise
        r = self.report
        setattr(r, kind, getattr(r, kind) + cycles)
        r.instructions += 1
        r.total_cycles = (r.compute_cycles + r.shuffle_cycles + r.dma_cycles + r.stall_cycles
                          - r.overlapped_cycles)
        if self.trace:
            log.debug("pc %d %s -> %s +%d", pc, isa.format_instruction(ins), kind, cycles)
        self.pc += 1
        if r.total_cycles > self.machine.cycle_budget:
            self.halted = True
            raise CycleBudgetExceeded(
                f"cycle budget {self.machine.cycle_budget} exceeded ({r.total_cycles})", pc)

    def _execute(self, ins):
        if isinstance(ins, isa.Halt):
            self.halted = True
            return "stall_cycles", 1
        if isinstance(ins, isa.SetReg):
            self.regs[ins.name] = ins.value
            return "stall_cycles", 1
        if isinstance(ins, isa.CtrlBitwidth):
            cfg = BitwidthConfig(ins.a_bits, ins.w_bits)
            self.array.configure(cfg)
            self.fabric.set_element_width(cfg.a_bits)
            return "stall_cycles", 1
        if isinstance(ins, isa.CtrlShuffling):
            self.fabric.configure(ins.unit_num, ins.sel_code, ins.split_code, ins.finish_flag)
            return "stall_cycles", 1
        if isinstance(ins, isa.CtrlPadding):
            self.fabric.add_padding(ins.position, ins.value)
            return "stall_cycles", 1
        if isinstance(ins, isa.RdBuf):
            self.fabric.read(self.onchip, ins.bank_start, ins.bank_offset, ins.length)
            return "shuffle_cycles", max(1, ins.length)
        if isinstance(ins, isa.WrBuf):
            self.fabric.write(self.onchip, ins.bank_start, ins.bank_offset, ins.length)
            return "shuffle_cycles", max(1, ins.length)
        if isinstance(ins, isa.ShuffleExec):
            self.fabric.execute(ins.src_base, ins.dst_base, ins.word_count, ins.src_step)
            return "shuffle_cycles", max(1, ins.word_count)
        if isinstance(ins, (isa.LoadTile, isa.StoreTile)):
            return "dma_cycles", self._dma(ins)
        if isinstance(ins, isa.ConvExec):
            return "compute_cycles", self._conv(ins)
        raise EngineFault(f"no handler for {type(ins).__name__}", self.pc)

    # -- tensor engine -----------------------------------------------------------

    def _dma(self, ins):
        direction = "load" if isinstance(ins, isa.LoadTile) else "store"
        desc = DmaDescriptor(direction, self.regs["dma-addr"] * WORD_BYTES, ins.bank_start,
                             ins.bank_offset, ins.length * WORD_BYTES)
        before = self.dma.roundtrip_bytes
        cycles = self.dma.transfer(desc, self.machine.frequency_mhz)
        self.report.dma_bytes += desc.length_bytes
        self.report.inter_stage_dma_bytes += self.dma.roundtrip_bytes - before
        self.pending_dma += cycles
        return cycles

    def conv_geometry(self):
        """Resolved conv-exec operands with the derived defaults filled in."""
        r = self.regs
        g = {k.replace("-", "_"): v for k, v in r.items()}
        g["fmap_pitch"] = r["fmap-pitch"] or r["fmap-w"] * r["fmap-c"]
        g["out_y_stride"] = r["out-y-stride"] or r["out-w"] * r["out-cols"]
        g["out_x_stride"] = r["out-x-stride"] or r["out-cols"]
        g["out_m_stride"] = r["out-m-stride"] or 1
        g["out_bits"] = r["out-bits"] or self.cfg.a_bits
        g["weight_stride"] = r["weight-stride"] or r["k-len"]
        if g["k_len"] != g["kernel_h"] * g["kernel_w"] * g["fmap_c"]:
            raise EngineFault(f"k-len {g['k_len']} != kernel-h*kernel-w*fmap-c "
                              f"({g['kernel_h']}*{g['kernel_w']}*{g['fmap_c']})", self.pc)
        if g["out_bits"] not in OUTPUT_WIDTHS:
            raise EngineFault(f"out-bits {g['out_bits']} not one of {OUTPUT_WIDTHS}", self.pc)
        if g["stride"] == 0:
            raise EngineFault("stride must be positive", self.pc)
        return g

    def _conv(self, ins):
        g = self.conv_geometry()
        rows = g["out_rows"] * g["out_w"]
        kernels = g["out_cols"]
        cycles = step_count(rows, kernels, g["k_len"], self.cfg)
        self.report.mac_ops += rows * kernels * g["k_len"]
        if self.functional:
            self._conv_values(g, ins.relu)
        if self.machine.overlap_dma:
            hidden = min(cycles, self.pending_dma)
            self.report.overlapped_cycles += hidden
        self.pending_dma = 0
        return cycles

    def _conv_values(self, g, relu):
        cfg = self.cfg
        oy = np.arange(g["out_rows"])[:, None, None, None, None]
        ox = np.arange(g["out_w"])[None, :, None, None, None]
        ky = np.arange(g["kernel_h"])[None, None, :, None, None]
        kx = np.arange(g["kernel_w"])[None, None, None, :, None]
        c = np.arange(g["fmap_c"])[None, None, None, None, :]
        iy = oy * g["stride"] + ky - g["pad_top"]
        ix = ox * g["stride"] + kx - g["pad_left"]
        valid = (iy >= 0) & (iy < g["fmap_h"]) & (ix >= 0) & (ix < g["fmap_w"])
        index = iy * g["fmap_pitch"] + ix * g["fmap_c"] + c
        valid, index = np.broadcast_arrays(valid, index)
        rows = g["out_rows"] * g["out_w"]
        index = index.reshape(rows, g["k_len"])
        valid = valid.reshape(rows, g["k_len"])
        fmap = np.zeros(index.shape, dtype=np.int64)
        if valid.any():
            fmap[valid] = self.onchip.gather_elements(g["fmap_base"], index[valid], cfg.a_bits)

        m = np.arange(g["out_cols"])[:, None]
        k = np.arange(g["k_len"])[None, :]
        weights = self.onchip.gather_elements(g["weight_base"], m * g["weight_stride"] + k, cfg.w_bits)

        acc = self.array.gemm(fmap, weights)
        out = _round_shift(acc, g["shift"])
        if relu:
            out = np.maximum(out, 0)
        lo, hi = value_range(g["out_bits"])
        if out.size and (out.min() < lo or out.max() > hi):
            bad = out[(out < lo) | (out > hi)][0]
            raise AccumulatorOverflow(
                f"requantized output {int(bad)} does not fit out-bits={g['out_bits']} (shift {g['shift']})")
        oy = np.arange(g["out_rows"])[:, None, None]
        ox = np.arange(g["out_w"])[None, :, None]
        mm = np.arange(g["out_cols"])[None, None, :]
        out_index = (g["out_offset"] + oy * g["out_y_stride"] + ox * g["out_x_stride"]
                     + mm * g["out_m_stride"])
        self.onchip.scatter_elements(g["out_base"], out_index.ravel(), out.ravel(), g["out_bits"])

    # -- tensors -----------------------------------------------------------------

    def write_tensor(self, spec, elements):
        elements = np.asarray(elements, dtype=np.int64)
        if spec.space == "onchip":
            if spec.offset:
                index = spec.offset + np.arange(elements.size)
                self.onchip.scatter_elements(spec.address, index, elements, spec.bits)
            else:
                self.onchip.write_elements(spec.address, elements, spec.bits)
        else:
            if spec.offset:
                raise MappingError(f"off-chip tensor {spec.name} cannot start mid-word")
            self.offchip.write_elements(spec.address, elements, spec.bits)

    def read_tensor(self, spec):
        if spec.space == "onchip":
            return self.onchip.read_elements(spec.address, spec.offset, spec.count, spec.bits)
        return self.offchip.read_elements(spec.address, spec.offset + spec.count, spec.bits)[spec.offset:]

    def load_plan(self, plan, inputs=None):
        inputs = inputs or {}
        unknown = set(inputs) - set(plan.inputs)
        if unknown:
            raise MappingError(f"no such input(s): {sorted(unknown)}; plan takes {plan.inputs}")
        for name, values in plan.constants.items():
            self.write_tensor(plan.tensors[name], values)
        for name in plan.inputs:
            if name in inputs:
                self.write_tensor(plan.tensors[name], plan.encode_input(name, inputs[name]))
            elif self.functional:
                log.warning("input %s not given, running on zeros", name)


def run(program, plan=None, inputs=None, machine=DEFAULT_MACHINE, functional=True, trace=False):
    """Execute a program; returns (outputs, CycleReport).

    Outputs are decoded through the plan's layouts, keyed by tensor name.
    """
    if plan is not None and functional and not plan.functional:
        raise MappingError(f"{plan.kind} plan supports timing-only runs (functional=False)")
    state = MachineState(machine, functional, trace)
    if plan is not None:
        state.load_plan(plan, inputs)
    report = state.run(program)
    outputs = {}
    if plan is not None and functional:
        for name in plan.outputs:
            spec = plan.tensors[name]
            outputs[name] = plan.decode_output(name, state.read_tensor(spec))
    return outputs, report


def run_workload(workload, inputs=None, machine=DEFAULT_MACHINE, functional=True, trace=False):
    program, plan = map_workload(workload, machine)
    outputs, report = run(program, plan, inputs, machine, functional, trace)
    return outputs, report, plan


def compare_configs(workload, cfg_a, cfg_b, machine=DEFAULT_MACHINE):
    """cycles(cfg_a) / cycles(cfg_b); cycle counts do not depend on data values."""
    cycles = []
    for cfg in (cfg_a, cfg_b):
        program, plan = map_workload(workload.with_cfg(cfg), machine)
        _, report = run(program, plan, machine=machine, functional=False)
        cycles.append(report.total_cycles)
    ratio = cycles[0] / cycles[1]
    log.info("%s: %s %d cycles, %s %d cycles, ratio %.2f", workload.label, cfg_a, cycles[0],
             cfg_b, cycles[1], ratio)
    return ratio

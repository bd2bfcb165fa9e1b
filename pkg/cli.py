#!/usr/bin/env python3
"""Command line front end: assemble, map, run, verify and benchmark.

Exit status: 0 success, 1 verification failure, 2 usage or parse error,
3 engine fault.
"""
import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

import isa
import reference
from config import DEFAULT_MACHINE, MachineConfig, fixture_path
from engine import CycleReport, reports_to_csv, run
from errors import (EXIT_OK, EXIT_USAGE, EXIT_VERIFY_FAILED, ConfigError, MappingError,
                    SigDlaError, exit_code_for)
from mac_array import BitwidthConfig
from mapper import Workload, count_mult_adds, count_parameters, map_workload, plan_weights

log = logging.getLogger("sigdla")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".gif")
FFT_RMS_TOLERANCE = {16: 5e-3, 8: 0.5}
# 8-bit intermediates keep the row pass two bits short of full range
DCT_RMS_TOLERANCE = {16: 1e-2, 8: 2.5e-2, 4: 0.5}


def setup_logging(verbose=False):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT)


# -- manifests and inputs ----------------------------------------------------------

@dataclass
class RunManifest:
    workload: str
    machine: str = None
    input: str = None
    out: str = None
    format: str = "json"
    seed: int = 0
    overrides: dict = field(default_factory=dict)

    @classmethod
    def from_args(cls, args):
        if getattr(args, "manifest", None):
            try:
                with open(args.manifest) as f:
                    data = json.load(f)
            except FileNotFoundError:
                raise ConfigError(f"manifest not found: {args.manifest}") from None
            except json.JSONDecodeError as e:
                raise ConfigError(f"manifest {args.manifest} is not valid JSON: {e}") from e
            base = os.path.dirname(os.path.abspath(args.manifest))
            for key in ("workload", "machine", "input", "out"):
                if data.get(key) and not os.path.isabs(data[key]):
                    data[key] = os.path.join(base, data[key])
        else:
            data = {}
        manifest = cls(
            workload=args.workload or data.get("workload"),
            machine=args.machine or data.get("machine"),
            input=args.input or data.get("input"),
            out=args.out or data.get("out"),
            format=args.format or data.get("format", "json"),
            seed=args.seed if args.seed is not None else data.get("seed", 0),
            overrides={"overlap_dma": True if args.overlap_dma else None,
                       "cycle_budget": args.cycle_budget},
        )
        if not manifest.workload:
            raise ConfigError("no workload given (use --workload or a manifest)")
        if manifest.format not in ("json", "csv"):
            raise ConfigError(f"unknown report format {manifest.format!r}")
        return manifest


def resolve_fixture(path, *subdirs):
    """Path as given, else looked up under the fixture directory."""
    if os.path.exists(path):
        return path
    for sub in subdirs:
        for candidate in (fixture_path(sub, path), fixture_path(sub, path + ".json")):
            if os.path.exists(candidate):
                return candidate
    raise ConfigError(f"file not found: {path}")


def load_machine(path, overrides=None):
    machine = MachineConfig.from_json(resolve_fixture(path, "machines")) if path else DEFAULT_MACHINE
    return machine.with_overrides(**(overrides or {}))


def load_workload(path):
    return Workload.from_json(resolve_fixture(path, "workloads"))


def load_image_input(path, spec, bits):
    """Pixels as signed values centred on zero, resized to the tensor shape."""
    h, w, c = spec.shape
    with Image.open(path) as img:
        img = img.convert("L" if c == 1 else "RGB")
        if img.size != (w, h):
            img = img.resize((w, h))
        pixels = np.asarray(img, dtype=np.int64).reshape(h, w, -1)
    if pixels.shape[2] != c:
        raise ConfigError(f"image has {pixels.shape[2]} channels, layer expects {c}")
    if bits >= 8:
        return pixels - 128
    return (pixels >> (8 - bits)) - (1 << (bits - 1))


def read_signal(path):
    """CSV (one sample per line, 're' or 're,im') or raw little-endian int16."""
    if path.endswith(".bin"):
        with open(path, "rb") as f:
            return np.frombuffer(f.read(), dtype="<i2").astype(np.int64)
    values = []
    complex_input = False
    with open(path, newline="") as f:
        for row in csv.reader(f):
            row = [cell.strip() for cell in row if cell.strip()]
            if not row or row[0].startswith("#"):
                continue
            if len(row) == 1:
                values.append(complex(int(row[0]), 0))
            else:
                complex_input = True
                values.append(complex(int(row[0]), int(row[1])))
    values = np.array(values)
    return values if complex_input else values.real.astype(np.int64)


def load_inputs(path, plan, rng):
    if not path:
        return plan.sample_inputs(rng)
    if not os.path.exists(path):
        raise ConfigError(f"input file not found: {path}")
    if not plan.inputs:
        raise MappingError(f"{plan.kind} plan takes no inputs")
    name = plan.inputs[0]
    spec = plan.tensors[name]
    if path.lower().endswith(IMAGE_SUFFIXES):
        if spec.layout != "hwc":
            raise ConfigError(f"image input given for a {spec.layout} tensor")
        return {name: load_image_input(path, spec, plan.cfg.a_bits)}
    if path.endswith(".json"):
        with open(path) as f:
            data = json.load(f)
        if isinstance(data, dict):
            return {k: _from_json_value(v) for k, v in data.items()}
        return {name: _from_json_value(data)}
    return {name: read_signal(path)}


def _from_json_value(value):
    arr = np.asarray(value)
    if arr.ndim == 2 and arr.shape[1] == 2 and arr.dtype.kind in "iu":
        return arr[:, 0] + 1j * arr[:, 1]
    return arr


def _to_json_value(value):
    arr = np.asarray(value)
    if np.iscomplexobj(arr):
        return [[_num(v.real), _num(v.imag)] for v in arr.ravel()]
    return np.vectorize(_num, otypes=[object])(arr).tolist() if arr.size else []


def _num(v):
    f = float(v)
    return int(f) if f.is_integer() else f


# -- verification ------------------------------------------------------------------

@dataclass
class Check:
    name: str
    passed: bool
    max_error: float = 0.0
    detail: str = ""

    def line(self):
        verdict = "pass" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{verdict:4}  {self.name}: max error {self.max_error:g}{extra}"


def _exact(name, actual, expected):
    actual = np.asarray(actual)
    expected = np.asarray(expected)
    if actual.shape != expected.shape:
        return Check(name, False, float("inf"), f"shape {actual.shape} != {expected.shape}")
    err = float(np.abs(actual.astype(np.complex128) - expected.astype(np.complex128)).max()) if actual.size else 0.0
    return Check(name, err == 0, err, "bit-exact")


def _fft_checks(wl, prefix, x, outputs):
    y = outputs[f"{prefix}.y"]
    bits = wl.cfg.a_bits
    re, im = reference.fixed_fft(np.real(x).astype(np.int64), np.imag(x).astype(np.int64), bits, wl.inverse)
    golden = np.array(re) + 1j * np.array(im)
    checks = [_exact(f"{prefix} vs fixed-point golden FFT", y, golden)]
    ideal = reference.dft(x, wl.inverse) / len(x)
    rms = reference.relative_rms(y, ideal)
    tol = FFT_RMS_TOLERANCE[bits]
    checks.append(Check(f"{prefix} vs DFT/n", rms <= tol, rms, f"relative RMS, tolerance {tol:g}"))
    return checks


def _fir_checks(wl, plan, prefix, x, outputs):
    h = wl.coefficients if wl.coefficients is not None else [1] * wl.taps
    shift = plan.notes["shifts"][prefix]
    expected = [reference.requantize(v, shift) for v in reference.fir(x, h)]
    return [_exact(f"{prefix} vs direct convolution", outputs[f"{prefix}.y"], expected)]


def _dct_checks(wl, prefix, x, outputs):
    actual = outputs[f"{prefix}.y"]
    expected = np.stack([reference.dct2d(block) for block in np.asarray(x)])
    rms = reference.relative_rms(actual.ravel(), expected.ravel())
    tol = DCT_RMS_TOLERANCE[wl.cfg.a_bits]
    return [Check(f"{prefix} vs 2-D DCT", rms <= tol, rms, f"relative RMS, tolerance {tol:g}")]


def _dwt_checks(wl, plan, prefix, x, outputs):
    taps = plan.notes["taps"][prefix]
    shift = plan.notes["shifts"][prefix]
    expected = reference.dwt_fixed(x, taps["lo"], taps["hi"], wl.levels, shift)
    names = [f"{prefix}.hi{l}" for l in range(1, wl.levels + 1)] + [f"{prefix}.lo"]
    return [_exact(f"{name} vs integer filter bank", outputs[name], exp)
            for name, exp in zip(names, expected)]


def _conv_checks(plan, keys, layers, x, outputs):
    """Chain the exact conv oracle over layers stored under `keys`."""
    value = np.asarray(x).reshape(layers[0].in_h, layers[0].in_w, layers[0].in_c)
    for key, layer in zip(keys, layers):
        w = plan_weights(plan, key, layer)
        value = reference.conv_layer(value, w, layer.stride, (layer.pad_h, layer.pad_w),
                                     plan.notes["shifts"][key], layer.relu)
    out_name = f"{keys[-1]}.y"
    return [_exact(f"{out_name} vs direct convolution", outputs[out_name], value)], outputs[out_name]


def _stage_checks(wl, plan, prefix, x, outputs):
    if wl.kind == "fft":
        return _fft_checks(wl, prefix, x, outputs), outputs[f"{prefix}.y"]
    if wl.kind == "fir":
        return _fir_checks(wl, plan, prefix, x, outputs), outputs[f"{prefix}.y"]
    if wl.kind == "dct2d":
        return _dct_checks(wl, prefix, x, outputs), outputs[f"{prefix}.y"]
    if wl.kind == "dwt":
        return _dwt_checks(wl, plan, prefix, x, outputs), outputs[f"{prefix}.lo"]
    if wl.kind == "conv":
        return _conv_checks(plan, [prefix], [wl.layer], x, outputs)
    if wl.kind == "network":
        layers = wl.network_layers()
        return _conv_checks(plan, [f"{prefix}.{i}" for i in range(len(layers))], layers, x, outputs)
    raise MappingError(f"no oracle for {wl.kind}")


def _as_stage_input(value, wl):
    """Previous stage output in the shape the next stage's oracle takes."""
    arr = np.asarray(value)
    if np.iscomplexobj(arr) and wl.kind in ("network", "conv"):
        out = np.empty(arr.size * 2, dtype=np.int64)
        out[0::2], out[1::2] = arr.real, arr.imag
        return out
    return arr


def verify_outputs(wl, plan, inputs, outputs):
    """Oracle checks for every stage; pipelines feed each simulated output onward."""
    if not plan.functional:
        return [Check(f"{wl.label}", True, 0.0, "timing-only plan, no oracle")]
    if wl.kind == "pipeline":
        checks = []
        value = None
        for i, stage in enumerate(wl.stages):
            prefix = f"s{i}.{stage.kind}"
            x = inputs[plan.inputs[0]] if i == 0 else _as_stage_input(value, stage)
            stage_checks, value = _stage_checks(stage, plan, prefix, x, outputs)
            checks.extend(stage_checks)
        return checks
    x = inputs[plan.inputs[0]]
    if wl.kind == "network":
        layers = wl.network_layers()
        name = wl.network or "network"
        keys = [f"{name}.{i}.{layer.name or layer.kind}" for i, layer in enumerate(layers)]
        return _conv_checks(plan, keys, layers, x, outputs)[0]
    return _stage_checks(wl, plan, wl.kind, x, outputs)[0]


# -- commands ----------------------------------------------------------------------

def cmd_assemble(args):
    with open(args.source) as f:
        program = isa.assemble(f.read())
    out = args.out or os.path.splitext(args.source)[0] + ".bin"
    with open(out, "wb") as f:
        f.write(isa.encode_program(program))
    print(f"{len(program)} instructions -> {out}")
    return EXIT_OK


def cmd_disassemble(args):
    with open(args.binary, "rb") as f:
        program = isa.decode_program(f.read())
    text = isa.disassemble(program) + "\n"
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_map(args):
    wl = load_workload(args.workload)
    machine = load_machine(args.machine)
    program, plan = map_workload(wl, machine)
    problems = plan.validate(program)
    for p in problems:
        log.error("%s", p)
    out = args.out or wl.label
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "program.bin"), "wb") as f:
        f.write(isa.encode_program(program))
    with open(os.path.join(out, "program.asm"), "w") as f:
        f.write(isa.disassemble(program) + "\n")
    plan.save(out)
    print(f"{wl.label}: {len(program)} instructions, {plan.mult_adds} mult-adds -> {out}")
    return EXIT_USAGE if problems else EXIT_OK


def _write_report(report, manifest):
    text = report.to_json() + "\n" if manifest.format == "json" else reports_to_csv([("run", report)])
    if manifest.out:
        with open(os.path.join(manifest.out, f"report.{manifest.format}"), "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _simulate(args):
    manifest = RunManifest.from_args(args)
    wl = load_workload(manifest.workload)
    machine = load_machine(manifest.machine, manifest.overrides)
    program, plan = map_workload(wl, machine)
    functional = plan.functional and not getattr(args, "timing_only", False)
    rng = np.random.default_rng(manifest.seed)
    inputs = load_inputs(manifest.input, plan, rng) if functional else {}
    outputs, report = run(program, plan, inputs, machine, functional, getattr(args, "trace", False))
    return manifest, wl, plan, inputs, outputs, report


def cmd_run(args):
    manifest, wl, plan, inputs, outputs, report = _simulate(args)
    if manifest.out:
        os.makedirs(manifest.out, exist_ok=True)
        with open(os.path.join(manifest.out, "outputs.json"), "w") as f:
            json.dump({k: _to_json_value(v) for k, v in outputs.items()}, f, sort_keys=True)
            f.write("\n")
    _write_report(report, manifest)
    log.info("%s: %d cycles", wl.label, report.total_cycles)
    return EXIT_OK


def cmd_verify(args):
    manifest, wl, plan, inputs, outputs, report = _simulate(args)
    checks = verify_outputs(wl, plan, inputs, outputs)
    for check in checks:
        print(check.line())
    failed = [c for c in checks if not c.passed]
    print(f"{wl.label}: {len(checks) - len(failed)}/{len(checks)} checks passed, "
          f"{report.total_cycles} cycles")
    return EXIT_VERIFY_FAILED if failed else EXIT_OK


def load_suite(path):
    path = resolve_fixture(path, "bench")
    with open(path) as f:
        suite = json.load(f)
    entries = []
    for item in suite.get("workloads", []):
        entries.append(load_workload(item) if isinstance(item, str) else Workload.from_dict(item))
    configs = [BitwidthConfig.parse(c) for c in suite.get("configs", ["16x16", "8x8", "4x4"])]
    return suite.get("name", os.path.basename(path)), entries, configs


BENCH_BASELINE = BitwidthConfig(16, 16)


def bench_rows(entries, configs, machine):
    """[(label, cfg, CycleReport or None, speedup, error)].

    Speedups are against the 16x16 run, or the first config when a suite
    leaves 16x16 out. A workload whose baseline does not map gets no ratios.
    """
    if not configs:
        return []
    base_cfg = BENCH_BASELINE if BENCH_BASELINE in configs else configs[0]
    rows = []
    for wl in entries:
        results = {}
        for cfg in configs:
            try:
                program, plan = map_workload(wl.with_cfg(cfg), machine)
            except MappingError as e:
                log.info("%s at %s: %s", wl.label, cfg, e)
                results[cfg] = (None, str(e))
                continue
            _, report = run(program, plan, machine=machine, functional=False)
            results[cfg] = (report, "")
        baseline, base_error = results[base_cfg]
        if baseline is None:
            log.error("%s: baseline %s does not map, no speedups", wl.label, base_cfg)
        for cfg in configs:
            report, error = results[cfg]
            if report is not None and baseline is None:
                error = f"baseline {base_cfg} failed: {base_error}"
            speedup = baseline.total_cycles / report.total_cycles if report is not None and baseline is not None else None
            rows.append((wl.label, cfg, report, speedup, error))
    return rows


def cmd_bench(args):
    name, entries, configs = load_suite(args.suite)
    machine = load_machine(args.machine, {"overlap_dma": True if args.overlap_dma else None})
    rows = bench_rows(entries, configs, machine)
    header = ["workload", "cfg", "speedup"] + CycleReport.csv_header() + ["error"]
    blank = [None] * len(CycleReport.csv_header())
    if args.format == "json":
        table = [dict(zip(header, [label, str(cfg), speedup] +
                          (report.to_csv_row() if report else blank) + [error]))
                 for label, cfg, report, speedup, error in rows]
        text = json.dumps({"suite": name, "machine": machine.to_dict(), "rows": table}, indent=2) + "\n"
    else:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for label, cfg, report, speedup, error in rows:
            writer.writerow([label, str(cfg), "" if speedup is None else f"{speedup:.3f}"]
                            + (report.to_csv_row() if report else [""] * len(blank)) + [error])
        text = buf.getvalue()
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def count_workloads():
    rows = [Workload("fft", points=1024, name="radix2-FFT 1024"),
            Workload("fir", taps=80, length=256, name="80-tap FIR 256")]
    for net in ("tiny_vgg", "ultranet", "resnet20"):
        rows.append(Workload("network", network=net, name=net))
    return rows


def cmd_count(args):
    workloads = [load_workload(args.workload)] if args.workload else count_workloads()
    print(f"{'workload':24} {'mult-adds':>14} {'parameters':>12}")
    for wl in workloads:
        print(f"{wl.label:24} {count_mult_adds(wl):>14,} {count_parameters(wl):>12,}")
    return EXIT_OK


def cmd_serve(args):
    import app
    app.serve(args.host, args.port)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="sigdla", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("assemble", help="assembly text -> binary")
    p.add_argument("source")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("disassemble", help="binary -> assembly text")
    p.add_argument("binary")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_disassemble)

    p = sub.add_parser("map", help="compile a workload to program + plan")
    p.add_argument("--workload", required=True)
    p.add_argument("--machine")
    p.add_argument("--out")
    p.set_defaults(func=cmd_map)

    for name, func, text in (("run", cmd_run, "simulate a workload"),
                             ("verify", cmd_verify, "simulate and check against oracles")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--manifest")
        p.add_argument("--workload")
        p.add_argument("--machine")
        p.add_argument("--input")
        p.add_argument("--out")
        p.add_argument("--format", choices=("json", "csv"))
        p.add_argument("--overlap-dma", action="store_true")
        p.add_argument("--cycle-budget", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--trace", action="store_true", help="log every retired instruction")
        if name == "run":
            p.add_argument("--timing-only", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("bench", help="cycle table across bit widths")
    p.add_argument("suite")
    p.add_argument("--machine")
    p.add_argument("--format", choices=("json", "csv"), default="csv")
    p.add_argument("--overlap-dma", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("count", help="mult-adds and parameters")
    p.add_argument("--workload")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("serve", help="start the HTTP API")
    p.add_argument("--host", default=os.environ.get("SIGDLA_HOST", "0.0.0.0"))
    p.add_argument("--port", type=int, default=int(os.environ.get("SIGDLA_PORT", "5000")))
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    try:
        return args.func(args)
    except (SigDlaError, OSError, ValueError) as e:
        code = exit_code_for(e)
        log.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())

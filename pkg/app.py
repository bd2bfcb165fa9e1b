from flask import Flask, Response, jsonify, request
import logging
import os
import threading
import time

import numpy as np

import isa
from cli import _from_json_value, _to_json_value, load_workload
from config import DEFAULT_MACHINE, MachineConfig
from engine import run
from errors import ENGINE_ERRORS, SigDlaError
from mapper import Workload, count_mult_adds, count_parameters, map_workload

log = logging.getLogger(__name__)

app = Flask(__name__)

# Allowed CORS origins for browser front ends
ALLOWED_ORIGINS = [
    'http://localhost:3000',  # For local development
    'http://127.0.0.1:3000',  # For local development
    'http://localhost:5173',  # Vite dev server
    'http://127.0.0.1:5173',  # Vite dev server
]

def is_allowed_origin(origin):
    """Check if the origin is allowed for CORS"""
    if not origin:
        return True  # Allow requests without origin (direct API calls)
    extra = os.environ.get('SIGDLA_ORIGINS', '')
    return origin in ALLOWED_ORIGINS or origin in [o for o in extra.split(',') if o]

def get_cors_origin(request_origin):
    """Get the appropriate CORS origin header value"""
    if is_allowed_origin(request_origin):
        return request_origin if request_origin else '*'
    return None

def _cors_headers(response, cors_origin):
    response.headers.add('Access-Control-Allow-Origin', cors_origin)
    response.headers.add('Access-Control-Allow-Headers', 'Content-Type,Authorization,X-Requested-With')
    response.headers.add('Access-Control-Allow-Methods', 'GET,POST,OPTIONS')
    response.headers.add('Access-Control-Max-Age', '3600')  # Cache preflight for 1 hour

# Add CORS headers to all responses
@app.after_request
def after_request(response):
    cors_origin = get_cors_origin(request.headers.get('Origin'))
    if cors_origin:
        _cors_headers(response, cors_origin)
    return response

# Handle preflight OPTIONS requests for every route
@app.before_request
def handle_options():
    if request.method != 'OPTIONS':
        return None
    response = Response()
    if not get_cors_origin(request.headers.get('Origin')):
        response.status_code = 403
    return response


class Simulator:
    """Shared state behind the HTTP API: machine config and run counters."""

    def __init__(self, machine=DEFAULT_MACHINE):
        self.machine = machine
        self.lock = threading.Lock()
        self.started = time.time()
        self.runs = 0
        self.faults = 0
        self.last_report = None

    def machine_for(self, overrides):
        if not overrides:
            return self.machine
        data = self.machine.to_dict()
        data.update(overrides)
        return MachineConfig.from_dict(data)

    def simulate(self, workload, machine, inputs=None, timing_only=False):
        program, plan = map_workload(workload, machine)
        functional = plan.functional and not timing_only
        if functional and inputs is None:
            inputs = plan.sample_inputs(np.random.default_rng(workload.seed))
        try:
            outputs, report = run(program, plan, inputs if functional else {}, machine, functional)
        except ENGINE_ERRORS:
            with self.lock:
                self.faults += 1
            raise
        with self.lock:
            self.runs += 1
            self.last_report = report
        return outputs, report

    def status(self):
        with self.lock:
            return {
                "uptime_s": round(time.time() - self.started, 1),
                "runs": self.runs,
                "faults": self.faults,
                "machine": self.machine.to_dict(),
                "last_report": self.last_report.to_dict() if self.last_report else None,
            }


simulator = Simulator()


def _error(e, code=400):
    return jsonify({"status": "error", "message": str(e)}), code


def _workload_from(body):
    spec = body.get("workload")
    if spec is None:
        raise SigDlaError("request needs a `workload`")
    if isinstance(spec, str):
        return load_workload(spec)
    return Workload.from_dict(spec)


@app.route('/status')
def status():
    """Simulator counters and the active machine configuration"""
    return jsonify({"status": "success", **simulator.status()})

@app.route('/assemble', methods=['POST'])
def assemble():
    body = request.get_json(silent=True) or {}
    try:
        program = isa.assemble(body.get("source", ""))
    except SigDlaError as e:
        return _error(e)
    words = [f"0x{isa.encode(i):08x}" for i in program]
    return jsonify({"status": "success", "instructions": len(program), "words": words})

@app.route('/disassemble', methods=['POST'])
def disassemble():
    body = request.get_json(silent=True) or {}
    try:
        words = [int(w, 16) if isinstance(w, str) else int(w) for w in body.get("words", [])]
        program = isa.Program([isa.decode(w) for w in words])
    except (SigDlaError, ValueError) as e:
        return _error(e)
    return jsonify({"status": "success", "source": isa.disassemble(program)})

@app.route('/run', methods=['POST'])
def run_workload():
    body = request.get_json(silent=True) or {}
    try:
        workload = _workload_from(body)
        machine = simulator.machine_for(body.get("machine"))
        inputs = body.get("inputs")
        if inputs is not None:
            inputs = {name: _from_json_value(v) for name, v in inputs.items()}
        outputs, report = simulator.simulate(workload, machine, inputs, body.get("timing_only", False))
    except ENGINE_ERRORS as e:
        log.error("engine fault: %s", e)
        return _error(e, 500)
    except (SigDlaError, ValueError) as e:
        return _error(e)
    return jsonify({
        "status": "success",
        "workload": workload.label,
        "report": report.to_dict(),
        "outputs": {k: _to_json_value(v) for k, v in outputs.items()},
    })

@app.route('/count', methods=['POST'])
def count():
    body = request.get_json(silent=True) or {}
    try:
        workload = _workload_from(body)
        return jsonify({"status": "success", "workload": workload.label,
                        "mult_adds": count_mult_adds(workload),
                        "parameters": count_parameters(workload)})
    except (SigDlaError, ValueError) as e:
        return _error(e)


def serve(host=None, port=None):
    """Run the API server (blocking)"""
    host = host or os.environ.get('SIGDLA_HOST', '0.0.0.0')
    port = int(port or os.environ.get('SIGDLA_PORT', 5000))
    log.info("SigDLA API on http://%s:%d", host, port)
    app.run(host=host, port=port, debug=False, threaded=True, use_reloader=False)

if __name__ == '__main__':
    logging.basicConfig(level=logging.INFO)
    serve()

#!/usr/bin/env python3
"""
SigDLA Simulator Server
Run this script to check the environment and start the simulator HTTP API
"""

import logging
import os
import sys


def check_dependencies():
    """Check if all required dependencies are available"""
    try:
        import flask
        import numpy
        import PIL
        print("✓ All Python dependencies found")
        return True
    except ImportError as e:
        print(f"✗ Missing dependency: {e}")
        print("Please install dependencies with: pip install -r requirements.txt")
        return False


def check_fixtures():
    """Check that the bundled networks and workloads are reachable"""
    from config import fixtures_dir
    root = fixtures_dir()
    missing = [d for d in ("networks", "workloads", "machines") if not os.path.isdir(os.path.join(root, d))]
    if missing:
        print(f"✗ Fixture directories missing under {root}: {', '.join(missing)}")
        print("Set SIGDLA_FIXTURES to the fixtures directory")
        return False
    print(f"✓ Fixtures found in {root}")
    return True


def main():
    """Main function to run the simulator server"""
    print("SigDLA Simulator Server")
    print("=" * 45)

    if not check_dependencies():
        sys.exit(1)

    if not check_fixtures():
        print("Warning: named workloads and networks will not resolve.")

    port = os.environ.get("SIGDLA_PORT", "5000")
    print("\nStarting server...")
    print("API will be available at:")
    print(f"  - Local: http://localhost:{port}")
    print("\nEndpoints:")
    print("  - GET  /status")
    print("  - POST /assemble, /disassemble, /run, /count")
    print("\nPress Ctrl+C to stop the server")
    print("=" * 45)

    try:
        from cli import setup_logging
        setup_logging(verbose="--verbose" in sys.argv)
        import app
        app.serve()
    except KeyboardInterrupt:
        print("\nShutting down gracefully...")
    except Exception as e:
        logging.getLogger("sigdla").exception("server stopped")
        print(f"Error running server: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()

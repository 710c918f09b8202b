"""Sidecar launcher: ``sidecar --backend echo --transport stdio``."""
from __future__ import annotations

import argparse
import sys

from .backends import BACKENDS, STOP_MODES, BackendConfig
from .server import serve_stdio, serve_tcp


def parse_args(argv=None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="sidecar",
        description="Host a text generator behind the JSON-lines protocol.")
    parser.add_argument("--backend", choices=BACKENDS, default="echo")
    parser.add_argument("--script", help="script file for the scripted_file backend")
    parser.add_argument("--model", help="model id for the hf backend")
    parser.add_argument("--device", default="cpu", help="device hint for the hf backend")
    parser.add_argument("--max-context", type=int, default=4096,
                        help="prompt truncation length in tokens (hf backend)")
    parser.add_argument("--stop-mode", choices=STOP_MODES, default="truncate")
    parser.add_argument("--transport", default="stdio",
                        help="stdio (default) or tcp:PORT")
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    try:
        config = BackendConfig(backend=args.backend, script_path=args.script,
                               model_id=args.model, device=args.device,
                               max_context_tokens=args.max_context,
                               stop_mode=args.stop_mode)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.transport == "stdio":
            return serve_stdio(config)
        if args.transport.startswith("tcp:"):
            try:
                port = int(args.transport[len("tcp:"):])
            except ValueError:
                print(f"error: bad tcp port in {args.transport!r}", file=sys.stderr)
                return 2
            return serve_tcp(config, port)
        print(f"error: unknown transport {args.transport!r}", file=sys.stderr)
        return 2
    except (RuntimeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 0


if __name__ == "__main__":
    sys.exit(main())

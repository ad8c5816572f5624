"""Command-line entry points: `lpm-run` (scripted sessions) and
`lpm-serve` (TCP + WebSocket service)."""
from __future__ import annotations

import argparse
import json
import sys
from typing import Optional

from .protocol import dump_message
from .session import SessionConfig, load_event_script, run_session


def _parse_lat(text: str) -> tuple[float, float, float]:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated latencies")
    return tuple(parts)  # type: ignore[return-value]


def _parse_addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host, int(port)


def main_run(argv: Optional[list[str]] = None) -> int:
    """Run a scripted session and write its trace."""
    ap = argparse.ArgumentParser(
        prog="lpm-run",
        description="Run a deterministic scripted session and emit the NDJSON trace.",
    )
    ap.add_argument("--script", help="NDJSON event script (omit for an empty timeline)")
    ap.add_argument("--chunks", type=int, default=12, help="chunks to generate")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lat", type=_parse_lat, default=(700.0, 700.0, 180.0),
                    help="generator,refiner,decoder latency in ms")
    ap.add_argument("--lookahead", type=int, default=2)
    ap.add_argument("--playback", choices=("auto", "ack"), default="auto")
    ap.add_argument("--grace-ms", type=float, default=0.0,
                    help="delay applied to user_speech_end events")
    ap.add_argument("--sample-rate", type=int, default=16000)
    ap.add_argument("--config", help="JSON file with a full session config object")
    ap.add_argument("--out", help="trace NDJSON path (default: stdout)")
    args = ap.parse_args(argv)

    if args.config:
        with open(args.config) as fh:
            config = SessionConfig.from_dict(json.load(fh))
    else:
        config = SessionConfig(
            seed=args.seed,
            lookahead=args.lookahead,
            stage_latency_ms=args.lat,
            playback=args.playback,
            speech_end_grace_ms=args.grace_ms,
            sample_rate=args.sample_rate,
        )
    events = load_event_script(args.script, config.sample_rate) if args.script else []
    trace = run_session(config, events, args.chunks, trace_path=args.out)
    if not args.out:
        for msg in trace.messages:
            sys.stdout.write(dump_message(msg) + "\n")
    else:
        m = trace.metrics
        sys.stdout.write(
            f"wrote {len(trace.messages)} messages to {args.out} "
            f"(chunks={m['chunks']}, final_state={m['final_state']})\n"
        )
    return 0


def main_serve(argv: Optional[list[str]] = None) -> int:
    """Serve live sessions over TCP and/or WebSocket."""
    ap = argparse.ArgumentParser(
        prog="lpm-serve",
        description="Serve live sessions (NDJSON over TCP and WebSocket).",
    )
    ap.add_argument("--tcp", type=_parse_addr, help="host:port for the NDJSON front")
    ap.add_argument("--ws", type=_parse_addr, help="host:port for the WebSocket front")
    ap.add_argument("--static", help="directory served at / (the browser console build)")
    ap.add_argument("--time-scale", type=float, default=1.0,
                    help="wall seconds per virtual second")
    ap.add_argument("--max-chunks", type=int, default=64,
                    help="default chunk budget per session")
    args = ap.parse_args(argv)
    if not args.tcp and not args.ws:
        ap.error("need --tcp and/or --ws")

    from .service import SessionRegistry, build_app, serve_tcp

    registry = SessionRegistry(default_time_scale=args.time_scale, max_chunks=args.max_chunks)
    tcp_server = tcp_thread = None
    if args.tcp:
        host, port = args.tcp
        tcp_server, tcp_thread = serve_tcp(host, port, registry)
        sys.stdout.write(f"tcp front on {host}:{port}\n")
    try:
        if args.ws:
            import uvicorn

            host, port = args.ws
            app = build_app(registry, static_dir=args.static)
            sys.stdout.write(f"ws front on {host}:{port}\n")
            uvicorn.run(app, host=host, port=port, log_level="warning")
        elif tcp_thread is not None:
            tcp_thread.join()  # pragma: no cover - blocks until killed
    except KeyboardInterrupt:  # pragma: no cover
        pass
    finally:
        registry.shutdown()
        if tcp_server is not None:
            tcp_server.shutdown()
    return 0


if __name__ == "__main__":
    sys.exit(main_run())

"""Wire protocol: message shapes shared by the TCP and WebSocket fronts.

Client messages: start, audio, text, event, play_ack, end.
Server messages: chunk, state, metrics, error.

Scripts are NDJSON rows of client messages plus a required ``at`` time in
virtual milliseconds. Validation normalizes a raw dict or raises
ProtocolError with a message safe to echo back to the client.
"""
from __future__ import annotations

import json
import math
from typing import Any

import numpy as np

from ..errors import ProtocolError
from .events import EVENT_NAMES, ControlEvent

CLIENT_TYPES = ("start", "audio", "text", "event", "play_ack", "end")
SERVER_TYPES = ("chunk", "state", "metrics", "error")


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ProtocolError(msg)


def _synth_samples(data: dict[str, Any], sample_rate: int) -> np.ndarray:
    """Expand the compact script forms into raw samples."""
    if "samples" in data:
        arr = np.asarray(data["samples"], dtype=np.float32).reshape(-1)
        _require(np.isfinite(arr).all(), "audio samples must be finite")
        return arr
    if "silence_ms" in data:
        n = int(round(float(data["silence_ms"]) * sample_rate / 1000.0))
        _require(n >= 0, "silence_ms must be >= 0")
        return np.zeros(n, dtype=np.float32)
    if "tone_ms" in data:
        n = int(round(float(data["tone_ms"]) * sample_rate / 1000.0))
        _require(n >= 0, "tone_ms must be >= 0")
        freq = float(data.get("freq", 440.0))
        amp = float(data.get("amp", 0.1))
        t = np.arange(n, dtype=np.float64) / sample_rate
        return (amp * np.sin(2 * math.pi * freq * t)).astype(np.float32)
    raise ProtocolError("audio message needs samples, silence_ms, or tone_ms")


def validate_client_message(raw: Any) -> dict[str, Any]:
    """Check one client message; returns the dict unchanged on success."""
    _require(isinstance(raw, dict), "message must be a JSON object")
    mtype = raw.get("type")
    _require(mtype in CLIENT_TYPES, f"unknown client message type {mtype!r}")
    if mtype == "audio":
        stream = raw.get("stream")
        _require(stream in ("user", "agent"), f"unknown audio stream {stream!r}")
        _require(
            any(k in raw for k in ("samples", "silence_ms", "tone_ms")),
            "audio message needs samples, silence_ms, or tone_ms",
        )
    elif mtype == "text":
        _require(isinstance(raw.get("text"), str), "text message needs a string")
    elif mtype == "event":
        name = raw.get("name")
        _require(name in EVENT_NAMES, f"unknown event name {name!r}")
        _require(name != "warmup_complete", "warmup_complete is engine-internal")
    elif mtype == "play_ack":
        idx = raw.get("index")
        _require(isinstance(idx, int) and idx >= 0, "play_ack needs index >= 0")
    elif mtype == "start":
        _require(
            isinstance(raw.get("config", {}), dict), "start config must be an object"
        )
    return raw


def client_message_to_event(
    raw: dict[str, Any], at: float, sample_rate: int
) -> ControlEvent:
    """Convert a validated client message into a ControlEvent at time ``at``."""
    mtype = raw["type"]
    if mtype == "start":
        raise ProtocolError("start is a connection handshake, not a session event")
    data: dict[str, Any] = {}
    if mtype == "audio":
        data = {"stream": raw["stream"], "samples": _synth_samples(raw, sample_rate)}
    elif mtype == "text":
        data = {"text": raw["text"]}
    elif mtype == "event":
        data = {"name": raw["name"]}
    elif mtype == "play_ack":
        data = {"index": int(raw["index"])}
    return ControlEvent(at=at, kind=mtype, data=data)


def script_row_to_event(raw: dict[str, Any], sample_rate: int) -> ControlEvent:
    """Parse one NDJSON script row into a timed ControlEvent."""
    validate_client_message(raw)
    _require("at" in raw, "script rows need an 'at' time in ms")
    return client_message_to_event(raw, float(raw["at"]), sample_rate)


def dump_message(msg: dict[str, Any]) -> str:
    """Canonical single-line encoding: sorted keys, no whitespace."""
    return json.dumps(msg, sort_keys=True, separators=(",", ":"))


def write_ndjson(path: str, messages: list[dict[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for msg in messages:
            fh.write(dump_message(msg) + "\n")


def read_ndjson(path: str) -> list[dict[str, Any]]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ProtocolError(f"line {i + 1}: invalid JSON: {exc}") from exc
    return rows

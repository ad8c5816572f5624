"""Full-duplex session runtime: state machine, boundary-aligned conditioning,
lookahead-gated generation, NDJSON/WebSocket service."""
from .events import SessionState, ControlEvent, EVENT_NAMES, transition
from .audio import AudioBuffer, AudioWindow, AudioEncoder, TextEncoder, chunk_audio
from .session import (
    LookaheadGate,
    SessionConfig,
    SessionTrace,
    run_session,
    load_event_script,
)

__all__ = [
    "SessionState",
    "ControlEvent",
    "EVENT_NAMES",
    "transition",
    "AudioBuffer",
    "AudioWindow",
    "AudioEncoder",
    "TextEncoder",
    "chunk_audio",
    "LookaheadGate",
    "SessionConfig",
    "SessionTrace",
    "run_session",
    "load_event_script",
]

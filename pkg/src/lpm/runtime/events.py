"""Session states and the control-event transition table.

The machine is deliberately small: five states, seven event kinds, and a
total transition function. Events that do not apply in the current state
are no-ops rather than errors so that duplicate or late signals (a second
``user_speech_start`` while already listening, say) cannot wedge a live
session. Unknown event *names* are a protocol violation and do raise.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from ..errors import ProtocolError


class SessionState(str, Enum):
    WARMUP = "warmup"
    IDLE = "idle"
    LISTENING = "listening"
    RESPONDING = "responding"
    ENDED = "ended"


# warmup_complete is internal: the engine emits it once the sink prefix has
# been generated. Everything else can arrive from the client.
EVENT_NAMES = (
    "warmup_complete",
    "user_speech_start",
    "user_speech_end",
    "agent_speech_start",
    "agent_speech_end",
    "interrupt",
    "end",
)

_TABLE = {
    (SessionState.WARMUP, "warmup_complete"): SessionState.IDLE,
    (SessionState.IDLE, "user_speech_start"): SessionState.LISTENING,
    (SessionState.LISTENING, "user_speech_end"): SessionState.IDLE,
    (SessionState.LISTENING, "agent_speech_start"): SessionState.RESPONDING,
    (SessionState.IDLE, "agent_speech_start"): SessionState.RESPONDING,
    (SessionState.RESPONDING, "agent_speech_end"): SessionState.IDLE,
    (SessionState.RESPONDING, "interrupt"): SessionState.LISTENING,
    (SessionState.RESPONDING, "user_speech_start"): SessionState.LISTENING,
}


def transition(state: SessionState, event: str) -> SessionState:
    """Next state for ``event`` in ``state``; inapplicable events are no-ops."""
    if event not in EVENT_NAMES:
        raise ProtocolError(f"unknown event name {event!r}")
    if state is SessionState.ENDED:
        return SessionState.ENDED
    if event == "end":
        return SessionState.ENDED
    return _TABLE.get((state, event), state)


# Which audio branches are conditioned on in each state. Muted branches are
# zeroed and flagged so the model cannot distinguish silence from absence.
def mute_flags(state: SessionState) -> tuple[bool, bool]:
    """(mute_speak, mute_listen) for ``state``."""
    if state is SessionState.RESPONDING:
        return (False, False)
    if state is SessionState.LISTENING:
        return (True, False)
    return (True, True)


@dataclass(frozen=True)
class ControlEvent:
    """One timed row of a session script.

    ``at`` is the arrival time in virtual milliseconds. ``kind`` is a wire
    message type (``text``/``audio``/``event``/``play_ack``/``end``); state
    machine event names live under ``data["name"]`` for ``kind == "event"``.
    """

    at: float
    kind: str
    data: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.at < 0:
            raise ProtocolError(f"event time must be >= 0, got {self.at}")
        if self.kind not in ("text", "audio", "event", "play_ack", "end"):
            raise ProtocolError(f"unknown script message type {self.kind!r}")
        if self.kind == "event" and self.data.get("name") not in EVENT_NAMES:
            raise ProtocolError(f"unknown event name {self.data.get('name')!r}")

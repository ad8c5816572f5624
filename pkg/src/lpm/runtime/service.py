"""Network fronts for live sessions: NDJSON-over-TCP and WebSocket.

Both transports speak the same protocol: the first client message must be
``start`` (optionally naming an existing ``session_id`` to reattach), after
which audio/text/event/play_ack/end messages drive the session and the
server streams chunk/state/metrics/error messages back. Every session keeps
its full outbound history, so a reconnecting client is replayed everything
it missed before receiving the live tail.

The live engine is the same analytic scheduler the script runner uses; a
wall clock (scaled by ``time_scale``) paces admissions, so orderings and
simulated timings match the offline trace for the same event timeline.
"""
from __future__ import annotations

import asyncio
import json
import socketserver
import threading
import time
from queue import Queue
from typing import Optional

from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from ..errors import ProtocolError
from .events import ControlEvent
from .protocol import client_message_to_event, dump_message, validate_client_message
from .session import SessionConfig, SessionEngine


class WallClock:
    """Virtual-ms clock: ``time_scale`` wall seconds per virtual second."""

    def __init__(self, time_scale: float = 1.0):
        if time_scale <= 0:
            raise ValueError(f"time_scale must be positive, got {time_scale}")
        self.time_scale = time_scale
        self._t0 = time.perf_counter()

    def now(self) -> float:
        return (time.perf_counter() - self._t0) * 1000.0 / self.time_scale

    def sleep_until(self, t_virtual: float) -> None:
        delta = (t_virtual - self.now()) * self.time_scale / 1000.0
        if delta > 0:
            time.sleep(delta)


class LiveFeed:
    """Thread-safe event source for a running engine.

    Events are stamped with their virtual arrival time when pushed. In ack
    playback the engine blocks in :meth:`find_ack_time` until the client
    catches up (or the session ends); a disconnect pushes a synthetic end
    so the engine can never hang on a dead connection.
    """

    live = True

    def __init__(self, clock: WallClock):
        self._clock = clock
        self._cv = threading.Condition()
        self._pending: list[ControlEvent] = []
        self._max_acked = -1
        self._ended = False

    def push(self, ev: ControlEvent) -> None:
        with self._cv:
            self._pending.append(ev)
            if ev.kind == "play_ack":
                self._max_acked = max(self._max_acked, int(ev.data["index"]))
            if ev.kind == "end" or (ev.kind == "event" and ev.data.get("name") == "end"):
                self._ended = True
            self._cv.notify_all()

    def poll(self, t: float) -> list[ControlEvent]:
        with self._cv:
            take = [ev for ev in self._pending if ev.at <= t]
            self._pending = [ev for ev in self._pending if ev.at > t]
            return take

    def find_ack_time(self, required_head: int, current_head: int) -> Optional[float]:
        with self._cv:
            while True:
                if max(current_head, self._max_acked + 1) >= required_head:
                    return self._clock.now()
                if self._ended:
                    return None
                self._cv.wait(timeout=0.05)

    def earliest_end_time(self) -> Optional[float]:
        with self._cv:
            return self._clock.now() if self._ended else None


class LiveSession:
    """One engine thread plus its fan-out message buffer."""

    def __init__(self, sid: str, config: SessionConfig, n_chunks: int, time_scale: float):
        self.sid = sid
        self.config = config
        self.clock = WallClock(time_scale)
        self.feed = LiveFeed(self.clock)
        self._lock = threading.Lock()
        self._history: list[dict] = []
        self._subs: list[Queue] = []
        self._done = threading.Event()
        self.engine = SessionEngine(config, self.feed, sink=self._on_message, clock=self.clock)
        self._thread = threading.Thread(
            target=self._run, args=(n_chunks,), name=f"session-{sid}", daemon=True
        )
        self._thread.start()

    def _run(self, n_chunks: int) -> None:
        try:
            self.engine.run(n_chunks)
        except Exception as exc:  # surface engine bugs to the client, not the server log
            self._on_message(
                {"type": "error", "code": "engine", "message": str(exc),
                 "t": round(self.clock.now(), 3)}
            )
        finally:
            self._done.set()
            with self._lock:
                for q in self._subs:
                    q.put(None)

    def _on_message(self, msg: dict) -> None:
        out = dict(msg)
        out.pop("seq", None)
        out["sid"] = self.sid
        with self._lock:
            self._history.append(out)
            for q in self._subs:
                q.put(out)

    def subscribe(self) -> tuple[list[dict], Queue]:
        """(messages so far, queue for the live tail). The queue ends with None."""
        q: Queue = Queue()
        with self._lock:
            replay = list(self._history)
            if self._done.is_set():
                q.put(None)
            else:
                self._subs.append(q)
        return replay, q

    def unsubscribe(self, q: Queue) -> None:
        with self._lock:
            if q in self._subs:
                self._subs.remove(q)

    def handle_client_message(self, raw: dict) -> None:
        validate_client_message(raw)
        if raw["type"] == "start":
            raise ProtocolError("session already started")
        ev = client_message_to_event(raw, self.clock.now(), self.config.sample_rate)
        self.feed.push(ev)

    def client_gone(self) -> None:
        """Called on disconnect; the session stays alive for reattachment but
        an ack-gated engine must not wait on a client that left."""
        if not self._done.is_set() and self.config.playback == "ack":
            self.feed.push(ControlEvent(at=self.clock.now(), kind="end"))

    def join(self, timeout: Optional[float] = None) -> None:
        self._thread.join(timeout)

    @property
    def done(self) -> bool:
        return self._done.is_set()


class SessionRegistry:
    """Creates sessions from start messages and reattaches by id."""

    def __init__(self, default_time_scale: float = 1.0, max_chunks: int = 64):
        self._lock = threading.Lock()
        self._sessions: dict[str, LiveSession] = {}
        self._counter = 0
        self.default_time_scale = default_time_scale
        self.max_chunks = max_chunks

    def start_or_attach(self, start_msg: dict) -> LiveSession:
        validate_client_message(start_msg)
        if start_msg.get("type") != "start":
            raise ProtocolError("first message must be start")
        sid = start_msg.get("session_id")
        with self._lock:
            if sid is not None:
                if sid not in self._sessions:
                    raise ProtocolError(f"unknown session_id {sid!r}")
                return self._sessions[sid]
            config = SessionConfig.from_dict(start_msg.get("config", {}))
            n_chunks = int(start_msg.get("chunks", self.max_chunks))
            if not 0 <= n_chunks <= 4096:
                raise ProtocolError(f"chunks must be in [0, 4096], got {n_chunks}")
            scale = float(start_msg.get("time_scale", self.default_time_scale))
            self._counter += 1
            sid = f"s{self._counter:04d}"
            session = LiveSession(sid, config, n_chunks, scale)
            self._sessions[sid] = session
            return session

    def get(self, sid: str) -> Optional[LiveSession]:
        with self._lock:
            return self._sessions.get(sid)

    def shutdown(self) -> None:
        with self._lock:
            sessions = list(self._sessions.values())
        for s in sessions:
            s.feed.push(ControlEvent(at=s.clock.now(), kind="end"))
        for s in sessions:
            s.join(timeout=5.0)


# ---------------------------------------------------------------------------
# NDJSON over TCP


class _TcpHandler(socketserver.StreamRequestHandler):
    def _send(self, msg: dict) -> None:
        self.wfile.write((dump_message(msg) + "\n").encode("utf-8"))
        self.wfile.flush()

    def handle(self) -> None:
        registry: SessionRegistry = self.server.registry  # type: ignore[attr-defined]
        session: Optional[LiveSession] = None
        queue: Optional[Queue] = None
        writer: Optional[threading.Thread] = None
        try:
            for raw_line in self.rfile:
                line = raw_line.decode("utf-8").strip()
                if not line:
                    continue
                try:
                    raw = json.loads(line)
                except json.JSONDecodeError as exc:
                    self._send({"type": "error", "code": "bad_json", "message": str(exc), "t": 0.0})
                    continue
                try:
                    if session is None:
                        session = registry.start_or_attach(raw)
                        replay, queue = session.subscribe()
                        for msg in replay:
                            self._send(msg)
                        writer = threading.Thread(
                            target=self._pump, args=(queue,), daemon=True
                        )
                        writer.start()
                    else:
                        session.handle_client_message(raw)
                except ProtocolError as exc:
                    self._send({"type": "error", "code": "protocol", "message": str(exc),
                                "t": round(session.clock.now(), 3) if session else 0.0})
        except (ConnectionResetError, BrokenPipeError):
            pass
        finally:
            if session is not None and queue is not None:
                session.unsubscribe(queue)
                queue.put(None)
                session.client_gone()
            if writer is not None:
                writer.join(timeout=2.0)

    def _pump(self, queue: Queue) -> None:
        while True:
            msg = queue.get()
            if msg is None:
                return
            try:
                self._send(msg)
            except (OSError, ValueError):
                return


class TcpFront(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, addr: tuple[str, int], registry: SessionRegistry):
        super().__init__(addr, _TcpHandler)
        self.registry = registry


def serve_tcp(
    host: str, port: int, registry: SessionRegistry
) -> tuple[TcpFront, threading.Thread]:
    """Start the TCP front in a background thread; returns (server, thread)."""
    server = TcpFront((host, port), registry)
    thread = threading.Thread(target=server.serve_forever, name="tcp-front", daemon=True)
    thread.start()
    return server, thread


# ---------------------------------------------------------------------------
# WebSocket (FastAPI)


def build_app(registry: Optional[SessionRegistry] = None, static_dir: Optional[str] = None):
    """FastAPI app exposing /ws plus an optional static console mount."""
    registry = registry or SessionRegistry()
    app = FastAPI(title="lpm session service")
    app.state.registry = registry

    @app.get("/health")
    def health() -> dict:
        return {"ok": True}

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket) -> None:
        await ws.accept()
        session: Optional[LiveSession] = None
        queue: Optional[Queue] = None
        pump_task: Optional[asyncio.Task] = None

        async def pump() -> None:
            loop = asyncio.get_running_loop()
            while True:
                msg = await loop.run_in_executor(None, queue.get)
                if msg is None:
                    return
                try:
                    await ws.send_json(msg)
                except Exception:
                    return

        try:
            while True:
                raw = await ws.receive_json()
                try:
                    if session is None:
                        session = registry.start_or_attach(raw)
                        replay, queue = session.subscribe()
                        for msg in replay:
                            await ws.send_json(msg)
                        pump_task = asyncio.create_task(pump())
                    else:
                        session.handle_client_message(raw)
                except ProtocolError as exc:
                    await ws.send_json(
                        {"type": "error", "code": "protocol", "message": str(exc),
                         "t": round(session.clock.now(), 3) if session else 0.0}
                    )
        except (WebSocketDisconnect, RuntimeError):
            pass  # disconnect, or receive after close
        finally:
            if session is not None and queue is not None:
                session.unsubscribe(queue)
                queue.put(None)  # unblock the pump
                session.client_gone()
            if pump_task is not None:
                try:
                    await asyncio.wait_for(pump_task, timeout=2.0)
                except (asyncio.TimeoutError, asyncio.CancelledError):
                    pump_task.cancel()

    if static_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=static_dir, html=True), name="console")

    return app

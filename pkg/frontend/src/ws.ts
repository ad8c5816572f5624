/**
 * WebSocket client with reconnect-and-resync.
 *
 * On every (re)connection the client sends a start message; when it already
 * holds a session id the server replays the full message history, so the
 * snapshot is rebuilt from scratch and lands in the same place it left off.
 * The socket constructor is injectable so tests can drive a fake.
 */

import type { ClientEventName, ClientMessage } from "./protocol.js";
import { encodeClientMessage, parseServerMessage } from "./protocol.js";
import type { SessionSnapshot } from "./store.js";
import {
  INITIAL_SNAPSHOT,
  applyServer,
  markPending,
  noteAck,
} from "./store.js";

export interface SocketLike {
  send(data: string): void;
  close(): void;
  onopen: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onerror: ((ev?: unknown) => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;

export type ConnectionPhase = "connecting" | "live" | "closed" | "failed";

export interface ClientOptions {
  readonly factory?: SocketFactory;
  readonly reconnectDelayMs?: number;
  readonly maxReconnects?: number;
  readonly onChange?: (snap: SessionSnapshot, phase: ConnectionPhase) => void;
  readonly onLog?: (line: string) => void;
}

const defaultFactory: SocketFactory = (url) =>
  new WebSocket(url) as unknown as SocketLike;

export class ConsoleClient {
  private readonly url: string;
  private readonly factory: SocketFactory;
  private readonly reconnectDelayMs: number;
  private readonly maxReconnects: number;
  private readonly onChange: (s: SessionSnapshot, p: ConnectionPhase) => void;
  private readonly onLog: (line: string) => void;

  private socket: SocketLike | null = null;
  private startConfig: Record<string, unknown> = {};
  private chunks = 8;
  private sessionId: string | null = null;
  private reconnectsLeft: number;
  private closedByUser = false;

  snapshot: SessionSnapshot = INITIAL_SNAPSHOT;
  phase: ConnectionPhase = "closed";
  droppedMessages = 0;

  constructor(url: string, opts: ClientOptions = {}) {
    this.url = url;
    this.factory = opts.factory ?? defaultFactory;
    this.reconnectDelayMs = opts.reconnectDelayMs ?? 500;
    this.maxReconnects = opts.maxReconnects ?? 5;
    this.reconnectsLeft = this.maxReconnects;
    this.onChange = opts.onChange ?? (() => undefined);
    this.onLog = opts.onLog ?? (() => undefined);
  }

  connect(config: Record<string, unknown>, chunks: number): void {
    this.startConfig = config;
    this.chunks = chunks;
    this.closedByUser = false;
    this.open();
  }

  disconnect(): void {
    this.closedByUser = true;
    this.socket?.close();
    this.socket = null;
    this.setPhase("closed");
  }

  private open(): void {
    this.setPhase("connecting");
    let sock: SocketLike;
    try {
      sock = this.factory(this.url);
    } catch (err) {
      this.onLog(`connection refused: ${String(err)}`);
      this.setPhase("failed");
      return;
    }
    this.socket = sock;
    sock.onopen = () => {
      this.snapshot = INITIAL_SNAPSHOT; // resync: server replays history
      this.reconnectsLeft = this.maxReconnects;
      const start: ClientMessage =
        this.sessionId === null
          ? { type: "start", config: this.startConfig, chunks: this.chunks }
          : { type: "start", session_id: this.sessionId };
      sock.send(encodeClientMessage(start));
      this.setPhase("live");
    };
    sock.onmessage = (ev) => this.handleRaw(ev.data);
    sock.onerror = () => this.onLog("socket error");
    sock.onclose = () => {
      if (this.closedByUser) return;
      if (this.reconnectsLeft <= 0) {
        this.setPhase("failed");
        return;
      }
      this.reconnectsLeft -= 1;
      this.setPhase("connecting");
      setTimeout(() => this.open(), this.reconnectDelayMs);
    };
  }

  /** Feed one raw frame; malformed input is logged and ignored. */
  handleRaw(data: unknown): void {
    const msg = parseServerMessage(typeof data === "string" ? data : "");
    if (msg === null) {
      this.droppedMessages += 1;
      this.onLog(`ignored malformed message (${this.droppedMessages} total)`);
      return;
    }
    if ("sid" in msg && typeof msg.sid === "string") {
      this.sessionId = msg.sid;
    }
    this.snapshot = applyServer(this.snapshot, msg);
    this.onChange(this.snapshot, this.phase);
  }

  private send(msg: ClientMessage, boundaryAligned: boolean): void {
    if (this.socket === null) {
      this.onLog("not connected; control dropped");
      return;
    }
    this.socket.send(encodeClientMessage(msg));
    if (boundaryAligned) {
      this.snapshot = markPending(this.snapshot);
      this.onChange(this.snapshot, this.phase);
    }
  }

  sendInterrupt(): void {
    this.send({ type: "event", name: "interrupt" }, true);
  }

  sendEvent(name: ClientEventName): void {
    this.send({ type: "event", name }, true);
  }

  sendText(text: string): void {
    this.send({ type: "text", text }, true);
  }

  sendAudio(msg: ClientMessage): void {
    this.send(msg, false);
  }

  sendAck(index: number): void {
    this.send({ type: "play_ack", index }, false);
    this.snapshot = noteAck(this.snapshot, index);
    this.onChange(this.snapshot, this.phase);
  }

  sendEnd(): void {
    this.send({ type: "end" }, false);
  }

  private setPhase(phase: ConnectionPhase): void {
    this.phase = phase;
    this.onChange(this.snapshot, phase);
  }
}

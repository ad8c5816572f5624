/**
 * A12: golden replay and the interactive interrupt.
 *
 * The fixtures are real traces recorded with `lpm-run` against the tiny
 * model (seed 11, 8 chunks). golden_trace is the plain conversation;
 * interrupt_trace is the same script plus an interrupt at t=5000 ms, which
 * the engine applies at the next chunk boundary (6, t=5680 ms).
 */

import { readFileSync } from "node:fs";

import { describe, expect, it } from "vitest";

import { allowedControls } from "../src/controls.js";
import type { ServerMessage } from "../src/protocol.js";
import { parseTrace } from "../src/protocol.js";
import { renderConsole, renderGantt } from "../src/render.js";
import { replay } from "../src/store.js";
import { rowsFromMessages, stateSequence, timelineRows } from "../src/timeline.js";
import type { SocketLike } from "../src/ws.js";
import { ConsoleClient } from "../src/ws.js";

function fixture(name: string): string {
  return readFileSync(new URL(`./fixtures/${name}`, import.meta.url), "utf-8");
}

function rawRows(name: string): Record<string, unknown>[] {
  return fixture(name)
    .split("\n")
    .filter((line) => line.trim() !== "")
    .map((line) => JSON.parse(line) as Record<string, unknown>);
}

const GOLDEN = parseTrace(fixture("golden_trace.ndjson"));
const INTERRUPT = parseTrace(fixture("interrupt_trace.ndjson"));
const INTERRUPT_AT = 5000;

describe("golden replay", () => {
  it("parses every recorded message", () => {
    expect(GOLDEN.dropped).toBe(0);
    expect(INTERRUPT.dropped).toBe(0);
    expect(GOLDEN.messages.length).toBe(rawRows("golden_trace.ndjson").length);
  });

  it("renders a timeline identical to the trace file", () => {
    const snap = replay(GOLDEN.messages);
    const rendered = timelineRows(snap);
    expect(rendered).toEqual(rowsFromMessages(GOLDEN.messages));
    const fromFile = rawRows("golden_trace.ndjson")
      .filter((r) => r.type === "chunk")
      .map((r) => ({ index: r.index, state: r.state, spans: r.timings }));
    expect(rendered).toEqual(fromFile);
  });

  it("renders a state sequence identical to the trace file", () => {
    const snap = replay(GOLDEN.messages);
    const fromFile = rawRows("golden_trace.ndjson")
      .filter((r) => r.type === "state")
      .map((r) => ({ to: r.to, boundary: r.boundary, cause: r.cause }));
    expect(stateSequence(snap)).toEqual(fromFile);
    const lastState = fromFile[fromFile.length - 1]!;
    expect(snap.sessionState).toBe(lastState.to);
  });

  it("mirrors the final metrics and cache report", () => {
    const snap = replay(GOLDEN.messages);
    const metricsRow = rawRows("golden_trace.ndjson").find(
      (r) => r.type === "metrics",
    )!;
    expect(snap.metrics?.chunks).toBe(metricsRow.chunks);
    expect(snap.metrics?.ttfr_ms).toBe(metricsRow.ttfr_ms);
    const lastChunk = rawRows("golden_trace.ndjson")
      .filter((r) => r.type === "chunk")
      .pop()! as { cache: { retained: number[]; entries: number } };
    expect(snap.retained).toEqual(lastChunk.cache.retained);
    expect(snap.cacheEntries).toBe(lastChunk.cache.entries);
  });

  it("renders one gantt box per chunk and stage", () => {
    const snap = replay(GOLDEN.messages);
    const chunks = GOLDEN.messages.filter((m) => m.type === "chunk").length;
    const svg = renderGantt(snap);
    expect(svg.match(/<rect /g)).toHaveLength(chunks * 3);
    const page = renderConsole(snap, "live", 2, 3);
    expect(page).toContain('data-state="responding"');
  });

  it("is deterministic: independent folds land on the same snapshot", () => {
    expect(replay(GOLDEN.messages)).toEqual(replay(GOLDEN.messages));
  });
});

class FakeSocket implements SocketLike {
  sent: string[] = [];
  closed = false;
  onopen: ((ev?: unknown) => void) | null = null;
  onmessage: ((ev: { data: unknown }) => void) | null = null;
  onclose: ((ev?: unknown) => void) | null = null;
  onerror: ((ev?: unknown) => void) | null = null;

  send(data: string): void {
    this.sent.push(data);
  }

  close(): void {
    this.closed = true;
  }

  feed(msg: ServerMessage | Record<string, unknown>): void {
    this.onmessage?.({ data: JSON.stringify(msg) });
  }
}

function liveClient(): { client: ConsoleClient; sockets: FakeSocket[] } {
  const sockets: FakeSocket[] = [];
  const client = new ConsoleClient("ws://test/ws", {
    factory: () => {
      const sock = new FakeSocket();
      sockets.push(sock);
      return sock;
    },
    reconnectDelayMs: 0,
  });
  return { client, sockets };
}

describe("interactive interrupt", () => {
  it("shares a byte-identical prefix between the two fixtures", () => {
    const cut = (msgs: readonly ServerMessage[]) =>
      msgs.filter((m) => (m as { t: number }).t <= INTERRUPT_AT);
    expect(cut(GOLDEN.messages)).toEqual(cut(INTERRUPT.messages));
  });

  it("produces responding -> listening at the next boundary message", () => {
    const { client, sockets } = liveClient();
    client.connect({ model: {} }, 8);
    const sock = sockets[0]!;
    sock.onopen?.();
    expect(JSON.parse(sock.sent[0]!)).toMatchObject({ type: "start", chunks: 8 });

    // everything the server said before the operator reacts
    for (const msg of INTERRUPT.messages) {
      if ((msg as { t: number }).t <= INTERRUPT_AT) sock.feed(msg);
    }
    expect(client.snapshot.sessionState).toBe("responding");
    expect(allowedControls(client.snapshot).interrupt).toBe(true);

    client.sendInterrupt();
    expect(JSON.parse(sock.sent[sock.sent.length - 1]!)).toEqual({
      type: "event",
      name: "interrupt",
    });
    expect(client.snapshot.pendingControl).toBe(true);
    expect(allowedControls(client.snapshot).interrupt).toBe(false);

    const rest = INTERRUPT.messages.filter(
      (m) => (m as { t: number }).t > INTERRUPT_AT,
    );
    const boundary = rest[0]!; // first boundary message after the click
    expect(boundary).toMatchObject({
      type: "state",
      from: "responding",
      to: "listening",
      cause: "interrupt",
    });
    sock.feed(boundary);
    expect(client.snapshot.sessionState).toBe("listening");
    expect(client.snapshot.pendingControl).toBe(false);

    for (const msg of rest.slice(1)) sock.feed(msg);
    expect(client.snapshot.metrics?.final_state).toBe("listening");
    expect(timelineRows(client.snapshot)).toEqual(
      rowsFromMessages(INTERRUPT.messages),
    );
  });

  it("ignores malformed frames without losing the session", () => {
    const { client, sockets } = liveClient();
    client.connect({ model: {} }, 8);
    const sock = sockets[0]!;
    sock.onopen?.();
    sock.onmessage?.({ data: "%%% not json %%%" });
    sock.onmessage?.({ data: JSON.stringify({ type: "mystery" }) });
    expect(client.droppedMessages).toBe(2);
    for (const msg of GOLDEN.messages) sock.feed(msg);
    expect(client.snapshot.genHead).toBe(8);
  });

  it("reconnects with the session id and resyncs from server replay", async () => {
    const { client, sockets } = liveClient();
    client.connect({ model: {} }, 8);
    const first = sockets[0]!;
    first.onopen?.();
    const half = Math.floor(GOLDEN.messages.length / 2);
    for (const msg of GOLDEN.messages.slice(0, half)) {
      first.feed({ ...msg, sid: "s0001" });
    }
    const before = client.snapshot;

    first.onclose?.(); // connection drops mid-session
    await new Promise((resolve) => setTimeout(resolve, 1));
    const second = sockets[1]!;
    second.onopen?.();
    expect(JSON.parse(second.sent[0]!)).toEqual({
      type: "start",
      session_id: "s0001",
    });

    // server replays the full history on reattach
    for (const msg of GOLDEN.messages.slice(0, half)) {
      second.feed({ ...msg, sid: "s0001" });
    }
    expect(client.snapshot).toEqual(before);
    for (const msg of GOLDEN.messages.slice(half)) {
      second.feed({ ...msg, sid: "s0001" });
    }
    expect(client.snapshot.metrics).not.toBeNull();
  });
});

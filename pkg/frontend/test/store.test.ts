import { describe, expect, it } from "vitest";

import type { ChunkMessage, StateMessage } from "../src/protocol.js";
import {
  INITIAL_SNAPSHOT,
  applyServer,
  markPending,
  noteAck,
  replay,
} from "../src/store.js";
import { allowedControls } from "../src/controls.js";

function chunk(index: number, state = "warmup"): ChunkMessage {
  return {
    type: "chunk",
    index,
    state: state as ChunkMessage["state"],
    warmup: index < 3,
    t: 1580 + index * 700,
    timings: { generator: { start: index * 700, finish: index * 700 + 700 } },
    latent_hash: `lat${index}`,
    cond_hash: `cond${index}`,
    nfe: { backbone: 2, refiner: 1 },
    cache: { retained: [0, index], entries: 2 },
    underrun: { user: false, agent: false },
  };
}

function transition(
  from: string,
  to: string,
  boundary: number,
  cause: string,
): StateMessage {
  return {
    type: "state",
    from: from as StateMessage["from"],
    to: to as StateMessage["to"],
    boundary,
    cause,
    t: boundary * 700,
  };
}

describe("snapshot reducer", () => {
  it("starts in warmup with nothing generated", () => {
    expect(INITIAL_SNAPSHOT.sessionState).toBe("warmup");
    expect(INITIAL_SNAPSHOT.genHead).toBe(0);
    expect(INITIAL_SNAPSHOT.playHead).toBe(0);
  });

  it("chunk messages advance gen_head and mirror the cache", () => {
    let snap = applyServer(INITIAL_SNAPSHOT, chunk(0));
    snap = applyServer(snap, chunk(1));
    expect(snap.chunkIndex).toBe(1);
    expect(snap.genHead).toBe(2);
    expect(snap.retained).toEqual([0, 1]);
    expect(snap.recentChunks.map((c) => c.index)).toEqual([0, 1]);
  });

  it("chunk messages never change the session state", () => {
    const snap = applyServer(INITIAL_SNAPSHOT, chunk(0, "responding"));
    expect(snap.sessionState).toBe("warmup");
  });

  it("state changes one-to-one with state messages", () => {
    let snap = applyServer(
      INITIAL_SNAPSHOT,
      transition("warmup", "idle", 3, "warmup_complete"),
    );
    snap = applyServer(snap, transition("idle", "listening", 3, "user_speech_start"));
    expect(snap.sessionState).toBe("listening");
    expect(snap.transitions).toHaveLength(2);
    expect(snap.transitions[1]?.cause).toBe("user_speech_start");
  });

  it("rejects a backwards chunk index and records the violation", () => {
    let snap = applyServer(INITIAL_SNAPSHOT, chunk(3));
    snap = applyServer(snap, chunk(2));
    expect(snap.chunkIndex).toBe(3);
    expect(snap.recentChunks).toHaveLength(1);
    expect(snap.violations[0]).toMatch(/backwards/);
  });

  it("errors accumulate without touching generation state", () => {
    const snap = applyServer(INITIAL_SNAPSHOT, {
      type: "error",
      code: "gate_stall",
      message: "chunk 5 starved",
      t: 3500,
    });
    expect(snap.errors).toEqual(["gate_stall: chunk 5 starved"]);
    expect(snap.genHead).toBe(0);
  });

  it("acks advance play_head monotonically", () => {
    let snap = noteAck(INITIAL_SNAPSHOT, 0);
    snap = noteAck(snap, 2);
    snap = noteAck(snap, 1); // stale ack cannot move the head back
    expect(snap.playHead).toBe(3);
  });

  it("pending controls clear at the next boundary message", () => {
    let snap = markPending(applyServer(INITIAL_SNAPSHOT, chunk(0)));
    expect(snap.pendingControl).toBe(true);
    snap = applyServer(snap, transition("idle", "listening", 3, "interrupt"));
    expect(snap.pendingControl).toBe(false);
    snap = markPending(snap);
    snap = applyServer(snap, chunk(1));
    expect(snap.pendingControl).toBe(false);
  });
});

describe("control gating", () => {
  it("interrupt only while responding and no control in flight", () => {
    let snap = applyServer(
      INITIAL_SNAPSHOT,
      transition("idle", "responding", 5, "agent_speech_start"),
    );
    expect(allowedControls(snap).interrupt).toBe(true);
    snap = markPending(snap);
    expect(allowedControls(snap).interrupt).toBe(false);
    snap = applyServer(snap, transition("responding", "listening", 6, "interrupt"));
    expect(allowedControls(snap).interrupt).toBe(false); // listening now
    expect(allowedControls(snap).text).toBe(true);
  });

  it("everything closes once the session ends", () => {
    const snap = applyServer(
      INITIAL_SNAPSHOT,
      transition("responding", "ended", 8, "end"),
    );
    const gate = allowedControls(snap);
    expect(Object.values(gate).every((v) => v === false)).toBe(true);
  });

  it("play_ack allowed only while playback lags generation", () => {
    let snap = applyServer(INITIAL_SNAPSHOT, chunk(0));
    expect(allowedControls(snap).play_ack).toBe(true);
    snap = noteAck(snap, 0);
    expect(allowedControls(snap).play_ack).toBe(false);
  });
});

describe("replay", () => {
  it("is a pure fold: same messages, same snapshot", () => {
    const messages = [
      chunk(0),
      transition("warmup", "idle", 3, "warmup_complete"),
      chunk(1),
    ];
    expect(replay(messages)).toEqual(replay(messages));
  });
});

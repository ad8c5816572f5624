/**
 * Server-authoritative session snapshot.
 *
 * The reducer folds server messages into an immutable snapshot. Two rules
 * keep it honest:
 *   1. the session state changes only on "state" messages, one transition
 *      per message, never inferred from anything else;
 *   2. the chunk index is monotone; a chunk message that goes backwards is
 *      recorded as a protocol violation and otherwise ignored.
 *
 * play_head is the one locally known quantity: it counts the play_acks this
 * console has issued. Everything else mirrors the wire.
 */

import type {
  ChunkMessage,
  MetricsMessage,
  ServerMessage,
  SessionStateName,
  StageSpan,
  StateMessage,
} from "./protocol.js";

export const RECENT_CHUNK_LIMIT = 32;

export interface ChunkRecordView {
  readonly index: number;
  readonly state: SessionStateName;
  readonly warmup: boolean;
  readonly t: number;
  readonly timings: Readonly<Record<string, StageSpan>>;
  readonly latentHash: string;
  readonly condHash: string;
  readonly retained: readonly number[];
  readonly entries: number;
  readonly underrunUser: boolean;
  readonly underrunAgent: boolean;
}

export interface TransitionView {
  readonly from: SessionStateName;
  readonly to: SessionStateName;
  readonly boundary: number;
  readonly cause: string;
  readonly t: number;
}

export interface SessionSnapshot {
  readonly sessionState: SessionStateName;
  readonly chunkIndex: number;
  readonly genHead: number;
  readonly playHead: number;
  readonly retained: readonly number[];
  readonly cacheEntries: number;
  readonly recentChunks: readonly ChunkRecordView[];
  readonly transitions: readonly TransitionView[];
  readonly metrics: MetricsMessage | null;
  readonly errors: readonly string[];
  readonly pendingControl: boolean;
  readonly violations: readonly string[];
}

export const INITIAL_SNAPSHOT: SessionSnapshot = {
  sessionState: "warmup",
  chunkIndex: -1,
  genHead: 0,
  playHead: 0,
  retained: [],
  cacheEntries: 0,
  recentChunks: [],
  transitions: [],
  metrics: null,
  errors: [],
  pendingControl: false,
  violations: [],
};

function chunkView(msg: ChunkMessage): ChunkRecordView {
  return {
    index: msg.index,
    state: msg.state,
    warmup: msg.warmup,
    t: msg.t,
    timings: msg.timings,
    latentHash: msg.latent_hash,
    condHash: msg.cond_hash,
    retained: msg.cache.retained,
    entries: msg.cache.entries,
    underrunUser: msg.underrun.user,
    underrunAgent: msg.underrun.agent,
  };
}

function applyChunk(snap: SessionSnapshot, msg: ChunkMessage): SessionSnapshot {
  if (msg.index <= snap.chunkIndex) {
    return {
      ...snap,
      violations: [
        ...snap.violations,
        `chunk index went backwards: ${msg.index} after ${snap.chunkIndex}`,
      ],
    };
  }
  const recent = [...snap.recentChunks, chunkView(msg)].slice(-RECENT_CHUNK_LIMIT);
  return {
    ...snap,
    chunkIndex: msg.index,
    genHead: msg.index + 1,
    retained: msg.cache.retained,
    cacheEntries: msg.cache.entries,
    recentChunks: recent,
    pendingControl: false,
  };
}

function applyState(snap: SessionSnapshot, msg: StateMessage): SessionSnapshot {
  const row: TransitionView = {
    from: msg.from,
    to: msg.to,
    boundary: msg.boundary,
    cause: msg.cause,
    t: msg.t,
  };
  return {
    ...snap,
    sessionState: msg.to,
    transitions: [...snap.transitions, row],
    pendingControl: false,
  };
}

export function applyServer(
  snap: SessionSnapshot,
  msg: ServerMessage,
): SessionSnapshot {
  switch (msg.type) {
    case "chunk":
      return applyChunk(snap, msg);
    case "state":
      return applyState(snap, msg);
    case "metrics":
      return { ...snap, metrics: msg };
    case "error":
      return { ...snap, errors: [...snap.errors, `${msg.code}: ${msg.message}`] };
  }
}

/** Replay a whole message list onto a fresh snapshot (reconnect resync). */
export function replay(messages: readonly ServerMessage[]): SessionSnapshot {
  return messages.reduce(applyServer, INITIAL_SNAPSHOT);
}

/** Record a play_ack this console issued; play_head is local knowledge. */
export function noteAck(snap: SessionSnapshot, index: number): SessionSnapshot {
  return { ...snap, playHead: Math.max(snap.playHead, index + 1) };
}

/** A boundary-aligned control is in flight; cleared on the next boundary. */
export function markPending(snap: SessionSnapshot): SessionSnapshot {
  return { ...snap, pendingControl: true };
}

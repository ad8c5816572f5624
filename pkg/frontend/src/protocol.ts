/**
 * Wire protocol mirror: the exact message shapes the session server speaks,
 * plus parsing that refuses anything it does not recognize.
 *
 * The console renders from these messages only. There is no client-side
 * modeling of server behavior; a message either parses into one of the
 * types below or it is dropped (and counted) by the caller.
 */

export type SessionStateName =
  | "warmup"
  | "idle"
  | "listening"
  | "responding"
  | "ended";

export const SESSION_STATES: readonly SessionStateName[] = [
  "warmup",
  "idle",
  "listening",
  "responding",
  "ended",
];

export const CLIENT_EVENT_NAMES = [
  "user_speech_start",
  "user_speech_end",
  "agent_speech_start",
  "agent_speech_end",
  "interrupt",
  "end",
] as const;

export type ClientEventName = (typeof CLIENT_EVENT_NAMES)[number];

export interface StageSpan {
  readonly start: number;
  readonly finish: number;
}

export interface ChunkMessage {
  readonly type: "chunk";
  readonly index: number;
  readonly state: SessionStateName;
  readonly warmup: boolean;
  readonly t: number;
  readonly timings: Readonly<Record<string, StageSpan>>;
  readonly latent_hash: string;
  readonly cond_hash: string;
  readonly nfe: { readonly backbone: number; readonly refiner: number };
  readonly cache: {
    readonly retained: readonly number[];
    readonly entries: number;
  };
  readonly underrun: { readonly user: boolean; readonly agent: boolean };
  readonly sid?: string;
}

export interface StateMessage {
  readonly type: "state";
  readonly from: SessionStateName;
  readonly to: SessionStateName;
  readonly boundary: number;
  readonly cause: string;
  readonly t: number;
  readonly sid?: string;
}

export interface MetricsMessage {
  readonly type: "metrics";
  readonly t: number;
  readonly chunks: number;
  readonly final_state: SessionStateName;
  readonly max_lookahead: number;
  readonly ttfr_ms: number;
  readonly [key: string]: unknown;
}

export interface ErrorMessage {
  readonly type: "error";
  readonly code: string;
  readonly message: string;
  readonly t: number;
  readonly sid?: string;
}

export type ServerMessage =
  | ChunkMessage
  | StateMessage
  | MetricsMessage
  | ErrorMessage;

export type ClientMessage =
  | {
      readonly type: "start";
      readonly config?: Record<string, unknown>;
      readonly chunks?: number;
      readonly session_id?: string;
      readonly time_scale?: number;
    }
  | {
      readonly type: "audio";
      readonly stream: "user" | "agent";
      readonly silence_ms?: number;
      readonly tone_ms?: number;
      readonly freq?: number;
    }
  | { readonly type: "text"; readonly text: string }
  | { readonly type: "event"; readonly name: ClientEventName }
  | { readonly type: "play_ack"; readonly index: number }
  | { readonly type: "end" };

function isRecord(value: unknown): value is Record<string, unknown> {
  return typeof value === "object" && value !== null && !Array.isArray(value);
}

function isStateName(value: unknown): value is SessionStateName {
  return (SESSION_STATES as readonly unknown[]).includes(value);
}

function isStageSpan(value: unknown): value is StageSpan {
  return (
    isRecord(value) &&
    typeof value.start === "number" &&
    typeof value.finish === "number"
  );
}

function isTimings(value: unknown): value is Record<string, StageSpan> {
  if (!isRecord(value)) return false;
  return Object.values(value).every(isStageSpan);
}

function isChunk(msg: Record<string, unknown>): msg is ChunkMessage & Record<string, unknown> {
  const cache = msg.cache;
  const nfe = msg.nfe;
  return (
    typeof msg.index === "number" &&
    msg.index >= 0 &&
    isStateName(msg.state) &&
    typeof msg.warmup === "boolean" &&
    typeof msg.t === "number" &&
    isTimings(msg.timings) &&
    typeof msg.latent_hash === "string" &&
    typeof msg.cond_hash === "string" &&
    isRecord(nfe) &&
    typeof nfe.backbone === "number" &&
    typeof nfe.refiner === "number" &&
    isRecord(cache) &&
    Array.isArray(cache.retained) &&
    cache.retained.every((c) => typeof c === "number") &&
    typeof cache.entries === "number" &&
    isRecord(msg.underrun)
  );
}

function isState(msg: Record<string, unknown>): msg is StateMessage & Record<string, unknown> {
  return (
    isStateName(msg.from) &&
    isStateName(msg.to) &&
    typeof msg.boundary === "number" &&
    typeof msg.cause === "string" &&
    typeof msg.t === "number"
  );
}

function isMetrics(msg: Record<string, unknown>): msg is MetricsMessage & Record<string, unknown> {
  return (
    typeof msg.t === "number" &&
    typeof msg.chunks === "number" &&
    isStateName(msg.final_state) &&
    typeof msg.max_lookahead === "number" &&
    typeof msg.ttfr_ms === "number"
  );
}

function isError(msg: Record<string, unknown>): msg is ErrorMessage & Record<string, unknown> {
  return (
    typeof msg.code === "string" &&
    typeof msg.message === "string" &&
    typeof msg.t === "number"
  );
}

/** Parse one server message; null for anything malformed or unknown. */
export function parseServerMessage(raw: unknown): ServerMessage | null {
  let value = raw;
  if (typeof raw === "string") {
    try {
      value = JSON.parse(raw);
    } catch {
      return null;
    }
  }
  if (!isRecord(value)) return null;
  switch (value.type) {
    case "chunk":
      return isChunk(value) ? (value as unknown as ChunkMessage) : null;
    case "state":
      return isState(value) ? (value as unknown as StateMessage) : null;
    case "metrics":
      return isMetrics(value) ? (value as unknown as MetricsMessage) : null;
    case "error":
      return isError(value) ? (value as unknown as ErrorMessage) : null;
    default:
      return null;
  }
}

export interface NdjsonResult {
  readonly messages: readonly ServerMessage[];
  readonly dropped: number;
}

/** Parse a whole NDJSON trace; malformed lines are counted, not fatal. */
export function parseTrace(text: string): NdjsonResult {
  const messages: ServerMessage[] = [];
  let dropped = 0;
  for (const line of text.split("\n")) {
    if (line.trim() === "") continue;
    const msg = parseServerMessage(line);
    if (msg === null) {
      dropped += 1;
    } else {
      messages.push(msg);
    }
  }
  return { messages, dropped };
}

export function encodeClientMessage(msg: ClientMessage): string {
  return JSON.stringify(msg);
}

/** Microphone stand-in: a labeled burst of silence. */
export function silenceBurst(
  stream: "user" | "agent",
  ms: number,
): ClientMessage {
  return { type: "audio", stream, silence_ms: ms };
}

/** Microphone stand-in: a sine burst, distinguishable from silence. */
export function toneBurst(
  stream: "user" | "agent",
  ms: number,
  freq = 440,
): ClientMessage {
  return { type: "audio", stream, tone_ms: ms, freq };
}

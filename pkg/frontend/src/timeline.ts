/**
 * Pure view models: Gantt rows from chunk records, the lookahead meter,
 * and the cache occupancy strip. No DOM here so tests can check the math.
 */

import type { ServerMessage, SessionStateName, StageSpan } from "./protocol.js";
import type { SessionSnapshot } from "./store.js";

export const STAGE_ORDER = ["generator", "refiner", "decoder"] as const;

export interface TimelineRow {
  readonly index: number;
  readonly state: SessionStateName;
  readonly spans: Readonly<Record<string, StageSpan>>;
}

export function timelineRows(snap: SessionSnapshot): TimelineRow[] {
  return snap.recentChunks.map((c) => ({
    index: c.index,
    state: c.state,
    spans: c.timings,
  }));
}

/** Timeline straight from a trace, for golden-replay comparisons. */
export function rowsFromMessages(
  messages: readonly ServerMessage[],
): TimelineRow[] {
  const rows: TimelineRow[] = [];
  for (const msg of messages) {
    if (msg.type === "chunk") {
      rows.push({ index: msg.index, state: msg.state, spans: msg.timings });
    }
  }
  return rows;
}

export interface GanttBox {
  readonly index: number;
  readonly stage: string;
  readonly lane: number;
  readonly x: number;
  readonly width: number;
}

/** Map stage spans onto pixel boxes; one lane per stage, shared time axis. */
export function ganttGeometry(
  rows: readonly TimelineRow[],
  widthPx: number,
): GanttBox[] {
  if (rows.length === 0 || widthPx <= 0) return [];
  let tMax = 0;
  for (const row of rows) {
    for (const span of Object.values(row.spans)) {
      tMax = Math.max(tMax, span.finish);
    }
  }
  if (tMax <= 0) return [];
  const scale = widthPx / tMax;
  const boxes: GanttBox[] = [];
  for (const row of rows) {
    STAGE_ORDER.forEach((stage, lane) => {
      const span = row.spans[stage];
      if (span === undefined) return;
      boxes.push({
        index: row.index,
        stage,
        lane,
        x: span.start * scale,
        width: Math.max(1, (span.finish - span.start) * scale),
      });
    });
  }
  return boxes;
}

/** gen_head - play_head, the quantity the lookahead cap L bounds. */
export function lookaheadGap(snap: SessionSnapshot): number {
  return snap.genHead - snap.playHead;
}

export type SlotKind = "sink" | "window" | "current";

export interface OccupancySlot {
  readonly chunk: number;
  readonly kind: SlotKind;
}

/** Classify the retained set the way the retention policy built it. */
export function occupancyStrip(
  retained: readonly number[],
  current: number,
  sinkCount: number,
): OccupancySlot[] {
  return retained.map((chunk) => ({
    chunk,
    kind:
      chunk === current ? "current" : chunk < sinkCount ? "sink" : "window",
  }));
}

export interface StateSequenceEntry {
  readonly to: SessionStateName;
  readonly boundary: number;
  readonly cause: string;
}

/** The rendered state sequence: initial state plus one entry per message. */
export function stateSequence(snap: SessionSnapshot): StateSequenceEntry[] {
  return snap.transitions.map((tr) => ({
    to: tr.to,
    boundary: tr.boundary,
    cause: tr.cause,
  }));
}

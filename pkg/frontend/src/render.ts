/**
 * HTML/SVG string builders. Pure functions of the snapshot so the replay
 * tests can assert on rendered output without a DOM.
 */

import type { SessionStateName } from "./protocol.js";
import { SESSION_STATES } from "./protocol.js";
import type { SessionSnapshot } from "./store.js";
import {
  ganttGeometry,
  lookaheadGap,
  occupancyStrip,
  timelineRows,
} from "./timeline.js";
import type { ControlGate } from "./controls.js";

const GANTT_WIDTH = 720;
const LANE_HEIGHT = 18;
const STAGE_FILL: Record<string, string> = {
  generator: "#4e79a7",
  refiner: "#f28e2b",
  decoder: "#59a14f",
};

function esc(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function renderStateDiagram(active: SessionStateName): string {
  const boxes = SESSION_STATES.map((name) => {
    const cls = name === active ? "state-box active" : "state-box";
    return `<span class="${cls}" data-state="${name}">${name}</span>`;
  });
  return `<div class="state-diagram">${boxes.join(" → ")}</div>`;
}

export function renderGantt(snap: SessionSnapshot): string {
  const rows = timelineRows(snap);
  const boxes = ganttGeometry(rows, GANTT_WIDTH);
  if (boxes.length === 0) {
    return `<svg class="gantt" width="${GANTT_WIDTH}" height="60"></svg>`;
  }
  const height = 3 * LANE_HEIGHT + 12;
  const rects = boxes
    .map((b) => {
      const y = b.lane * LANE_HEIGHT + 4;
      const fill = STAGE_FILL[b.stage] ?? "#bab0ac";
      return (
        `<rect x="${b.x.toFixed(1)}" y="${y}" width="${b.width.toFixed(1)}"` +
        ` height="${LANE_HEIGHT - 4}" fill="${fill}"` +
        ` data-chunk="${b.index}" data-stage="${b.stage}"><title>` +
        `chunk ${b.index} ${b.stage}</title></rect>`
      );
    })
    .join("");
  return `<svg class="gantt" width="${GANTT_WIDTH}" height="${height}">${rects}</svg>`;
}

export function renderLookaheadMeter(snap: SessionSnapshot, cap: number): string {
  const gap = lookaheadGap(snap);
  const over = gap > cap ? " over" : "";
  const cells = Array.from({ length: cap }, (_, i) =>
    `<span class="cell${i < gap ? " lit" : ""}"></span>`,
  ).join("");
  return (
    `<div class="lookahead${over}" data-gap="${gap}" data-cap="${cap}">` +
    `gen ${snap.genHead} / play ${snap.playHead} ${cells}</div>`
  );
}

export function renderCacheStrip(snap: SessionSnapshot, sinkCount: number): string {
  const slots = occupancyStrip(snap.retained, snap.chunkIndex, sinkCount)
    .map((s) => `<span class="slot ${s.kind}" data-chunk="${s.chunk}">${s.chunk}</span>`)
    .join("");
  return `<div class="cache-strip" data-entries="${snap.cacheEntries}">${slots}</div>`;
}

export function renderTransitions(snap: SessionSnapshot): string {
  const rows = snap.transitions
    .map(
      (tr) =>
        `<tr><td>${tr.boundary}</td><td>${tr.from}</td><td>${tr.to}</td>` +
        `<td>${esc(tr.cause)}</td><td>${tr.t.toFixed(0)}</td></tr>`,
    )
    .join("");
  return (
    `<table class="transitions"><thead><tr><th>boundary</th><th>from</th>` +
    `<th>to</th><th>cause</th><th>t (ms)</th></tr></thead>` +
    `<tbody>${rows}</tbody></table>`
  );
}

export function renderBanner(snap: SessionSnapshot, phase: string): string {
  const err = snap.errors.length
    ? `<span class="error">${esc(snap.errors[snap.errors.length - 1] ?? "")}</span>`
    : "";
  return `<div class="banner" data-phase="${phase}">${phase}${err ? " | " + err : ""}</div>`;
}

export function renderMetrics(snap: SessionSnapshot): string {
  if (snap.metrics === null) return `<div class="metrics"></div>`;
  const m = snap.metrics;
  return (
    `<div class="metrics">chunks ${m.chunks}, ttfr ${m.ttfr_ms} ms, ` +
    `max lookahead ${m.max_lookahead}, final ${m.final_state}</div>`
  );
}

export function renderControls(gate: ControlGate): string {
  const kinds = Object.keys(gate) as (keyof ControlGate)[];
  return kinds
    .map(
      (kind) =>
        `<button id="ctl-${kind}"${gate[kind] ? "" : " disabled"}>${kind}</button>`,
    )
    .join("");
}

export function renderConsole(
  snap: SessionSnapshot,
  phase: string,
  lookaheadCap: number,
  sinkCount: number,
): string {
  return [
    renderBanner(snap, phase),
    renderStateDiagram(snap.sessionState),
    renderGantt(snap),
    renderLookaheadMeter(snap, lookaheadCap),
    renderCacheStrip(snap, sinkCount),
    renderTransitions(snap),
    renderMetrics(snap),
  ].join("\n");
}

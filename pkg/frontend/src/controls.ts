/**
 * Control gating: which operator actions make sense in the current
 * server-reported state. Gating never predicts the outcome of a control;
 * it only prevents sending conflicting boundary-aligned updates while one
 * is already in flight (pendingControl) or after the session ended.
 */

import type { SessionSnapshot } from "./store.js";

export type ControlKind =
  | "interrupt"
  | "text"
  | "user_speech"
  | "agent_speech"
  | "play_ack"
  | "end";

export type ControlGate = Readonly<Record<ControlKind, boolean>>;

export function allowedControls(snap: SessionSnapshot): ControlGate {
  const live = snap.sessionState !== "ended" && snap.metrics === null;
  const open = live && !snap.pendingControl;
  return {
    interrupt: open && snap.sessionState === "responding",
    text: open,
    user_speech: open,
    agent_speech: open,
    play_ack: live && snap.playHead < snap.genHead,
    end: live,
  };
}

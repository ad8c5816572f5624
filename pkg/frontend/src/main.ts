/**
 * Browser entry point: one socket, one snapshot, innerHTML refresh per
 * server message. Served by `lpm-serve --ws HOST:PORT --static frontend`.
 */

import { allowedControls } from "./controls.js";
import { silenceBurst, toneBurst } from "./protocol.js";
import { renderConsole, renderControls } from "./render.js";
import { ConsoleClient } from "./ws.js";

const DEFAULT_CONFIG = {
  model: {
    n_layers: 2,
    d_model: 16,
    n_heads: 2,
    tokens_per_chunk: 4,
    d_cond: 8,
    d_ffn: 32,
  },
  playback: "ack",
};
const LOOKAHEAD_CAP = 2;
const SINK_COUNT = 3;

function byId(id: string): HTMLElement {
  const el = document.getElementById(id);
  if (el === null) throw new Error(`missing element #${id}`);
  return el;
}

function wsUrl(): string {
  const proto = location.protocol === "https:" ? "wss" : "ws";
  return `${proto}://${location.host}/ws`;
}

function main(): void {
  const view = byId("view");
  const controlsEl = byId("controls");
  const logEl = byId("log");

  const client = new ConsoleClient(wsUrl(), {
    onChange: (snap, phase) => {
      view.innerHTML = renderConsole(snap, phase, LOOKAHEAD_CAP, SINK_COUNT);
      controlsEl.innerHTML = renderControls(allowedControls(snap));
      bindControls();
    },
    onLog: (line) => {
      logEl.textContent = `${line}\n${logEl.textContent ?? ""}`.slice(0, 4000);
    },
  });

  function bindControls(): void {
    byId("ctl-interrupt").onclick = () => client.sendInterrupt();
    byId("ctl-text").onclick = () => {
      const text = prompt("new text directive") ?? "";
      if (text !== "") client.sendText(text);
    };
    byId("ctl-user_speech").onclick = () => {
      client.sendAudio(toneBurst("user", 1000));
      client.sendEvent("user_speech_start");
    };
    byId("ctl-agent_speech").onclick = () => {
      client.sendAudio(silenceBurst("agent", 1000));
      client.sendEvent("agent_speech_start");
    };
    byId("ctl-play_ack").onclick = () =>
      client.sendAck(client.snapshot.playHead);
    byId("ctl-end").onclick = () => client.sendEnd();
  }

  byId("connect").onclick = () => {
    const chunks = Number((byId("chunks") as HTMLInputElement).value) || 8;
    client.connect(DEFAULT_CONFIG, chunks);
  };
  byId("disconnect").onclick = () => client.disconnect();
}

main();

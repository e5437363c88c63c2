/** Browser entry point: wires input devices, the WebSocket client, the
 * canvas renderer, and the HUD together. */

import { CockpitClient } from "./client.js";
import { KEY_BINDINGS, KeyboardRamp, mapAxes, type KeyState } from "./input.js";
import { drawScene } from "./render.js";
import { applyAssistToggle, applyServer, hud, initialView,
         type ViewState } from "./state.js";

const INPUT_PERIOD_MS = 33; // ≥ 30 Hz input stream

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function gamepadAxes(): [number, number] | null {
  const pads = navigator.getGamepads ? navigator.getGamepads() : [];
  for (const pad of pads) {
    if (pad && pad.connected && pad.axes.length >= 4) {
      // right stick; invert y so up is positive
      return [pad.axes[2], -pad.axes[3]];
    }
  }
  return null;
}

export function start(): void {
  const canvas = el<HTMLCanvasElement>("scene");
  const ctx = canvas.getContext("2d");
  if (!ctx) throw new Error("canvas 2d context unavailable");
  const hudNode = el<HTMLElement>("hud");
  const noticeNode = el<HTMLElement>("notice");

  let view: ViewState = initialView(true);
  const keys: KeyState = { left: false, right: false, up: false, down: false };
  const ramp = new KeyboardRamp();

  const proto = location.protocol === "https:" ? "wss" : "ws";
  const client = new CockpitClient(
    `${proto}://${location.host}/session`,
    {
      onServerMessage: (msg) => { view = applyServer(view, msg); },
      onConnection: (state) => { view = { ...view, connection: state }; },
    },
    (url) => new WebSocket(url) as unknown as
        import("./client.js").SocketLike,
  );
  client.connect();

  window.addEventListener("keydown", (ev) => {
    const bind = KEY_BINDINGS[ev.code];
    if (bind) { keys[bind] = true; ev.preventDefault(); }
    if (ev.code === "Space") { client.sendControl("start"); }
    if (ev.code === "KeyR") { client.sendControl("reset"); }
    if (ev.code === "KeyT") {
      client.sendControl("toggle_assist");
      view = applyAssistToggle(view);
    }
  });
  window.addEventListener("keyup", (ev) => {
    const bind = KEY_BINDINGS[ev.code];
    if (bind) keys[bind] = false;
  });

  let lastInput = performance.now();
  setInterval(() => {
    const now = performance.now();
    const dt = (now - lastInput) / 1000;
    lastInput = now;
    const pad = gamepadAxes();
    let raw: [number, number];
    if (pad) {
      view = { ...view, inputDevice: "gamepad" };
      raw = pad;
    } else {
      view = { ...view, inputDevice: "keyboard" };
      raw = ramp.step(keys, dt);
    }
    const [ax, ay] = mapAxes(raw[0], raw[1]);
    client.sendInput(ax, ay);
  }, INPUT_PERIOD_MS);

  const render = () => {
    canvas.width = canvas.clientWidth;
    canvas.height = canvas.clientHeight;
    drawScene(ctx, view, { width: canvas.width, height: canvas.height });
    const h = hud(view);
    hudNode.textContent =
        `t ${h.time.toFixed(2)}s | goals ${h.goalsDone}` +
        ` | collisions ${h.collisions}` +
        ` | assist ${h.assist ? "on" : "off"} (${h.mode})` +
        ` | intervention ${h.intervention.toFixed(2)}` +
        ` | solve ${h.solveMs.toFixed(1)} ms`;
    noticeNode.textContent = view.connection !== "open"
        ? `connection: ${view.connection}…`
        : view.inputDevice === "keyboard"
            ? "no gamepad detected — WASD/arrows steer, Space starts, " +
              "R resets, T toggles assist"
            : "";
    requestAnimationFrame(render);
  };
  requestAnimationFrame(render);
}

start();

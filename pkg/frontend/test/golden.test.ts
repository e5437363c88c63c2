/** Protocol conformance against a scripted gateway: a 1000-frame session
 * recorded from the real service is replayed into the client, and the HUD
 * and scene must track every server frame exactly. */

import { readFileSync } from "node:fs";
import { join } from "node:path";

import { beforeAll, describe, expect, it } from "vitest";

import { CockpitClient, type SocketLike } from "../src/client";
import { buildScene, type ArrowPrim, type BarPrim } from "../src/render";
import { applyAssistToggle, applyServer, FLASH_FRAMES, flashActive, hud,
         initialView, type ViewState } from "../src/state";
import type { LayoutMsg, StateMsg } from "../src/protocol";

interface GoldenSession {
  layout: LayoutMsg;
  assistAtStart: boolean;
  actions: { afterFrame: number;
             action: { type: string; cmd?: string } }[];
  states: StateMsg[];
}

const golden: GoldenSession = JSON.parse(
    readFileSync(join(__dirname, "golden-session.json"), "utf8"));

class FakeSocket implements SocketLike {
  sent: string[] = [];
  onopen: (() => void) | null = null;
  onmessage: ((ev: { data: string }) => void) | null = null;
  onclose: ((ev: { code: number; reason: string }) => void) | null = null;
  send(data: string): void { this.sent.push(data); }
  close(): void { this.onclose?.({ code: 1000, reason: "" }); }
}

describe("golden session", () => {
  let views: ViewState[]; // view after each state frame
  let assistAt: boolean[]; // client assist flag in effect for each frame

  beforeAll(() => {
    expect(golden.states.length).toBe(1000);
    let sock!: FakeSocket;
    let view = initialView(golden.assistAtStart);
    const client = new CockpitClient("ws://scripted/session", {
      onServerMessage: (msg) => { view = applyServer(view, msg); },
      onConnection: (state) => { view = { ...view, connection: state }; },
    }, () => { sock = new FakeSocket(); return sock; });
    client.connect();
    sock.onopen?.();
    sock.onmessage!({ data: JSON.stringify(golden.layout) });

    views = [];
    assistAt = [];
    for (let i = 0; i < golden.states.length; i++) {
      for (const { afterFrame, action } of golden.actions) {
        if (afterFrame === i && action.type === "control"
            && action.cmd === "toggle_assist") {
          view = applyAssistToggle(view);
        }
      }
      sock.onmessage!({ data: JSON.stringify(golden.states[i]) });
      views.push(view);
      assistAt.push(view.assist);
    }
  });

  it("HUD counters equal the latest server frame on every one of the 1000 frames", () => {
    for (let i = 0; i < golden.states.length; i++) {
      const s = golden.states[i];
      const h = hud(views[i]);
      expect(h.time).toBe(s.t);
      expect(h.goalsDone).toBe(s.goals_done);
      expect(h.goalIndex).toBe(s.goal_index);
      expect(h.collisions).toBe(s.collisions);
      expect(h.intervention).toBe(s.intervention);
      expect(h.mode).toBe(s.mode);
      expect(h.solveMs).toBe(s.solve_ms);
    }
  });

  it("arrows coincide exactly when intervention is zero, diverge when positive", () => {
    let coincided = 0;
    let diverged = 0;
    for (let i = 0; i < golden.states.length; i++) {
      if (!assistAt[i]) continue;
      const s = golden.states[i];
      const arrows = buildScene(views[i]).prims
          .filter((p): p is ArrowPrim => p.kind === "arrow");
      expect(arrows.map((a) => a.label).sort())
          .toEqual(["u_applied", "u_user"]);
      const [user] = arrows.filter((a) => a.label === "u_user");
      const [applied] = arrows.filter((a) => a.label === "u_applied");
      const gap = Math.hypot(user.to[0] - applied.to[0],
                             user.to[1] - applied.to[1]);
      if (s.intervention === 0) {
        expect(gap).toBe(0);
        coincided += 1;
      } else {
        expect(gap).toBeGreaterThan(0);
        diverged += 1;
      }
    }
    expect(coincided).toBeGreaterThan(0);
    expect(diverged).toBeGreaterThan(100); // the session must exercise both
  });

  it("assist off drops the applied arrow and the activity bar", () => {
    const offFrames = golden.states.filter((_, i) => !assistAt[i]);
    expect(offFrames.length).toBeGreaterThan(100);
    for (let i = 0; i < golden.states.length; i++) {
      if (assistAt[i]) continue;
      const prims = buildScene(views[i]).prims;
      const arrows = prims.filter((p): p is ArrowPrim => p.kind === "arrow");
      expect(arrows.map((a) => a.label)).toEqual(["u_user"]);
      expect(prims.some((p) => p.kind === "bar")).toBe(false);
    }
  });

  it("assist activity bar tracks the intervention magnitude", () => {
    for (let i = 0; i < golden.states.length; i++) {
      if (!assistAt[i]) continue;
      const s = golden.states[i];
      const [bar] = buildScene(views[i]).prims
          .filter((p): p is BarPrim => p.kind === "bar");
      expect(bar).toBeDefined();
      const norm = Math.hypot(s.u_applied[0] - s.u_user[0],
                              s.u_applied[1] - s.u_user[1]);
      expect(bar.level).toBe(Math.min(1, norm / (2 * golden.layout.amax)));
    }
  });

  it("collision increments trigger the respawn flash exactly when the server reports them", () => {
    let collisionEvents = 0;
    let prev = 0;
    for (let i = 0; i < golden.states.length; i++) {
      const s = golden.states[i];
      if (s.collisions > prev) {
        collisionEvents += 1;
        expect(flashActive(views[i])).toBe(true);
      }
      prev = s.collisions;
    }
    expect(collisionEvents).toBeGreaterThan(0);
    // the flash is transient: it must be off FLASH_FRAMES after a quiet spell
    for (let i = FLASH_FRAMES; i < golden.states.length; i++) {
      const quiet = golden.states[i].collisions
          === golden.states[i - FLASH_FRAMES].collisions;
      if (quiet) expect(flashActive(views[i])).toBe(false);
    }
  });

  it("the goal marker follows the server goal index", () => {
    for (let i = 0; i < golden.states.length; i++) {
      const s = golden.states[i];
      if (s.goal_index >= golden.layout.goals.length) continue;
      const scene = buildScene(views[i]);
      const goal = golden.layout.goals[s.goal_index];
      const disks = scene.prims.filter((p) => p.kind === "disk");
      expect(disks.some((d) => d.kind === "disk" && d.x === goal[0]
          && d.y === goal[1])).toBe(true);
    }
  });
});

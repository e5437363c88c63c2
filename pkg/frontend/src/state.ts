/** Client view state: a pure fold over server messages. Rendering and the
 * HUD read only from here — there is no client-side physics. */

import type { EndMsg, LayoutMsg, ServerMsg, StateMsg } from "./protocol.js";

/** Frames the respawn flash stays visible after a collision. */
export const FLASH_FRAMES = 15;

export type Connection = "connecting" | "open" | "closed";
export type InputDevice = "gamepad" | "keyboard";

export interface ViewState {
  layout: LayoutMsg | null;
  frame: StateMsg | null;
  end: EndMsg | null;
  assist: boolean;
  /** Frame count of received state messages (drives the flash timer). */
  framesSeen: number;
  /** Frame index until which the respawn flash is shown (exclusive). */
  flashUntilFrame: number;
  connection: Connection;
  inputDevice: InputDevice;
}

export function initialView(assist: boolean): ViewState {
  return {
    layout: null,
    frame: null,
    end: null,
    assist,
    framesSeen: 0,
    flashUntilFrame: 0,
    connection: "connecting",
    inputDevice: "keyboard",
  };
}

/** Apply one server message; returns a new ViewState. */
export function applyServer(view: ViewState, msg: ServerMsg): ViewState {
  switch (msg.type) {
    case "layout":
      return { ...view, layout: msg, connection: "open" };
    case "state": {
      const prevCollisions = view.frame ? view.frame.collisions : 0;
      const framesSeen = view.framesSeen + 1;
      const collided = msg.collisions > prevCollisions;
      return {
        ...view,
        frame: msg,
        framesSeen,
        flashUntilFrame: collided ? framesSeen + FLASH_FRAMES
                                  : view.flashUntilFrame,
      };
    }
    case "end":
      return { ...view, end: msg };
  }
}

/** Client-side bookkeeping for the assist toggle (the server applies it; the
 * client mirrors it so the scene can drop the applied-input arrow). */
export function applyAssistToggle(view: ViewState): ViewState {
  return { ...view, assist: !view.assist };
}

export function flashActive(view: ViewState): boolean {
  return view.framesSeen < view.flashUntilFrame;
}

export interface Hud {
  time: number;
  goalsDone: number;
  goalIndex: number;
  collisions: number;
  intervention: number;
  mode: string;
  solveMs: number;
  assist: boolean;
}

/** HUD values: always exactly the latest server frame. */
export function hud(view: ViewState): Hud {
  const f = view.frame;
  return {
    time: f ? f.t : 0,
    goalsDone: f ? f.goals_done : 0,
    goalIndex: f ? f.goal_index : 0,
    collisions: f ? f.collisions : 0,
    intervention: f ? f.intervention : 0,
    mode: f ? f.mode : "idle",
    solveMs: f ? f.solve_ms : 0,
    assist: view.assist,
  };
}

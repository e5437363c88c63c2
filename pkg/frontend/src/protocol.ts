/** Wire protocol spoken with the gateway's /session WebSocket.
 *
 * Every message is a JSON object with a `type` field. The server is
 * authoritative; the client only renders `state` frames and submits
 * reference inputs.
 */

export interface LayoutMsg {
  type: "layout";
  workspace: [number, number, number, number]; // x1, y1, x2, y2
  obstacles: [number, number, number, number][];
  goals: [number, number][];
  goal_radius: number;
  start: [number, number];
  agent_radius: number;
  amax: number;
  vmax: number;
  dt: number;
  env_hash: string;
  atlas_hash: string;
  system_hash: string;
}

export interface StateMsg {
  type: "state";
  tick: number;
  t: number;
  x: number;
  y: number;
  vx: number;
  vy: number;
  u_user: [number, number];
  u_applied: [number, number];
  intervention: number;
  mode: string;
  goal_index: number;
  goals_done: number;
  collisions: number;
  solve_ms: number;
}

export interface EndMetrics {
  completion_duration: number | null;
  collisions: number;
  goals_reached: number;
  mean_intervention: number;
  max_intervention: number;
  goal_split_times: number[];
  ticks: number;
  complete: boolean;
  solver_infeasible: number;
  fallback_ticks: number;
}

export interface EndMsg {
  type: "end";
  metrics: EndMetrics;
}

export type ServerMsg = LayoutMsg | StateMsg | EndMsg;

export interface InputMsg {
  type: "input";
  ax: number;
  ay: number;
  seq: number;
  assist?: boolean;
}

export interface ControlMsg {
  type: "control";
  cmd: "start" | "reset" | "toggle_assist";
}

export type ClientMsg = InputMsg | ControlMsg;

export class ProtocolFormatError extends Error {}

function requireNumber(obj: Record<string, unknown>, key: string): number {
  const v = obj[key];
  if (typeof v !== "number" || !Number.isFinite(v)) {
    throw new ProtocolFormatError(`field ${key} must be a finite number`);
  }
  return v;
}

function requirePair(obj: Record<string, unknown>, key: string): [number, number] {
  const v = obj[key];
  if (!Array.isArray(v) || v.length !== 2 ||
      typeof v[0] !== "number" || typeof v[1] !== "number") {
    throw new ProtocolFormatError(`field ${key} must be a numeric pair`);
  }
  return [v[0], v[1]];
}

/** Parse and validate one server message; throws ProtocolFormatError on
 * anything the protocol does not allow. */
export function parseServerMessage(raw: string): ServerMsg {
  let doc: unknown;
  try {
    doc = JSON.parse(raw);
  } catch (exc) {
    throw new ProtocolFormatError(`invalid JSON: ${exc}`);
  }
  if (typeof doc !== "object" || doc === null || Array.isArray(doc)) {
    throw new ProtocolFormatError("message must be an object");
  }
  const obj = doc as Record<string, unknown>;
  switch (obj.type) {
    case "layout": {
      for (const key of ["workspace", "obstacles", "goals", "start"]) {
        if (!Array.isArray(obj[key])) {
          throw new ProtocolFormatError(`layout field ${key} must be an array`);
        }
      }
      requireNumber(obj, "goal_radius");
      requireNumber(obj, "agent_radius");
      requireNumber(obj, "amax");
      requireNumber(obj, "dt");
      return obj as unknown as LayoutMsg;
    }
    case "state": {
      for (const key of ["tick", "t", "x", "y", "vx", "vy", "intervention",
                         "goal_index", "goals_done", "collisions",
                         "solve_ms"]) {
        requireNumber(obj, key);
      }
      requirePair(obj, "u_user");
      requirePair(obj, "u_applied");
      if (typeof obj.mode !== "string") {
        throw new ProtocolFormatError("state field mode must be a string");
      }
      return obj as unknown as StateMsg;
    }
    case "end": {
      if (typeof obj.metrics !== "object" || obj.metrics === null) {
        throw new ProtocolFormatError("end message missing metrics");
      }
      return obj as unknown as EndMsg;
    }
    default:
      throw new ProtocolFormatError(`unknown server message type ${String(obj.type)}`);
  }
}

export function inputMessage(ax: number, ay: number, seq: number,
                             assist?: boolean): InputMsg {
  const msg: InputMsg = { type: "input", ax, ay, seq };
  if (assist !== undefined) msg.assist = assist;
  return msg;
}

export function controlMessage(cmd: ControlMsg["cmd"]): ControlMsg {
  return { type: "control", cmd };
}

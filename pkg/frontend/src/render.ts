/** Scene construction and canvas painting.
 *
 * buildScene is a pure function of ViewState so it can be tested without a
 * canvas; drawScene paints the primitives.
 */

import { flashActive, type ViewState } from "./state.js";

export interface RectPrim {
  kind: "rect";
  x1: number; y1: number; x2: number; y2: number;
  color: string;
}

export interface DiskPrim {
  kind: "disk";
  x: number; y: number; r: number;
  color: string;
}

export interface ArrowPrim {
  kind: "arrow";
  from: [number, number];
  to: [number, number];
  color: string;
  label: "u_user" | "u_applied";
}

export interface BarPrim {
  kind: "bar";
  /** Assist activity in [0, 1]. */
  level: number;
}

export type Prim = RectPrim | DiskPrim | ArrowPrim | BarPrim;

export interface Scene {
  prims: Prim[];
  flash: boolean;
}

export const COLORS = {
  workspace: "#808080",
  obstacle: "#101010",
  goal: "#2e8b57",
  agent: "#1e64c8",
  userArrow: "#e0a000",
  appliedArrow: "#d02020",
};

/** World-units length of an arrow at full acceleration. */
const ARROW_SCALE_FULL = 6.0;

export function buildScene(view: ViewState): Scene {
  const prims: Prim[] = [];
  const layout = view.layout;
  if (!layout) return { prims, flash: false };

  const [wx1, wy1, wx2, wy2] = layout.workspace;
  prims.push({ kind: "rect", x1: wx1, y1: wy1, x2: wx2, y2: wy2,
               color: COLORS.workspace });
  for (const [x1, y1, x2, y2] of layout.obstacles) {
    prims.push({ kind: "rect", x1, y1, x2, y2, color: COLORS.obstacle });
  }

  const f = view.frame;
  const goalIndex = f ? f.goal_index : 0;
  if (goalIndex < layout.goals.length) {
    const [gx, gy] = layout.goals[goalIndex];
    prims.push({ kind: "disk", x: gx, y: gy, r: layout.goal_radius,
                 color: COLORS.goal });
  }

  if (f) {
    prims.push({ kind: "disk", x: f.x, y: f.y, r: layout.agent_radius,
                 color: COLORS.agent });
    const scale = ARROW_SCALE_FULL / layout.amax;
    prims.push({
      kind: "arrow", label: "u_user", color: COLORS.userArrow,
      from: [f.x, f.y],
      to: [f.x + f.u_user[0] * scale, f.y + f.u_user[1] * scale],
    });
    if (view.assist) {
      prims.push({
        kind: "arrow", label: "u_applied", color: COLORS.appliedArrow,
        from: [f.x, f.y],
        to: [f.x + f.u_applied[0] * scale, f.y + f.u_applied[1] * scale],
      });
      const norm = Math.hypot(f.u_applied[0] - f.u_user[0],
                              f.u_applied[1] - f.u_user[1]);
      prims.push({ kind: "bar",
                   level: Math.min(1, norm / (2 * layout.amax)) });
    }
  }

  return { prims, flash: flashActive(view) };
}

export interface Viewport {
  width: number;
  height: number;
}

/** World→canvas transform: fit the workspace with a margin, y up. */
function fit(layout: { workspace: [number, number, number, number] },
             vp: Viewport) {
  const [x1, y1, x2, y2] = layout.workspace;
  const margin = 20;
  const sx = (vp.width - 2 * margin) / (x2 - x1);
  const sy = (vp.height - 2 * margin) / (y2 - y1);
  const s = Math.min(sx, sy);
  return {
    px: (x: number) => margin + (x - x1) * s,
    py: (y: number) => vp.height - margin - (y - y1) * s,
    s,
  };
}

export function drawScene(ctx: CanvasRenderingContext2D, view: ViewState,
                          vp: Viewport): void {
  ctx.clearRect(0, 0, vp.width, vp.height);
  const scene = buildScene(view);
  if (!view.layout) return;
  const t = fit(view.layout, vp);

  for (const p of scene.prims) {
    switch (p.kind) {
      case "rect": {
        ctx.fillStyle = p.color;
        ctx.fillRect(t.px(p.x1), t.py(p.y2),
                     (p.x2 - p.x1) * t.s, (p.y2 - p.y1) * t.s);
        break;
      }
      case "disk": {
        ctx.fillStyle = p.color;
        ctx.beginPath();
        ctx.arc(t.px(p.x), t.py(p.y), p.r * t.s, 0, 2 * Math.PI);
        ctx.fill();
        break;
      }
      case "arrow": {
        ctx.strokeStyle = p.color;
        ctx.lineWidth = 2;
        ctx.beginPath();
        ctx.moveTo(t.px(p.from[0]), t.py(p.from[1]));
        ctx.lineTo(t.px(p.to[0]), t.py(p.to[1]));
        ctx.stroke();
        const dx = t.px(p.to[0]) - t.px(p.from[0]);
        const dy = t.py(p.to[1]) - t.py(p.from[1]);
        const len = Math.hypot(dx, dy);
        if (len > 1) {
          const hx = dx / len, hy = dy / len;
          ctx.beginPath();
          ctx.moveTo(t.px(p.to[0]), t.py(p.to[1]));
          ctx.lineTo(t.px(p.to[0]) - 8 * hx + 4 * hy,
                     t.py(p.to[1]) - 8 * hy - 4 * hx);
          ctx.moveTo(t.px(p.to[0]), t.py(p.to[1]));
          ctx.lineTo(t.px(p.to[0]) - 8 * hx - 4 * hy,
                     t.py(p.to[1]) - 8 * hy + 4 * hx);
          ctx.stroke();
        }
        break;
      }
      case "bar": {
        ctx.fillStyle = "#333";
        ctx.fillRect(10, 10, 120, 10);
        ctx.fillStyle = COLORS.appliedArrow;
        ctx.fillRect(10, 10, 120 * p.level, 10);
        break;
      }
    }
  }

  if (scene.flash) {
    ctx.fillStyle = "rgba(255, 64, 64, 0.25)";
    ctx.fillRect(0, 0, vp.width, vp.height);
  }
}

/** Input mapping: gamepad right stick or keyboard, normalized to the
 * (ax, ay) ∈ [−1, 1]² reference the gateway expects. */

export const DEADZONE = 0.08;

function clamp(v: number, lo: number, hi: number): number {
  return Math.min(hi, Math.max(lo, v));
}

/** Map raw stick axes to the reference deflection.
 *
 * Radial deadzone of 0.08 (rest noise maps to exactly (0, 0)); outside it the
 * magnitude is rescaled so deflection grows continuously from zero and a full
 * deflection reaches magnitude 1; direction is preserved and the result is
 * clamped to the unit square componentwise. Out-of-range device values are
 * handled by the same clamp.
 */
export function mapAxes(ax: number, ay: number): [number, number] {
  if (!Number.isFinite(ax) || !Number.isFinite(ay)) return [0, 0];
  const r = Math.hypot(ax, ay);
  if (r < DEADZONE) return [0, 0];
  const magnitude = (r - DEADZONE) / (1 - DEADZONE);
  const k = magnitude / r;
  return [clamp(ax * k, -1, 1), clamp(ay * k, -1, 1)];
}

export interface KeyState {
  left: boolean;
  right: boolean;
  up: boolean;
  down: boolean;
}

export const KEY_BINDINGS: Record<string, keyof KeyState> = {
  ArrowLeft: "left", KeyA: "left",
  ArrowRight: "right", KeyD: "right",
  ArrowUp: "up", KeyW: "up",
  ArrowDown: "down", KeyS: "down",
};

/** Keyboard fallback emulating analog deflection: held keys ramp the axis
 * toward ±1 and release ramps it back to 0, so taps give gentle nudges and
 * holds give full deflection. */
export class KeyboardRamp {
  /** Seconds from rest to full deflection (and back). */
  static readonly RAMP_S = 0.25;

  private axis: [number, number] = [0, 0];

  step(keys: KeyState, dtSeconds: number): [number, number] {
    const rate = dtSeconds / KeyboardRamp.RAMP_S;
    const target: [number, number] = [
      (keys.right ? 1 : 0) - (keys.left ? 1 : 0),
      (keys.up ? 1 : 0) - (keys.down ? 1 : 0),
    ];
    for (const i of [0, 1] as const) {
      const d = target[i] - this.axis[i];
      this.axis[i] += clamp(d, -rate, rate);
      if (Math.abs(this.axis[i]) < 1e-9) this.axis[i] = 0;
    }
    return [this.axis[0], this.axis[1]];
  }

  value(): [number, number] {
    return [this.axis[0], this.axis[1]];
  }
}

/** Monotone sequence counter for input messages. */
export class SeqCounter {
  private seq = -1;

  next(): number {
    this.seq += 1;
    return this.seq;
  }
}

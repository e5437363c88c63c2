import { describe, expect, it } from "vitest";

import { DEADZONE, KeyboardRamp, mapAxes, SeqCounter } from "../src/input";

describe("mapAxes deadzone", () => {
  it("maps rest noise inside the deadzone to exactly (0, 0)", () => {
    expect(mapAxes(0, 0)).toEqual([0, 0]);
    expect(mapAxes(0.05, -0.03)).toEqual([0, 0]);
    expect(mapAxes(DEADZONE * 0.99, 0)).toEqual([0, 0]);
  });

  it("grows continuously from zero just outside the deadzone", () => {
    const [ax, ay] = mapAxes(DEADZONE + 1e-6, 0);
    expect(ax).toBeGreaterThan(0);
    expect(ax).toBeLessThan(1e-4);
    expect(ay).toBe(0);
  });
});

describe("mapAxes full deflection", () => {
  it("maps full-right to (1, 0)", () => {
    const [ax, ay] = mapAxes(1, 0);
    expect(ax).toBeCloseTo(1, 12);
    expect(ay).toBe(0);
  });

  it("maps full-up to (0, 1)", () => {
    const [ax, ay] = mapAxes(0, 1);
    expect(ax).toBe(0);
    expect(ay).toBeCloseTo(1, 12);
  });
});

describe("mapAxes diagonal and clamping", () => {
  it("preserves direction on a diagonal and clamps to the unit square", () => {
    const [ax, ay] = mapAxes(1, 1);
    expect(ax).toBeCloseTo(ay, 12);
    expect(ax).toBeLessThanOrEqual(1);
    expect(ax).toBeGreaterThan(0.9);
  });

  it("preserves direction below the clamp", () => {
    const [ax, ay] = mapAxes(0.6, 0.3);
    expect(ay / ax).toBeCloseTo(0.5, 12);
  });

  it("clamps out-of-range device values", () => {
    const [ax, ay] = mapAxes(10, -10);
    expect(ax).toBe(1);
    expect(ay).toBe(-1);
  });

  it("treats non-finite values as rest", () => {
    expect(mapAxes(NaN, 0)).toEqual([0, 0]);
    expect(mapAxes(Infinity, 1)).toEqual([0, 0]);
  });
});

describe("KeyboardRamp", () => {
  it("ramps to full deflection while held and back to zero on release", () => {
    const ramp = new KeyboardRamp();
    const held = { left: false, right: true, up: false, down: false };
    let v: [number, number] = [0, 0];
    for (let i = 0; i < 10; i++) v = ramp.step(held, 0.05);
    expect(v[0]).toBe(1);
    const released = { ...held, right: false };
    for (let i = 0; i < 3; i++) v = ramp.step(released, 0.05);
    expect(v[0]).toBeGreaterThan(0); // still decaying: analog-style release
    for (let i = 0; i < 10; i++) v = ramp.step(released, 0.05);
    expect(v[0]).toBe(0);
  });

  it("a short tap produces a partial deflection", () => {
    const ramp = new KeyboardRamp();
    const held = { left: false, right: false, up: true, down: false };
    const v = ramp.step(held, 0.05);
    expect(v[1]).toBeGreaterThan(0);
    expect(v[1]).toBeLessThan(1);
  });
});

describe("SeqCounter", () => {
  it("is strictly monotone from zero", () => {
    const c = new SeqCounter();
    expect([c.next(), c.next(), c.next()]).toEqual([0, 1, 2]);
  });
});

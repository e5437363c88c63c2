import { describe, expect, it } from "vitest";

import { CockpitClient, type SocketLike } from "../src/client";

class FakeSocket implements SocketLike {
  sent: string[] = [];
  closed = false;
  onopen: (() => void) | null = null;
  onmessage: ((ev: { data: string }) => void) | null = null;
  onclose: ((ev: { code: number; reason: string }) => void) | null = null;
  send(data: string): void { this.sent.push(data); }
  close(): void {
    this.closed = true;
    this.onclose?.({ code: 1000, reason: "" });
  }
}

function makeClient() {
  const sockets: FakeSocket[] = [];
  const timers: { fn: () => void; ms: number }[] = [];
  const events: string[] = [];
  const client = new CockpitClient("ws://x/session", {
    onServerMessage: (msg) => events.push(`msg:${msg.type}`),
    onConnection: (state) => events.push(`conn:${state}`),
    onError: (err) => events.push(`err:${err.message}`),
  }, () => { const s = new FakeSocket(); sockets.push(s); return s; },
     (fn, ms) => timers.push({ fn, ms }));
  return { client, sockets, timers, events };
}

describe("CockpitClient", () => {
  it("sends inputs with strictly monotone seq", () => {
    const { client, sockets } = makeClient();
    client.connect();
    sockets[0].onopen?.();
    client.sendInput(0.5, 0);
    client.sendInput(-0.25, 1);
    const seqs = sockets[0].sent.map((s) => JSON.parse(s).seq);
    expect(seqs).toEqual([0, 1]);
  });

  it("reconnects with backoff after an unexpected close", () => {
    const { client, sockets, timers, events } = makeClient();
    client.connect();
    sockets[0].onopen?.();
    sockets[0].onclose?.({ code: 1006, reason: "" });
    expect(events).toContain("conn:closed");
    expect(timers.length).toBe(1);
    timers[0].fn(); // fire the reconnect
    expect(sockets.length).toBe(2);
    sockets[1].onopen?.();
    expect(events.filter((e) => e === "conn:open").length).toBe(2);
  });

  it("does not reconnect after stop()", () => {
    const { client, sockets, timers } = makeClient();
    client.connect();
    sockets[0].onopen?.();
    client.stop();
    expect(sockets[0].closed).toBe(true);
    expect(timers.length).toBe(0);
  });

  it("reports malformed server traffic without crashing", () => {
    const { client, sockets, events } = makeClient();
    client.connect();
    sockets[0].onopen?.();
    sockets[0].onmessage!({ data: "{broken" });
    expect(events.some((e) => e.startsWith("err:"))).toBe(true);
    sockets[0].onmessage!({
      data: JSON.stringify({ type: "end", metrics: {} }) });
    expect(events).toContain("msg:end");
  });
});

/** WebSocket client for the gateway's /session endpoint with automatic
 * reconnect. The socket constructor is injectable so tests can drive the
 * client with a scripted server. */

import { controlMessage, inputMessage, parseServerMessage,
         ProtocolFormatError, type ControlMsg,
         type ServerMsg } from "./protocol.js";
import { SeqCounter } from "./input.js";

export interface SocketLike {
  send(data: string): void;
  close(): void;
  onopen: (() => void) | null;
  onmessage: ((ev: { data: string }) => void) | null;
  onclose: ((ev: { code: number; reason: string }) => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;

export interface ClientEvents {
  onServerMessage: (msg: ServerMsg) => void;
  onConnection: (state: "connecting" | "open" | "closed") => void;
  onError?: (err: Error) => void;
}

const RECONNECT_BASE_MS = 500;
const RECONNECT_MAX_MS = 8000;

export class CockpitClient {
  private socket: SocketLike | null = null;
  private seq = new SeqCounter();
  private attempts = 0;
  private stopped = false;

  constructor(private url: string, private events: ClientEvents,
              private factory: SocketFactory,
              private schedule: (fn: () => void, ms: number) => void =
                  (fn, ms) => setTimeout(fn, ms)) {}

  connect(): void {
    this.stopped = false;
    this.events.onConnection("connecting");
    const sock = this.factory(this.url);
    this.socket = sock;
    sock.onopen = () => {
      this.attempts = 0;
      this.events.onConnection("open");
    };
    sock.onmessage = (ev) => {
      let msg: ServerMsg;
      try {
        msg = parseServerMessage(ev.data);
      } catch (exc) {
        if (exc instanceof ProtocolFormatError && this.events.onError) {
          this.events.onError(exc);
        }
        return;
      }
      this.events.onServerMessage(msg);
    };
    sock.onclose = () => {
      this.socket = null;
      this.events.onConnection("closed");
      if (!this.stopped) {
        const backoff = Math.min(RECONNECT_MAX_MS,
                                 RECONNECT_BASE_MS * 2 ** this.attempts);
        this.attempts += 1;
        this.schedule(() => this.connect(), backoff);
      }
    };
  }

  stop(): void {
    this.stopped = true;
    if (this.socket) this.socket.close();
  }

  sendInput(ax: number, ay: number, assist?: boolean): number {
    const seq = this.seq.next();
    this.send(JSON.stringify(inputMessage(ax, ay, seq, assist)));
    return seq;
  }

  sendControl(cmd: ControlMsg["cmd"]): void {
    this.send(JSON.stringify(controlMessage(cmd)));
  }

  private send(data: string): void {
    if (this.socket) this.socket.send(data);
  }
}

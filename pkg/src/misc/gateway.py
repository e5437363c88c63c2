"""WebSocket gateway: hosts the game loop server-side so the safety filter is
authoritative — clients only render frames and submit reference inputs.

Wire protocol (JSON, every message carries a `type`):
  client->server  input   {type, ax, ay, assist, seq}   ax, ay in [-1, 1]
  client->server  control {type, cmd: start|reset|toggle_assist}
  server->client  layout  (once) environment geometry + hashes
  server->client  state   (30 Hz) agent state and filter telemetry
  server->client  end     {type, metrics}
"""

from __future__ import annotations

import asyncio
import json
import logging
import time
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from .invariance import CisAtlas, LinearSystem, system_environment_hash
from .world import DT, Environment, GameSession, frame_csv_row

log = logging.getLogger("misc.gateway")

INPUT_HOLD_TICKS = 25  # 500 ms at 50 Hz: stale input decays to u_ref = 0
PROTOCOL_ERROR = 4002  # close code for malformed/invalid client traffic
FRAME_QUEUE = 16  # outbound backpressure: drop-oldest beyond this depth


class ProtocolError(Exception):
    pass


def layout_message(env: Environment, atlas: CisAtlas) -> dict:
    sys = LinearSystem.from_environment(env)
    return {
        "type": "layout",
        "workspace": [env.workspace.x1, env.workspace.y1,
                      env.workspace.x2, env.workspace.y2],
        "obstacles": [[b.x1, b.y1, b.x2, b.y2] for b in env.obstacles],
        "goals": [list(g) for g in env.goals],
        "goal_radius": env.goal_radius,
        "start": list(env.start),
        "agent_radius": env.agent_radius,
        "amax": env.amax,
        "vmax": env.vmax,
        "dt": env.dt,
        "env_hash": env.digest(),
        "atlas_hash": atlas.system_hash,
        "system_hash": system_environment_hash(sys, env),
    }


def state_message(fr) -> dict:
    return {
        "type": "state", "tick": fr.tick, "t": fr.t,
        "x": fr.x, "y": fr.y, "vx": fr.vx, "vy": fr.vy,
        "u_user": [fr.u_user[0], fr.u_user[1]],
        "u_applied": [fr.u_applied[0], fr.u_applied[1]],
        "intervention": fr.intervention, "mode": fr.mode,
        "goal_index": fr.goal_index, "goals_done": fr.goals_done,
        "collisions": fr.collisions, "solve_ms": fr.solve_ms,
    }


def end_message(metrics) -> dict:
    return {
        "type": "end",
        "metrics": {
            "completion_duration": metrics.completion_duration,
            "collisions": metrics.collisions,
            "goals_reached": metrics.goals_reached,
            "mean_intervention": metrics.mean_intervention,
            "max_intervention": metrics.max_intervention,
            "goal_split_times": metrics.goal_split_times,
            "ticks": metrics.ticks,
            "complete": metrics.complete,
            "solver_infeasible": metrics.solver_infeasible,
            "fallback_ticks": metrics.fallback_ticks,
        },
    }


class SessionState:
    """Mutable per-connection state shared by the reader and the loop."""

    def __init__(self, assist: bool):
        self.assist = assist
        self.started = asyncio.Event()
        self.closed = False
        self.error: str | None = None
        self.u_norm = np.zeros(2)  # latest normalized input in [-1, 1]
        self.last_input_tick = -10**9
        self.last_seq = -1
        self.pending_reset = False
        self.pending_assist: bool | None = None
        self.fresh_input = False


def _parse_client_message(raw: str, st: SessionState) -> None:
    try:
        msg = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"invalid JSON: {exc}") from exc
    if not isinstance(msg, dict) or "type" not in msg:
        raise ProtocolError("message must be an object with a 'type'")
    kind = msg["type"]
    if kind == "input":
        try:
            ax = float(msg["ax"])
            ay = float(msg["ay"])
            seq = int(msg.get("seq", st.last_seq + 1))
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"bad input message: {exc}") from exc
        if not (np.isfinite(ax) and np.isfinite(ay)):
            raise ProtocolError("non-finite input axes")
        if seq < st.last_seq:
            return  # stale datagram-style repeat; keep the newer input
        st.last_seq = seq
        # authority: clip out-of-range deflections before they reach the sim
        st.u_norm = np.clip(np.array([ax, ay]), -1.0, 1.0)
        if "assist" in msg:
            st.pending_assist = bool(msg["assist"])
        st.fresh_input = True
    elif kind == "control":
        cmd = msg.get("cmd")
        if cmd == "start":
            st.started.set()
        elif cmd == "reset":
            st.pending_reset = True
        elif cmd == "toggle_assist":
            current = (st.pending_assist if st.pending_assist is not None
                       else st.assist)
            st.pending_assist = not current
        else:
            raise ProtocolError(f"unknown control cmd {cmd!r}")
    else:
        raise ProtocolError(f"unknown message type {kind!r}")


def create_app(env: Environment, atlas: CisAtlas, assist: bool = True,
               record_dir=None, time_scale: float = 1.0) -> FastAPI:
    """FastAPI app with the /session WebSocket endpoint.

    time_scale < 1 runs faster than real time (0 = unpaced, for tests).
    """
    sys = LinearSystem.from_environment(env)
    expected = system_environment_hash(sys, env)
    if atlas.system_hash != expected:
        raise ProtocolError(
            "atlas does not match the environment; refusing to serve")

    app = FastAPI()
    app.state.env = env
    app.state.atlas = atlas
    app.state.time_scale = time_scale
    app.state.record_dir = Path(record_dir) if record_dir else None
    app.state.default_assist = assist

    @app.websocket("/session")
    async def session_socket(ws: WebSocket):
        await ws.accept()
        session_id = uuid.uuid4().hex[:12]
        st = SessionState(app.state.default_assist)
        game = GameSession(env, st.assist, atlas=atlas)
        recording = []
        log.info("session %s opened (assist=%s)", session_id, st.assist)
        await ws.send_json(layout_message(env, atlas))

        async def reader():
            while True:
                raw = await ws.receive_text()
                _parse_client_message(raw, st)

        reader_task = asyncio.create_task(reader())
        close_code = None
        close_reason = None
        try:
            waiter = asyncio.create_task(st.started.wait())
            done, _ = await asyncio.wait(
                {reader_task, waiter}, return_when=asyncio.FIRST_COMPLETED)
            if reader_task in done:
                reader_task.result()  # raises ProtocolError / disconnect
            waiter.cancel()

            tick_period = DT * app.state.time_scale
            next_deadline = time.perf_counter()
            while not game.done:
                if st.pending_assist is not None:
                    game.set_assist(st.pending_assist)
                    st.assist = st.pending_assist
                    st.pending_assist = None
                if st.pending_reset:
                    game.reset()
                    st.pending_reset = False
                if getattr(st, "fresh_input", False):
                    st.last_input_tick = game.tick
                    st.fresh_input = False
                held = (game.tick - st.last_input_tick) <= INPUT_HOLD_TICKS
                u_norm = st.u_norm if held else np.zeros(2)
                u_ref = u_norm * env.amax

                fr = game.advance(lambda obs: u_ref)
                if fr is not None:
                    recording.append((len(recording), fr.u_user[0],
                                      fr.u_user[1]))
                    try:
                        await ws.send_json(state_message(fr))
                    except (WebSocketDisconnect, RuntimeError):
                        break
                if reader_task.done():
                    reader_task.result()
                if tick_period > 0:
                    next_deadline += tick_period
                    delay = next_deadline - time.perf_counter()
                    if delay > 0:
                        await asyncio.sleep(delay)
                    else:
                        next_deadline = time.perf_counter()
                else:
                    await asyncio.sleep(0)

            if game.done:
                await ws.send_json(end_message(game.metrics()))
        except ProtocolError as exc:
            log.warning("session %s protocol error: %s", session_id, exc)
            close_code = PROTOCOL_ERROR
            close_reason = "protocol-error"
        except WebSocketDisconnect:
            log.info("session %s disconnected", session_id)
        finally:
            reader_task.cancel()
            if app.state.record_dir is not None and recording:
                app.state.record_dir.mkdir(parents=True, exist_ok=True)
                path = app.state.record_dir / f"session-{session_id}.replay.csv"
                with open(path, "w") as fh:
                    fh.write("frame,ax,ay\n")
                    for frame, ax, ay in recording:
                        fh.write(f"{frame},{ax:.17g},{ay:.17g}\n")
                log.info("session %s recorded to %s", session_id, path)
            try:
                await ws.close(code=close_code or 1000,
                               reason=close_reason or "")
            except RuntimeError:
                pass

    return app

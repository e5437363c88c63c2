"""Maze-game simulation: damped double-integrator agent, axis-aligned obstacle
environment, goal/collision rules, scripted input policies and session metrics.

The simulation advances on a single deterministic clock: control ticks at 50 Hz
drive the dynamics, game frames at 30 Hz sample the input policy and emit
telemetry rows.  Both rates live on a shared 150 Hz integer grid, so the
interleaving is exact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import geometry
from .geometry import Polytope

CONTROL_HZ = 50
FRAME_HZ = 30
DT = 1.0 / CONTROL_HZ
GAMMA = 0.1

FACE_NAMES = ("left", "right", "bottom", "top")

# A filter riding a workspace boundary lands the successor on it exactly, up
# to float round-off; penetration below this depth is numerical noise, not
# contact.
COLLISION_TOL = 1e-7


class WorldError(Exception):
    pass


def dynamics_matrices(dt: float = DT, gamma: float = GAMMA):
    """Damped double-integrator (A, B) for state [X, Y, vx, vy], input [ax, ay]."""
    if dt <= 0 or not (0.0 <= gamma * dt < 1.0):
        raise WorldError(f"bad discretization: dt={dt}, gamma={gamma}")
    a = np.array([
        [1.0, 0.0, dt, 0.0],
        [0.0, 1.0, 0.0, dt],
        [0.0, 0.0, 1.0 - gamma * dt, 0.0],
        [0.0, 0.0, 0.0, 1.0 - gamma * dt],
    ])
    b = np.array([
        [0.5 * dt * dt, 0.0],
        [0.0, 0.5 * dt * dt],
        [dt, 0.0],
        [0.0, dt],
    ])
    return a, b


def step_dynamics(state, u, dt: float = DT, gamma: float = GAMMA) -> np.ndarray:
    a, b = dynamics_matrices(dt, gamma)
    return a @ np.asarray(state, dtype=float) + b @ np.asarray(u, dtype=float)


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle [x1, x2] x [y1, y2] in the plane."""

    x1: float
    x2: float
    y1: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise WorldError(f"degenerate box {self}")

    def distance_to_point(self, p) -> float:
        dx = max(self.x1 - p[0], 0.0, p[0] - self.x2)
        dy = max(self.y1 - p[1], 0.0, p[1] - self.y2)
        return float(np.hypot(dx, dy))

    def closest_point(self, p) -> np.ndarray:
        return np.array([min(max(p[0], self.x1), self.x2),
                         min(max(p[1], self.y1), self.y2)])


@dataclass(frozen=True)
class Environment:
    workspace: Box
    obstacles: tuple[Box, ...]
    goals: tuple[tuple[float, float], ...]
    goal_radius: float
    start: tuple[float, float]
    agent_radius: float
    vmax: float
    amax: float
    goal_speed_max: float
    dt: float = DT
    gamma: float = GAMMA

    def __post_init__(self):
        for i, ob in enumerate(self.obstacles):
            inter_w = max(self.workspace.x1, ob.x1) < min(self.workspace.x2, ob.x2)
            inter_h = max(self.workspace.y1, ob.y1) < min(self.workspace.y2, ob.y2)
            if not (inter_w and inter_h):
                raise WorldError(f"obstacle {i} does not intersect the workspace")

    # --- polytope views (positions inflated by the agent radius) ---

    def state_polytope(self) -> Polytope:
        """F x <= f: inflated workspace on position plus velocity bounds."""
        r = self.agent_radius
        lo = [self.workspace.x1 + r, self.workspace.y1 + r, -self.vmax, -self.vmax]
        hi = [self.workspace.x2 - r, self.workspace.y2 - r, self.vmax, self.vmax]
        return Polytope.box(lo, hi)

    def control_polytope(self) -> Polytope:
        return Polytope.box([-self.amax, -self.amax], [self.amax, self.amax])

    def obstacle_faces(self, i: int) -> list[tuple[np.ndarray, float]]:
        """Outward safe-side halfspaces T x <= t of obstacle i, inflated.

        Order: left, right, bottom, top.  A state satisfying any one face is
        clear of the (inflated) obstacle.
        """
        ob = self.obstacles[i]
        r = self.agent_radius
        return [
            (np.array([1.0, 0.0, 0.0, 0.0]), ob.x1 - r),
            (np.array([-1.0, 0.0, 0.0, 0.0]), -(ob.x2 + r)),
            (np.array([0.0, 1.0, 0.0, 0.0]), ob.y1 - r),
            (np.array([0.0, -1.0, 0.0, 0.0]), -(ob.y2 + r)),
        ]

    def face_counts(self) -> list[int]:
        return [len(self.obstacle_faces(i)) for i in range(len(self.obstacles))]

    def in_safe_set(self, state, tol: float = 1e-9) -> bool:
        """state in P and, per obstacle, at least one face satisfied."""
        if not self.state_polytope().contains_point(state, tol=tol):
            return False
        for i in range(len(self.obstacles)):
            if not any(t @ state <= off + tol for t, off in self.obstacle_faces(i)):
                return False
        return True

    def signed_clearance(self, position) -> float:
        """Min over obstacles and walls of (distance - agent_radius);
        negative means the agent disk overlaps an unsafe region."""
        p = np.asarray(position, dtype=float)
        w = self.workspace
        wall = min(p[0] - w.x1, w.x2 - p[0], p[1] - w.y1, w.y2 - p[1])
        clear = wall - self.agent_radius
        for ob in self.obstacles:
            clear = min(clear, ob.distance_to_point(p) - self.agent_radius)
        return float(clear)

    def dynamics_matrices(self):
        return dynamics_matrices(self.dt, self.gamma)

    # --- serialization ---

    def to_json_dict(self) -> dict:
        return {
            "workspace": [self.workspace.x1, self.workspace.x2,
                          self.workspace.y1, self.workspace.y2],
            "obstacles": [[b.x1, b.x2, b.y1, b.y2] for b in self.obstacles],
            "goals": [list(gl) for gl in self.goals],
            "goal_radius": self.goal_radius,
            "start": list(self.start),
            "agent_radius": self.agent_radius,
            "limits": {"vmax": self.vmax, "amax": self.amax},
            "goal_speed_max": self.goal_speed_max,
            "dt": self.dt,
            "gamma": self.gamma,
        }

    @staticmethod
    def from_json_dict(doc: dict) -> "Environment":
        try:
            return Environment(
                workspace=Box(*doc["workspace"]),
                obstacles=tuple(Box(*b) for b in doc["obstacles"]),
                goals=tuple(tuple(gl) for gl in doc["goals"]),
                goal_radius=float(doc["goal_radius"]),
                start=tuple(doc["start"]),
                agent_radius=float(doc["agent_radius"]),
                vmax=float(doc["limits"]["vmax"]),
                amax=float(doc["limits"]["amax"]),
                goal_speed_max=float(doc["goal_speed_max"]),
                dt=float(doc.get("dt", DT)),
                gamma=float(doc.get("gamma", GAMMA)),
            )
        except (KeyError, TypeError) as exc:
            raise WorldError(f"malformed environment document: {exc}") from exc

    def digest(self) -> str:
        payload = json.dumps(self.to_json_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


def default_environment() -> Environment:
    """The five-rectangle maze layout used throughout the test suite."""
    return Environment(
        workspace=Box(5.0, 79.2, 27.1, 100.7),
        obstacles=(
            Box(68.7, 79.7, 27.0, 47.7),
            Box(12.7, 51.9, 33.1, 48.4),
            Box(5.0, 62.5, 42.4, 48.4),
            Box(5.0, 42.9, 76.0, 94.3),
            Box(48.8, 73.6, 54.3, 100.7),
        ),
        goals=((7.9, 73.5), (75.9, 97.1), (54.8, 39.7), (9.5, 38.9)),
        goal_radius=2.15,
        start=(7.1, 98.1),
        agent_radius=1.2,
        vmax=20.0,
        amax=40.0,
        goal_speed_max=0.9,
    )


def load_environment(path) -> Environment:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise WorldError(f"environment JSON parse error: {exc}") from exc
    return Environment.from_json_dict(doc)


def save_environment(env: Environment, path) -> None:
    with open(path, "w") as fh:
        json.dump(env.to_json_dict(), fh, indent=2)
        fh.write("\n")


# --- scripted input policies ---


@dataclass
class PolicyObs:
    t: float
    state: np.ndarray
    goal_center: np.ndarray | None
    goal_index: int
    env: Environment


class ScriptedUser:
    name = "base"

    def reset(self, seed: int) -> None:  # noqa: B027 - optional hook
        pass

    def __call__(self, obs: PolicyObs) -> np.ndarray:
        raise NotImplementedError


class AdversarialUser(ScriptedUser):
    """Always accelerates toward the nearest unsafe region at full authority."""

    name = "adversarial"

    def __call__(self, obs: PolicyObs) -> np.ndarray:
        env = obs.env
        p = obs.state[:2]
        best = None
        best_d = np.inf
        for ob in env.obstacles:
            d = ob.distance_to_point(p)
            cp = ob.closest_point(p)
            if d < best_d:
                best_d, best = d, cp
        w = env.workspace
        walls = [
            (p[0] - w.x1, np.array([w.x1, p[1]])),
            (w.x2 - p[0], np.array([w.x2, p[1]])),
            (p[1] - w.y1, np.array([p[0], w.y1])),
            (w.y2 - p[1], np.array([p[0], w.y2])),
        ]
        for d, cp in walls:
            if d < best_d:
                best_d, best = d, cp
        direction = best - p
        norm = np.max(np.abs(direction))
        if norm <= 1e-9:
            direction = np.array([1.0, 0.0])
            norm = 1.0
        return env.amax * direction / norm


class RandomWalkUser(ScriptedUser):
    """Saturated input with a randomly redrawn direction every half second."""

    name = "random_walk"

    def __init__(self):
        self._rng = np.random.default_rng(0)
        self._current = np.zeros(2)
        self._until = -1.0

    def reset(self, seed: int) -> None:
        self._rng = np.random.default_rng(seed)
        self._current = np.zeros(2)
        self._until = -1.0

    def __call__(self, obs: PolicyObs) -> np.ndarray:
        if obs.t >= self._until:
            angle = self._rng.uniform(0, 2 * np.pi)
            direction = np.array([np.cos(angle), np.sin(angle)])
            self._current = obs.env.amax * direction / np.max(np.abs(direction))
            self._until = obs.t + 0.5
        return self._current


class GoalSeekerUser(ScriptedUser):
    """PD regulator toward the current goal with a capture-speed crawl."""

    name = "goal_seeker"

    def __init__(self, kp: float = 4.0, kd: float = 4.0):
        self.kp = kp
        self.kd = kd

    def __call__(self, obs: PolicyObs) -> np.ndarray:
        if obs.goal_center is None:
            return np.zeros(2)
        p, v = obs.state[:2], obs.state[2:]
        err = obs.goal_center - p
        dist = np.linalg.norm(err)
        # slow down near the goal so the capture speed threshold can be met
        v_des = err / max(dist, 1e-9) * min(0.35 * obs.env.goal_speed_max
                                            + 1.5 * dist, 0.9 * obs.env.vmax)
        u = self.kp * (v_des - v) + self.kd * (err / max(dist, 1.0)) * 0.0
        return np.clip(u, -obs.env.amax, obs.env.amax)


class ReplayUser(ScriptedUser):
    """Replays a recorded input log bit-exactly (one 'frame,ax,ay' row per frame)."""

    name = "replay"

    def __init__(self, path):
        self.inputs: list[np.ndarray] = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#") or line.startswith("frame"):
                    continue
                parts = line.split(",")
                if len(parts) != 3:
                    raise WorldError(f"{path}:{lineno}: expected 'frame,ax,ay'")
                try:
                    self.inputs.append(np.array([float(parts[1]), float(parts[2])]))
                except ValueError as exc:
                    raise WorldError(f"{path}:{lineno}: {exc}") from exc
        self._frame = 0

    def reset(self, seed: int) -> None:
        self._frame = 0

    def __call__(self, obs: PolicyObs) -> np.ndarray:
        if self._frame < len(self.inputs):
            u = self.inputs[self._frame]
        else:
            u = np.zeros(2)
        self._frame += 1
        return u


def scripted_users() -> dict:
    return {
        "adversarial": AdversarialUser,
        "random_walk": RandomWalkUser,
        "goal_seeker": GoalSeekerUser,
        "replay": ReplayUser,
    }


# --- session loop ---


@dataclass
class SessionMetrics:
    completion_duration: float
    collisions: int
    goals_reached: int
    mean_intervention: float
    max_intervention: float
    goal_split_times: list[float]
    ticks: int
    complete: bool
    solver_infeasible: int = 0
    fallback_ticks: int = 0

    def summary(self) -> str:
        dur = f"{self.completion_duration:.2f}s" if self.complete else "incomplete"
        return (
            f"completion: {dur} | goals: {self.goals_reached} | "
            f"collisions: {self.collisions} | mean intervention: "
            f"{self.mean_intervention:.4f} | max intervention: "
            f"{self.max_intervention:.4f}"
        )


@dataclass
class FrameRow:
    t: float
    tick: int
    x: float
    y: float
    vx: float
    vy: float
    u_user: tuple[float, float]
    u_applied: tuple[float, float]
    intervention: float
    mode: str
    goal_index: int
    goals_done: int
    collisions: int
    solve_ms: float


FRAME_CSV_HEADER = ("t,tick,x,y,vx,vy,ux_user,uy_user,ux_applied,uy_applied,"
                    "intervention,mode,goal_index,goals_done,collisions,solve_ms")


def frame_csv_row(fr: FrameRow) -> str:
    return (
        f"{fr.t:.6f},{fr.tick},{fr.x:.12g},{fr.y:.12g},{fr.vx:.12g},{fr.vy:.12g},"
        f"{fr.u_user[0]:.12g},{fr.u_user[1]:.12g},"
        f"{fr.u_applied[0]:.12g},{fr.u_applied[1]:.12g},"
        f"{fr.intervention:.12g},{fr.mode},{fr.goal_index},{fr.goals_done},"
        f"{fr.collisions},{fr.solve_ms:.4f}"
    )


class GameSession:
    """Incremental game loop shared by the headless runner and the gateway.

    50 Hz control ticks sit at multiples of 3 and 30 Hz frames at multiples
    of 5 on a common 150 Hz grid; `advance` runs exactly one control tick and
    samples the user only when a frame boundary has been crossed.
    """

    def __init__(self, env: Environment, assist: bool, atlas=None,
                 controller=None, max_ticks: int | None = None):
        if max_ticks is None:
            max_ticks = 600 * CONTROL_HZ  # 10 simulated minutes
        if assist and controller is None:
            if atlas is None:
                raise WorldError("assist requires a certified atlas")
            from .safety_filter import SharedControlFilter  # circular-import guard

            controller = SharedControlFilter(env, atlas)
        elif controller is None and atlas is not None:
            from .safety_filter import SharedControlFilter

            controller = SharedControlFilter(env, atlas)

        self.env = env
        self.assist = assist
        self.controller = controller
        self.max_ticks = max_ticks
        self.state = np.array([env.start[0], env.start[1], 0.0, 0.0])
        self.checkpoint = np.array(env.start, dtype=float)
        self.goal_index = 0
        self.collisions = 0
        self.solver_infeasible = 0
        self.fallback_ticks = 0
        self.interventions: list[float] = []
        self.frames: list[FrameRow] = []
        self.split_times: list[float] = []
        self.last_solve_ms = 0.0
        self.u_user = np.zeros(2)
        self.tick = 0
        self.next_frame = 0
        self.done_tick: int | None = None
        self.done = False

    def set_assist(self, enabled: bool) -> None:
        if enabled and self.controller is None:
            raise WorldError("assist requires a certified atlas")
        self.assist = bool(enabled)

    def observation(self) -> PolicyObs:
        goal_center = (np.array(self.env.goals[self.goal_index])
                       if self.goal_index < len(self.env.goals) else None)
        return PolicyObs(self.tick * self.env.dt, self.state.copy(),
                         goal_center, self.goal_index, self.env)

    def advance(self, sample) -> FrameRow | None:
        """One control tick; `sample(obs)` supplies the user input whenever a
        30 Hz frame boundary is crossed.  Returns the emitted FrameRow."""
        if self.done:
            return None
        env = self.env
        t = self.tick * env.dt
        time_units = self.tick * 3
        emitted = False
        while self.next_frame * 5 <= time_units:
            self.u_user = np.asarray(sample(self.observation()), dtype=float)
            emitted = True
            self.next_frame += 1

        if self.assist:
            result = self.controller.control_tick(self.state, self.u_user)
            u_applied = result.u_applied
            intervention = result.intervention
            mode = result.mode
            self.last_solve_ms = result.solve_stats.get("wall_ms", 0.0)
            if result.solve_stats.get("infeasible", False):
                self.solver_infeasible += 1
            if mode == "fallback":
                self.fallback_ticks += 1
        else:
            u_applied = np.clip(self.u_user, -env.amax, env.amax)
            intervention = 0.0
            mode = "pass_through"
            self.last_solve_ms = 0.0
        self.interventions.append(float(intervention))

        fr = None
        if emitted:
            fr = FrameRow(
                t=t, tick=self.tick, x=self.state[0], y=self.state[1],
                vx=self.state[2], vy=self.state[3],
                u_user=(float(self.u_user[0]), float(self.u_user[1])),
                u_applied=(float(u_applied[0]), float(u_applied[1])),
                intervention=float(intervention), mode=mode,
                goal_index=self.goal_index, goals_done=self.goal_index,
                collisions=self.collisions, solve_ms=self.last_solve_ms,
            )
            self.frames.append(fr)

        self.state = step_dynamics(self.state, u_applied, env.dt, env.gamma)
        self.tick += 1

        # collision / respawn (authoritative geometry, physical boxes)
        if env.signed_clearance(self.state[:2]) < -COLLISION_TOL:
            self.collisions += 1
            self.state = np.array([self.checkpoint[0], self.checkpoint[1],
                                   0.0, 0.0])
            if self.controller is not None:
                self.controller.notify_reset(self.state)

        # goal capture: disk fully inside the circle, below the speed cap
        if self.goal_index < len(env.goals):
            gc = np.array(env.goals[self.goal_index])
            dist = np.linalg.norm(self.state[:2] - gc)
            speed = np.linalg.norm(self.state[2:])
            if (dist + env.agent_radius <= env.goal_radius
                    and speed < env.goal_speed_max):
                self.split_times.append(self.tick * env.dt)
                self.checkpoint = gc.copy()
                self.goal_index += 1
                if self.goal_index == len(env.goals):
                    self.done_tick = self.tick
                    self.done = True

        if self.tick >= self.max_ticks:
            self.done = True
        return fr

    def reset(self) -> None:
        """Respawn at the last checkpoint without touching the counters."""
        self.state = np.array([self.checkpoint[0], self.checkpoint[1], 0.0, 0.0])
        if self.controller is not None:
            self.controller.notify_reset(self.state)

    def metrics(self) -> SessionMetrics:
        complete = self.done_tick is not None
        ivs = self.interventions
        return SessionMetrics(
            completion_duration=(self.done_tick * self.env.dt) if complete
            else float("nan"),
            collisions=self.collisions,
            goals_reached=self.goal_index,
            mean_intervention=float(np.mean(ivs)) if ivs else 0.0,
            max_intervention=float(np.max(ivs)) if ivs else 0.0,
            goal_split_times=self.split_times,
            ticks=self.tick,
            complete=complete,
            solver_infeasible=self.solver_infeasible,
            fallback_ticks=self.fallback_ticks,
        )


def run_session(env: Environment, policy: ScriptedUser, assist: bool, seed: int,
                atlas=None, max_ticks: int | None = None, controller=None,
                on_frame=None):
    """Run one headless game session; returns (SessionMetrics, [FrameRow])."""
    session = GameSession(env, assist, atlas=atlas, controller=controller,
                          max_ticks=max_ticks)
    policy.reset(seed)
    while not session.done:
        fr = session.advance(policy)
        if fr is not None and on_frame is not None:
            on_frame(fr)
    return session.metrics(), session.frames

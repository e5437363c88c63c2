"""Online minimal-intervention controller.

Each control tick maps (measured state, user reference input) to the applied
input.  A cheap feasibility test passes the reference through untouched when
its raw successor state already lands in an invariant set of every obstacle;
otherwise the one-step MIQP finds the closest safe input.  If the solver runs
out of budget or fails numerically, a small recovery LP replays a certified
safe input; only if that LP is infeasible — which the invariance certificate
rules out mathematically — does the controller halt with a fault.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .encode import (BigMPolicy, InitialStateInfeasible, ProblemTemplate,
                     FACE_SAT_TOL)
from .invariance import CisAtlas, LinearSystem, validate_atlas
from .solve import (MiqpResult, QpSettings, SolveError, branch_and_bound,
                    default_workspace)
from .world import Environment

PASS_TOL = 1e-9  # acceptance slack for the pass-through feasibility test


# --- 2-D polygon kernel for the reduced per-combination QP ------------------
#
# With the current state measured, the step-k binaries are forced and the MIQP
# optimum is min over face selections (one enforced face per obstacle) of
#   min 1/2 ||u - u_ref||^2  s.t.  u in U,  C_(i,j) (A x + B u) <= c_(i,j),
# a Euclidean projection onto a convex polygon in the input plane.  Far
# obstacles whose rows hold over the whole input box drop out entirely, so the
# enumeration is tiny and exact — it returns the same optimum as the Big-M
# branch-and-bound solver (asserted in tests), at real-time cost.


# Boundary-riding states sit exactly on constraint faces, so the feasible
# region in the input plane can be a sliver of floating-point width; the
# clipping tolerance keeps those alive (consistent with PASS_TOL).
CLIP_TOL = 1e-9


def _clip_polygon(verts: np.ndarray, a: np.ndarray, b: float) -> np.ndarray:
    """Clip a convex CCW polygon with the halfplane a.u <= b."""
    if len(verts) == 0:
        return verts
    d = verts @ a - b
    out = []
    k = len(verts)
    for i in range(k):
        p, q = verts[i], verts[(i + 1) % k]
        dp, dq = d[i], d[(i + 1) % k]
        if dp <= CLIP_TOL:
            out.append(p)
        if (dp < -CLIP_TOL and dq > CLIP_TOL) or (dp > CLIP_TOL and dq < -CLIP_TOL):
            t = dp / (dp - dq)
            out.append(p + t * (q - p))
    return np.array(out) if out else np.zeros((0, 2))


def _clip_many(verts: np.ndarray, rows: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Clip by a whole halfplane system, most-violated row first; rows the
    current polygon already satisfies are skipped without a clip pass."""
    for _ in range(rows.shape[0]):
        if len(verts) == 0:
            return verts
        worst = (rows @ verts.T).max(axis=1) - rhs
        i = int(np.argmax(worst))
        if worst[i] <= CLIP_TOL:
            return verts
        verts = _clip_polygon(verts, rows[i], rhs[i])
    return verts


def _project_to_polygon(r: np.ndarray, verts: np.ndarray) -> np.ndarray | None:
    """Closest point of a convex CCW polygon to r; None when empty."""
    k = len(verts)
    if k == 0:
        return None
    if k == 1:
        return verts[0]
    if k >= 3:
        # The all-edges-left test only means "inside" when the polygon has
        # actual area: for a collinear vertex set every cross product is zero
        # for any point on the carrier line, so fall through to the edge
        # projection instead.
        area2 = sum(verts[i][0] * verts[(i + 1) % k][1]
                    - verts[(i + 1) % k][0] * verts[i][1] for i in range(k))
        inside = area2 > 1e-12
        if inside:
            for i in range(k):
                e = verts[(i + 1) % k] - verts[i]
                if (e[0] * (r[1] - verts[i][1])
                        - e[1] * (r[0] - verts[i][0])) < -1e-12:
                    inside = False
                    break
        if inside:
            return r
    best = None
    best_d = np.inf
    for i in range(k if k >= 3 else 1):
        p = verts[i]
        q = verts[(i + 1) % k]
        e = q - p
        den = e @ e
        t = 0.0 if den <= 1e-30 else float(np.clip((r - p) @ e / den, 0.0, 1.0))
        cand = p + t * e
        dist = (r - cand) @ (r - cand)
        if dist < best_d:
            best_d = dist
            best = cand
    return best


class FilterError(Exception):
    pass


class UnrecoverableFault(FilterError):
    """No certified safe input exists numerically; the loop must halt."""


@dataclass
class ControlTickResult:
    u_applied: np.ndarray
    u_user: np.ndarray
    intervention: float  # ||u_applied - u_user||_2
    mode: str  # pass_through | corrected | fallback
    solve_stats: dict = field(default_factory=dict)


class SharedControlFilter:
    """Stateful 50 Hz safety filter; tick calls are strictly sequential."""

    def __init__(self, env: Environment, atlas: CisAtlas,
                 policy: BigMPolicy = BigMPolicy(),
                 settings: QpSettings | None = None,
                 budget_ms: float = 15.0, engine: str = "reduced"):
        if engine not in ("reduced", "bigm"):
            raise FilterError(f"unknown engine {engine!r}")
        self.engine = engine
        if engine == "reduced" and env.dynamics_matrices()[1].shape[1] != 2:
            self.engine = "bigm"  # polygon kernel is specific to planar input
        self.env = env
        self.sys = LinearSystem.from_environment(env)
        validate_atlas(atlas, self.sys, env)
        self.atlas = atlas
        self.template = ProblemTemplate(self.sys, env, atlas, policy)
        # The online loop trades the exact infeasibility cross-check for
        # latency; the recovery ladder below backstops any false negative.
        self.settings = settings or QpSettings(exact_infeasibility=False)
        self.budget_ms = float(budget_ms)

        lay = self.template.layout
        base_lower = self.template.lower
        base_upper = self.template.upper
        eq_rows = np.nonzero(np.isclose(base_lower, base_upper))[0]
        eq_rows = np.union1d(eq_rows, self.template.binary_bound_rows)
        from .solve import QpWorkspace

        self.workspace = QpWorkspace(self.template.hessian,
                                     self.template.constraints,
                                     self.settings, eq_rows=eq_rows.astype(int))

        # per obstacle: [(global face index, j, C, c)] for non-empty entries
        self._entries: list[list[tuple[int, int, np.ndarray, np.ndarray]]] = []
        face = 0
        for i in range(len(env.obstacles)):
            n_c = len(env.obstacle_faces(i))
            rows = []
            for j in range(n_c):
                entry = atlas.entries[(i, j)]
                if not entry.empty:
                    c_n = entry.polytope.normals
                    rows.append((face + j, j, c_n, entry.polytope.offsets,
                                 c_n @ self.sys.a_matrix,
                                 c_n @ self.sys.b_matrix))
            if not rows:
                raise FilterError(
                    f"obstacle {i} has no non-empty invariant set; "
                    "the filter cannot guarantee safety here")
            self._entries.append(rows)
            face += n_c
        self._n_faces = face
        self._last_faces: dict[int, int] | None = None
        self._warm = None

    # -- lifecycle -----------------------------------------------------------

    def notify_reset(self, state) -> None:
        """Clear cross-tick caches after a respawn/teleport."""
        self._last_faces = None
        self._warm = None

    # -- main entry ----------------------------------------------------------

    def control_tick(self, state, u_ref) -> ControlTickResult:
        t0 = time.perf_counter()
        state = np.asarray(state, dtype=float).ravel()
        u_user = np.asarray(u_ref, dtype=float).ravel()
        # Euclidean projection of the reference onto the admissible input box
        u_clip = np.clip(u_user, -self.env.amax, self.env.amax)

        self.template._check_admissible(state)

        if self._raw_input_safe(state, u_clip):
            u_applied = u_clip
            stats = {"wall_ms": (time.perf_counter() - t0) * 1e3,
                     "nodes": 0, "qp_solves": 0, "fast_path": True}
            return self._result(u_applied, u_user, stats, fallback=False)

        if self.engine == "reduced":
            found = self._solve_reduced(state, u_clip)
            if found is not None:
                u_opt, faces, combos = found
                self._last_faces = faces
                stats = {"wall_ms": (time.perf_counter() - t0) * 1e3,
                         "nodes": combos, "qp_solves": combos,
                         "status": "optimal", "fast_path": False,
                         "objective": 0.5 * float(
                             (u_opt - u_clip) @ (u_opt - u_clip))}
                return self._result(u_opt, u_user, stats, fallback=False)
            return self._fallback(state, u_user, t0, reason="infeasible",
                                  infeasible=True)

        try:
            res = self._solve_miqp(state, u_clip)
        except SolveError as exc:
            return self._fallback(state, u_user, t0,
                                  reason=f"numerical_failure: {exc}")

        if res.u_opt is not None:
            self._last_faces = dict(res.active_faces)
            self._warm = res.stats.pop("root_warm", None)
            stats = {k: v for k, v in res.stats.items() if k != "root_warm"}
            stats["status"] = res.status
            stats["objective"] = res.objective
            stats["fast_path"] = False
            stats["wall_ms"] = (time.perf_counter() - t0) * 1e3
            return self._result(np.asarray(res.u_opt), u_user, stats,
                                fallback=False)

        return self._fallback(state, u_user, t0, reason=res.status,
                              infeasible=res.status == "infeasible")

    # -- internals -----------------------------------------------------------

    def _result(self, u_applied, u_user, stats, fallback: bool):
        intervention = float(np.linalg.norm(u_applied - u_user))
        if fallback:
            mode = "fallback"
        elif intervention <= PASS_TOL:
            mode = "pass_through"
        else:
            mode = "corrected"
        return ControlTickResult(u_applied=np.asarray(u_applied, dtype=float),
                                 u_user=u_user, intervention=intervention,
                                 mode=mode, solve_stats=stats)

    def _raw_input_safe(self, state: np.ndarray, u: np.ndarray) -> bool:
        """True when the raw successor lands in an invariant set of every
        obstacle, i.e. the MIQP optimum is the reference itself."""
        x1 = self.sys.a_matrix @ state + self.sys.b_matrix @ u
        for rows in self._entries:
            ok = False
            for _, _, c_normals, c_offsets, _, _ in rows:
                if np.max(c_normals @ x1 - c_offsets) <= PASS_TOL:
                    ok = True
                    break
            if not ok:
                return False
        return True

    def _solve_reduced(self, state: np.ndarray, u_clip: np.ndarray):
        """Exact MIQP optimum via face-selection enumeration in the input
        plane; returns (u_opt, {obstacle: face}, combos) or None."""
        amax = self.env.amax
        span_vec = np.full(self.sys.m, amax)
        active = []  # per unresolved obstacle: (i, [(j, CB rows, rhs), ...])
        for i, rows in enumerate(self._entries):
            cands = []
            resolved = False
            for f, j, _, c_o, ca, cb in rows:
                rhs = c_o - ca @ state
                span = np.abs(cb) @ span_vec
                if np.all(span <= rhs):
                    resolved = True  # holds for every admissible input
                    break
                if np.any(-span > rhs + CLIP_TOL):
                    continue  # no admissible input satisfies this face
                viol = float(np.max(cb @ u_clip - rhs))
                cands.append((viol, j, cb, rhs))
            if resolved:
                continue
            if not cands:
                return None
            cands.sort(key=lambda rec: rec[0])
            active.append((i, cands))

        box = np.array([[-amax, -amax], [amax, -amax],
                        [amax, amax], [-amax, amax]])
        best = {"d": np.inf, "u": None, "faces": {}}
        combos = 0

        def recurse(idx, verts, chosen):
            nonlocal combos
            proj = _project_to_polygon(u_clip, verts)
            if proj is None:
                return
            d = float((u_clip - proj) @ (u_clip - proj))
            if d >= best["d"]:
                return  # intersection can only move the projection farther
            if idx == len(active):
                combos += 1
                best.update(d=d, u=proj, faces=dict(chosen))
                return
            i, cands = active[idx]
            for _, j, cb, rhs in cands:
                v = _clip_many(verts, cb, rhs)
                chosen[i] = j
                recurse(idx + 1, v, chosen)
                del chosen[i]

        recurse(0, box, {})
        if best["u"] is None:
            return None
        return np.asarray(best["u"], dtype=float), best["faces"], combos

    def _solve_miqp(self, state: np.ndarray, u_clip: np.ndarray) -> MiqpResult:
        problem = self.template.instantiate(state, u_clip)
        problem = self.template.fix_step_k_binaries(problem, state)
        problem = self.template.fix_resolved_faces(problem, state)
        hints = []
        hint = self._face_hint(state)
        if hint is not None:
            hints.append(hint)
        return branch_and_bound(problem, self.settings,
                                budget_ms=self.budget_ms,
                                workspace=self.workspace,
                                incumbent_hints=hints,
                                warm_root=self._warm)

    def _face_hint(self, state: np.ndarray) -> dict | None:
        """Full step-(k+1) binary assignment built from the previous tick's
        face selection (or the best currently satisfied face)."""
        fixes: dict[int, int] = {}
        face = 0
        for i, rows in enumerate(self._entries):
            n_c = len(self.env.obstacle_faces(i))
            chosen = None
            if self._last_faces and i in self._last_faces:
                want = self._last_faces[i]
                for f, j, *_ in rows:
                    if j == want:
                        chosen = f
                        break
            if chosen is None:
                # most satisfied face at the current state
                best = -np.inf
                for f, j, *_ in rows:
                    t_row, t_off = self.template._face_rows[f]
                    slack = t_off - t_row @ state
                    if slack > best:
                        best = slack
                        chosen = f
            if chosen is None:
                return None
            for j in range(n_c):
                idx = 2 * (face + j) + 1  # step-(k+1) binary position
                fixes[idx] = 0 if face + j == chosen else 1
            face += n_c
        return fixes

    def _fallback(self, state, u_user, t0, reason: str,
                  infeasible: bool = False) -> ControlTickResult:
        u_rec = self.recovery_input(state)
        stats = {"wall_ms": (time.perf_counter() - t0) * 1e3,
                 "fallback_reason": reason, "infeasible": infeasible,
                 "fast_path": False, "nodes": 0}
        self._last_faces = None
        self._warm = None
        return self._result(u_rec, u_user, stats, fallback=True)

    def recovery_input(self, state) -> np.ndarray:
        """A certified safe input minimizing ||u||_1, from the LP over the
        currently satisfied faces; raises UnrecoverableFault if none exists."""
        state = np.asarray(state, dtype=float).ravel()
        m = self.sys.m
        amax = self.env.amax
        # candidate faces per obstacle: satisfied now, non-empty entry,
        # most satisfied first
        options = []
        for i, rows in enumerate(self._entries):
            cands = []
            for f, j, c_n, c_o, _, _ in rows:
                t_row, t_off = self.template._face_rows[f]
                slack = t_off - t_row @ state
                if slack >= -FACE_SAT_TOL:
                    cands.append((slack, f, c_n, c_o))
            cands.sort(key=lambda rec: -rec[0])
            if not cands:
                raise UnrecoverableFault(
                    f"no satisfied face with an invariant set for obstacle {i} "
                    f"at state {state}")
            options.append(cands)

        # variables: [u (m), s (m)] with -s <= u <= s; minimize sum(s)
        cost = np.concatenate([np.zeros(m), np.ones(m)])
        box_rows = np.vstack([
            np.hstack([np.eye(m), -np.eye(m)]),    # u - s <= 0
            np.hstack([-np.eye(m), -np.eye(m)]),   # -u - s <= 0
            np.hstack([np.eye(m), np.zeros((m, m))]),
            np.hstack([-np.eye(m), np.zeros((m, m))]),
        ])
        box_offs = np.concatenate([np.zeros(2 * m), np.full(2 * m, amax)])

        for combo in itertools.islice(itertools.product(*options), 32):
            rows = [box_rows]
            offs = [box_offs]
            for _, _, c_n, c_o in combo:
                rows.append(np.hstack([c_n @ self.sys.b_matrix,
                                       np.zeros((c_n.shape[0], m))]))
                offs.append(c_o - c_n @ (self.sys.a_matrix @ state))
            poly = geometry.Polytope(np.vstack(rows), np.concatenate(offs))
            sol = geometry.lp_solve(cost, poly, sense="min")
            if sol.status == "optimal":
                return np.asarray(sol.point[:m], dtype=float)
        raise UnrecoverableFault(
            f"recovery LP infeasible for every face combination at {state}")

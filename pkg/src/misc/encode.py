"""Assembly of the one-step safety-filter problem into standard sparse MIQP form

    min 1/2 z'Qz + q'z   s.t.  lower <= A z <= upper,  some z binary,

with decision vector z = [x_k, x_{k+1}, u, p]: current state, next state,
input, and one relax/activate binary per obstacle face per time step.
Row blocks appear in a fixed order: dynamics equalities, convex state rows,
obstacle Big-M rows, invariant-set Big-M rows, control rows, per-obstacle
cardinality rows, and finally unit-interval bound rows for the binaries
(the branch-and-bound solver fixes binaries through those bounds).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from . import geometry
from .invariance import CisAtlas, LinearSystem, system_environment_hash
from .world import Environment

FACE_SAT_TOL = 1e-9


class EncodeError(Exception):
    pass


class InitialStateInfeasible(EncodeError):
    """The measured state violates the admissible region; callers decide recovery."""


@dataclass(frozen=True)
class BigMPolicy:
    mode: str = "per_row"  # per_row | global
    global_value: float = 1.0e4
    margin: float = 1.0

    def __post_init__(self):
        if self.mode not in ("per_row", "global"):
            raise EncodeError(f"unknown Big-M mode {self.mode!r}")
        if self.margin <= 0 or self.global_value <= 0:
            raise EncodeError("Big-M margin and global value must be positive")


@dataclass(frozen=True)
class ProblemLayout:
    n: int
    m: int
    n_p: int
    faces: tuple[tuple[int, int], ...]  # global face order, (i, j) ascending

    @property
    def x_k(self) -> slice:
        return slice(0, self.n)

    @property
    def x_k1(self) -> slice:
        return slice(self.n, 2 * self.n)

    @property
    def u(self) -> slice:
        return slice(2 * self.n, 2 * self.n + self.m)

    @property
    def p(self) -> slice:
        return slice(2 * self.n + self.m, 2 * self.n + self.m + self.n_p)

    @property
    def num_vars(self) -> int:
        return 2 * self.n + self.m + self.n_p

    def p_index(self, face: int, step: int) -> int:
        """Variable index of the binary for global face `face` at step k (0) or k+1 (1)."""
        return self.p.start + 2 * face + step


@dataclass
class MiqpProblem:
    hessian: sp.csc_matrix
    linear: np.ndarray
    constraints: sp.csc_matrix
    lower: np.ndarray
    upper: np.ndarray
    binary_indices: np.ndarray
    binary_bound_rows: np.ndarray  # row index of the [0,1] bound row per binary
    group_rows: slice
    row_blocks: dict
    layout: ProblemLayout
    env_hash: str

    def copy_bounds(self) -> "MiqpProblem":
        return replace(self, lower=self.lower.copy(), upper=self.upper.copy())

    def fix_binary(self, face: int, step: int, value: int) -> None:
        idx = 2 * face + step
        row = self.binary_bound_rows[idx]
        self.lower[row] = float(value)
        self.upper[row] = float(value)

    def binary_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        rows = self.binary_bound_rows
        return self.lower[rows].copy(), self.upper[rows].copy()

    def dump_text(self) -> str:
        """Debug dump: layout header, COO triplets, then row bounds."""
        lay = self.layout
        lines = [
            f"vars {lay.num_vars} rows {self.constraints.shape[0]} "
            f"n {lay.n} m {lay.m} n_p {lay.n_p}",
            "blocks " + " ".join(
                f"{name}:{blk.start}:{blk.stop}" for name, blk in self.row_blocks.items()
            ),
        ]
        coo = self.constraints.tocoo()
        order = np.lexsort((coo.col, coo.row))
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            lines.append(f"A {r} {c} {v:.12e}")
        hd = self.hessian.diagonal()
        for i, v in enumerate(hd):
            if v != 0.0:
                lines.append(f"Q {i} {i} {v:.12e}")
        for i, v in enumerate(self.linear):
            if v != 0.0:
                lines.append(f"q {i} {v:.12e}")
        for r, (lo, hi) in enumerate(zip(self.lower, self.upper)):
            lines.append(f"b {r} {lo:.12e} {hi:.12e}")
        return "\n".join(lines) + "\n"


def big_m_values(normals: np.ndarray, offsets: np.ndarray, bbox_lower: np.ndarray,
                 bbox_upper: np.ndarray, policy: BigMPolicy) -> np.ndarray:
    """Per-row relaxation constants over the workspace bounding box.

    M_row = max(0, max_{x in bbox}(row . x) - offset) + margin, so a relaxed
    row can never cut a point of the box, with `margin` slack to spare.
    """
    if policy.mode == "global":
        return np.full(normals.shape[0], policy.global_value)
    pos = np.clip(normals, 0.0, None)
    neg = np.clip(normals, None, 0.0)
    support = pos @ bbox_upper + neg @ bbox_lower
    return np.maximum(support - offsets, 0.0) + policy.margin


class ProblemTemplate:
    """Environment-static matrices; per-tick instantiation only rewrites bounds
    and the linear term, so solver factorizations stay valid across ticks."""

    def __init__(self, sys: LinearSystem, env: Environment, atlas: CisAtlas,
                 policy: BigMPolicy = BigMPolicy()):
        expected = system_environment_hash(sys, env)
        if atlas.system_hash != expected:
            raise EncodeError("atlas does not match this system/environment")
        self.sys = sys
        self.env = env
        self.atlas = atlas
        self.policy = policy
        self.env_hash = expected

        n, m = sys.n, sys.m
        state_poly = env.state_polytope()
        control_poly = env.control_polytope()
        faces = []
        face_rows = []  # (T row, t offset) per face
        for i in range(len(env.obstacles)):
            for j, (t_row, t_off) in enumerate(env.obstacle_faces(i)):
                faces.append((i, j))
                face_rows.append((t_row, t_off))
        n_p = 2 * len(faces)
        layout = ProblemLayout(n=n, m=m, n_p=n_p, faces=tuple(faces))
        self.layout = layout
        nv = layout.num_vars

        bbox_lower, bbox_upper = geometry.bounding_box(state_poly)
        self.bbox = (bbox_lower, bbox_upper)

        rows = []  # (dense row over nv, lower, upper)

        def emit(row, lo, hi):
            rows.append((row, lo, hi))

        blocks = {}

        # dynamics equalities: x_k = x_current (bounds set per tick); then
        # A x_k - x_{k+1} + B u = 0
        start = len(rows)
        for r in range(n):
            row = np.zeros(nv)
            row[r] = -1.0
            emit(row, 0.0, 0.0)  # rewritten to -x_current at instantiation
        for r in range(n):
            row = np.zeros(nv)
            row[layout.x_k] = sys.a_matrix[r]
            row[layout.x_k1.start + r] = -1.0
            row[layout.u] = sys.b_matrix[r]
            emit(row, 0.0, 0.0)
        blocks["dynamics"] = slice(start, len(rows))

        # convex state rows on x_k
        start = len(rows)
        for a, b in zip(state_poly.normals, state_poly.offsets):
            row = np.zeros(nv)
            row[layout.x_k] = a
            emit(row, -np.inf, b)
        blocks["state"] = slice(start, len(rows))

        # obstacle Big-M rows, two per face (step k then step k+1)
        start = len(rows)
        t_normals = np.array([fr[0] for fr in face_rows]).reshape(
            len(face_rows), n)
        t_offsets = np.array([fr[1] for fr in face_rows])
        t_bigm = big_m_values(t_normals, t_offsets, bbox_lower, bbox_upper, policy)
        for f, ((t_row, t_off), m_val) in enumerate(zip(face_rows, t_bigm)):
            row = np.zeros(nv)
            row[layout.x_k] = t_row
            row[layout.p_index(f, 0)] = -m_val
            emit(row, -np.inf, t_off)
            row = np.zeros(nv)
            row[layout.x_k1] = t_row
            row[layout.p_index(f, 1)] = -m_val
            emit(row, -np.inf, t_off)
        blocks["obstacle"] = slice(start, len(rows))

        # invariant-set Big-M rows on x_{k+1}; empty entries force the binary
        # to 1 through an always-violated-when-active row
        start = len(rows)
        cis_meta = []  # per face: (C @ A, C @ B, c) for runtime presolve
        for f, (i, j) in enumerate(faces):
            entry = atlas.entries[(i, j)]
            if entry.empty:
                c_normals = np.zeros((1, n))
                c_offsets = np.array([-1.0])
            else:
                c_normals = entry.polytope.normals
                c_offsets = entry.polytope.offsets
            m_vals = big_m_values(c_normals, c_offsets, bbox_lower, bbox_upper,
                                  policy)
            for a, b, m_val in zip(c_normals, c_offsets, m_vals):
                row = np.zeros(nv)
                row[layout.x_k1] = a
                row[layout.p_index(f, 1)] = -m_val
                emit(row, -np.inf, b)
            cis_meta.append((c_normals @ sys.a_matrix, c_normals @ sys.b_matrix,
                             c_offsets, entry.empty))
        blocks["cis"] = slice(start, len(rows))
        self._cis_meta = cis_meta
        self._face_rows = face_rows

        # control rows
        start = len(rows)
        for a, b in zip(control_poly.normals, control_poly.offsets):
            row = np.zeros(nv)
            row[layout.u] = a
            emit(row, -np.inf, b)
        blocks["control"] = slice(start, len(rows))

        # cardinality rows: per obstacle, per step, 0 <= sum_j p <= n_c - 1
        start = len(rows)
        face_index = 0
        for i in range(len(env.obstacles)):
            n_c = len(env.obstacle_faces(i))
            for step in (0, 1):
                row = np.zeros(nv)
                for j in range(n_c):
                    row[layout.p_index(face_index + j, step)] = 1.0
                emit(row, 0.0, float(n_c - 1))
            face_index += n_c
        blocks["cardinality"] = slice(start, len(rows))

        # binary unit-interval bound rows (solver fixes binaries here)
        start = len(rows)
        binary_bound_rows = []
        for idx in range(n_p):
            row = np.zeros(nv)
            row[layout.p.start + idx] = 1.0
            binary_bound_rows.append(len(rows))
            emit(row, 0.0, 1.0)
        blocks["binary_bounds"] = slice(start, len(rows))

        a_dense = np.array([r for r, _, _ in rows])
        self.constraints = sp.csc_matrix(a_dense)
        self.lower = np.array([lo for _, lo, _ in rows])
        self.upper = np.array([hi for _, _, hi in rows])
        self.row_blocks = blocks
        self.binary_bound_rows = np.array(binary_bound_rows, dtype=int)
        self.binary_indices = np.arange(layout.p.start, layout.p.stop)

        hess = np.zeros(nv)
        hess[layout.u] = 1.0
        self.hessian = sp.diags(hess, format="csc")

    def instantiate(self, x_current, u_ref) -> MiqpProblem:
        x_current = np.asarray(x_current, dtype=float).ravel()
        u_ref = np.asarray(u_ref, dtype=float).ravel()
        lay = self.layout
        if x_current.size != lay.n or u_ref.size != lay.m:
            raise EncodeError("state/input dimension mismatch")
        if not (np.all(np.isfinite(x_current)) and np.all(np.isfinite(u_ref))):
            raise EncodeError("non-finite state or reference input")
        self._check_admissible(x_current)

        lower = self.lower.copy()
        upper = self.upper.copy()
        dyn = self.row_blocks["dynamics"]
        lower[dyn.start:dyn.start + lay.n] = -x_current
        upper[dyn.start:dyn.start + lay.n] = -x_current

        linear = np.zeros(lay.num_vars)
        linear[lay.u] = -u_ref

        return MiqpProblem(
            hessian=self.hessian, linear=linear, constraints=self.constraints,
            lower=lower, upper=upper, binary_indices=self.binary_indices,
            binary_bound_rows=self.binary_bound_rows,
            group_rows=self.row_blocks["cardinality"],
            row_blocks=self.row_blocks, layout=lay, env_hash=self.env_hash,
        )

    def _check_admissible(self, x_current) -> None:
        state_poly = self.env.state_polytope()
        if not state_poly.contains_point(x_current, tol=1e-7):
            raise InitialStateInfeasible(
                f"state {x_current} violates the convex state constraints")
        face = 0
        for i in range(len(self.env.obstacles)):
            n_c = len(self.env.obstacle_faces(i))
            sat = [
                self._face_rows[face + j][0] @ x_current
                <= self._face_rows[face + j][1] + FACE_SAT_TOL
                for j in range(n_c)
            ]
            if not any(sat):
                raise InitialStateInfeasible(
                    f"state {x_current} is inside (inflated) obstacle {i}")
            face += n_c

    def fix_step_k_binaries(self, problem: MiqpProblem, x_current) -> MiqpProblem:
        """Bound-fix the step-k binaries, which the known state fully determines."""
        x_current = np.asarray(x_current, dtype=float).ravel()
        out = problem.copy_bounds()
        face = 0
        for i in range(len(self.env.obstacles)):
            n_c = len(self.env.obstacle_faces(i))
            any_sat = False
            for j in range(n_c):
                t_row, t_off = self._face_rows[face + j]
                sat = t_row @ x_current <= t_off + FACE_SAT_TOL
                any_sat = any_sat or sat
                out.fix_binary(face + j, 0, 0 if sat else 1)
            if not any_sat:
                raise InitialStateInfeasible(
                    f"all faces of obstacle {i} violated at {x_current}")
            face += n_c
        return out

    def fix_resolved_faces(self, problem: MiqpProblem, x_current) -> MiqpProblem:
        """Optimality-preserving step-(k+1) fixes from one-step reachability.

        For each face, bound the terminal rows C(Ax + Bu) over the whole input
        box.  A face whose rows can never all hold gets its binary fixed to 1
        (relaxed).  An obstacle with a face whose rows always hold is resolved
        outright: that binary goes to 0, its siblings to 1; no feasible input
        is excluded because those rows are inactive either way.
        """
        x_current = np.asarray(x_current, dtype=float).ravel()
        amax_vec = np.full(self.layout.m, self.env.amax)
        out = problem.copy_bounds()
        face = 0
        for i in range(len(self.env.obstacles)):
            n_c = len(self.env.obstacle_faces(i))
            always = []
            never = []
            for j in range(n_c):
                ca, cb, c_off, empty = self._cis_meta[face + j]
                if empty:
                    never.append(j)
                    continue
                base = ca @ x_current
                span = np.abs(cb) @ amax_vec
                t_row, t_off = self._face_rows[face + j]
                t_base = t_row @ self.sys.a_matrix @ x_current
                t_span = np.abs(t_row @ self.sys.b_matrix) @ amax_vec
                if np.all(base + span <= c_off) and t_base + t_span <= t_off:
                    always.append(j)
                elif np.any(base - span > c_off) or t_base - t_span > t_off:
                    never.append(j)
            if always:
                j0 = always[0]
                for j in range(n_c):
                    out.fix_binary(face + j, 1, 0 if j == j0 else 1)
            else:
                for j in never:
                    out.fix_binary(face + j, 1, 1)
            face += n_c
        return out


def build_problem(sys: LinearSystem, env: Environment, atlas: CisAtlas,
                  x_current, u_ref,
                  policy: BigMPolicy = BigMPolicy()) -> MiqpProblem:
    """One-shot assembly; real-time callers should hold a ProblemTemplate."""
    return ProblemTemplate(sys, env, atlas, policy).instantiate(x_current, u_ref)

"""MIQP solver: best-first branch-and-bound over the face binaries with an
operator-splitting QP subsolver.

The subsolver works on the standard form min 1/2 z'Qz + q'z, l <= Az <= u.
Its KKT matrix depends only on (Q, A, rho), so one sparse factorization is
shared by every node of a solve and every control tick in a session; nodes
differ only in the bound rows that pin binaries.  An active-set polish step
refines converged iterates to KKT accuracy, which the optimality and
brute-force comparison tests rely on.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .encode import MiqpProblem

INT_TOL = 1e-5
PRUNE_TOL = 1e-9


class SolveError(Exception):
    pass


@dataclass(frozen=True)
class QpSettings:
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    max_iterations: int = 4000
    polish: bool = True
    sigma: float = 1e-6
    alpha: float = 1.6
    rho: float = 0.1
    rho_eq_scale: float = 1e3
    check_interval: int = 25
    eps_infeasible: float = 1e-8
    # Cross-check every ADMM infeasibility certificate with an exact phase-1
    # LP.  Costs ~tens of ms when it fires; the online filter disables it and
    # relies on its fallback ladder instead.
    exact_infeasibility: bool = True
    # Finish stalled solves with a dense active-set method.  Splitting
    # iterations crawl when a binding row couples to the objective variables
    # only through an equality chain with small coefficients (the required
    # dual is then huge); the active-set step computes it directly.
    exact_fallback: bool = True

    def __post_init__(self):
        if min(self.eps_abs, self.eps_rel, self.max_iterations, self.sigma,
               self.rho) <= 0:
            raise SolveError("QP settings must be positive")


@dataclass
class QpResult:
    status: str  # optimal | infeasible | numerical_failure
    z: np.ndarray | None = None
    objective: float = np.nan
    y: np.ndarray | None = None
    iterations: int = 0
    warm_state: tuple | None = None  # scaled (x, z, y) for warm starts


@dataclass
class MiqpResult:
    status: str  # optimal | infeasible | budget_exceeded
    u_opt: np.ndarray | None
    objective: float
    active_faces: dict
    stats: dict


def _ruiz_scaling(hessian: sp.spmatrix, constraints: sp.spmatrix,
                  iterations: int = 10):
    """Symmetric equilibration of [[Q, A'], [A, 0]]; returns (d_vars, e_rows)."""
    nv = hessian.shape[0]
    mc = constraints.shape[0]
    d = np.ones(nv)
    e = np.ones(mc)
    q = hessian.tocsc()
    a = constraints.tocsc()
    for _ in range(iterations):
        qs = sp.diags(d) @ q @ sp.diags(d)
        as_ = sp.diags(e) @ a @ sp.diags(d)
        col_q = np.abs(qs).max(axis=0).toarray().ravel() if qs.nnz else np.zeros(nv)
        col_a = np.abs(as_).max(axis=0).toarray().ravel() if as_.nnz else np.zeros(nv)
        row_a = np.abs(as_).max(axis=1).toarray().ravel() if as_.nnz else np.zeros(mc)
        var_norm = np.maximum(col_q, col_a)
        var_norm[var_norm <= 1e-12] = 1.0
        row_norm = row_a.copy()
        row_norm[row_norm <= 1e-12] = 1.0
        d *= 1.0 / np.sqrt(var_norm)
        e *= 1.0 / np.sqrt(row_norm)
    return d, e


class QpWorkspace:
    """Scaling and KKT factorization shared across bound-only problem variants."""

    def __init__(self, hessian: sp.spmatrix, constraints: sp.spmatrix,
                 settings: QpSettings, eq_rows: np.ndarray | None = None):
        self.settings = settings
        self.nv = hessian.shape[0]
        self.mc = constraints.shape[0]
        self.d, self.e = _ruiz_scaling(hessian, constraints)
        self.q_s = (sp.diags(self.d) @ hessian @ sp.diags(self.d)).tocsc()
        self.a_s = (sp.diags(self.e) @ constraints @ sp.diags(self.d)).tocsr()
        self.a_s_t = self.a_s.T.tocsr()

        base = np.full(self.mc, settings.rho)
        if eq_rows is not None and eq_rows.size:
            base[eq_rows] *= settings.rho_eq_scale
        self.base_rho = base
        self.rho_factor = 1.0
        self._refactor()

    def _refactor(self) -> None:
        self.rho = self.rho_factor * self.base_rho
        kkt = sp.bmat([
            [self.q_s + self.settings.sigma * sp.eye(self.nv), self.a_s.T],
            [self.a_s, -sp.diags(1.0 / self.rho)],
        ], format="csc")
        self.kkt = spla.splu(kkt)

    def adapt_rho(self, factor: float) -> None:
        """Scale the rho vector and refactorize; used when residuals stall."""
        self.rho_factor = float(np.clip(self.rho_factor * factor, 1e-6, 1e6))
        self._refactor()

    def scale_bounds(self, lower: np.ndarray, upper: np.ndarray):
        return self.e * lower, self.e * upper

    def solve(self, linear: np.ndarray, lower: np.ndarray, upper: np.ndarray,
              warm: tuple | None = None) -> QpResult:
        """ADMM iteration in the scaled space; residuals checked unscaled."""
        st = self.settings
        nv, mc = self.nv, self.mc
        q_lin = self.d * linear
        l_s, u_s = self.scale_bounds(lower, upper)

        if warm is not None:
            x, z, y = (warm[0].copy(), warm[1].copy(), warm[2].copy())
        else:
            x = np.zeros(nv)
            z = np.clip(np.zeros(mc), l_s, u_s)
            y = np.zeros(mc)

        rho = self.rho
        rhs = np.empty(nv + mc)
        for it in range(1, st.max_iterations + 1):
            rhs[:nv] = st.sigma * x - q_lin
            rhs[nv:] = z - y / rho
            sol = self.kkt.solve(rhs)
            x_t = sol[:nv]
            nu = sol[nv:]
            z_t = z + (nu - y) / rho
            x_new = st.alpha * x_t + (1 - st.alpha) * x
            z_pre = st.alpha * z_t + (1 - st.alpha) * z + y / rho
            z_new = np.clip(z_pre, l_s, u_s)
            y_new = rho * (z_pre - z_new)
            dy = y_new - y
            x, z, y = x_new, z_new, y_new

            if it % st.check_interval == 0 or it == st.max_iterations:
                ax = self.a_s @ x
                r_prim = np.max(np.abs(ax - z)) if mc else 0.0
                r_dual = np.max(np.abs(self.q_s @ x + q_lin + self.a_s_t @ y))
                scale_p = max(np.max(np.abs(ax)) if mc else 0.0,
                              np.max(np.abs(z)) if mc else 0.0, 1e-12)
                scale_d = max(np.max(np.abs(self.q_s @ x)),
                              np.max(np.abs(q_lin)),
                              np.max(np.abs(self.a_s_t @ y)) if mc else 0.0,
                              1e-12)
                if (r_prim <= st.eps_abs + st.eps_rel * scale_p
                        and r_dual <= st.eps_abs + st.eps_rel * scale_d):
                    zx = self.d * x
                    return QpResult("optimal", zx, iterations=it,
                                    y=self.e * y,
                                    warm_state=(x.copy(), z.copy(), y.copy()))
                # stalled residual balance: rescale rho and refactorize
                ratio = np.sqrt((r_prim / scale_p) / max(r_dual / scale_d,
                                                         1e-16))
                if ratio > 5.0 or ratio < 0.2:
                    self.adapt_rho(ratio)
                    rho = self.rho
                # primal infeasibility certificate on the dual step
                norm_dy = np.max(np.abs(dy)) if mc else 0.0
                if it >= 50 and norm_dy > 1e-10:
                    atdy = np.max(np.abs(self.a_s_t @ dy))
                    support = 0.0
                    dy_pos = np.clip(dy, 0.0, None)
                    dy_neg = np.clip(dy, None, 0.0)
                    fin_u = np.isfinite(u_s)
                    fin_l = np.isfinite(l_s)
                    if np.any(dy_pos[~fin_u] > st.eps_infeasible * norm_dy):
                        continue
                    if np.any(-dy_neg[~fin_l] > st.eps_infeasible * norm_dy):
                        continue
                    support = (u_s[fin_u] @ dy_pos[fin_u]
                               + l_s[fin_l] @ dy_neg[fin_l])
                    if (atdy <= st.eps_infeasible * norm_dy * 100
                            and support < -st.eps_infeasible * norm_dy):
                        return QpResult("infeasible", iterations=it)
        return QpResult("numerical_failure", iterations=st.max_iterations)


def _polish(problem: MiqpProblem, workspace: QpWorkspace, result: QpResult,
            lower: np.ndarray, upper: np.ndarray) -> QpResult:
    """Equality-KKT refinement on the detected active set."""
    z = result.z
    a = problem.constraints
    az = a @ z
    y = result.y if result.y is not None else np.zeros(a.shape[0])
    act_tol = 1e-7 * (1.0 + np.max(np.abs(az))) if az.size else 0.0
    low_act = (az - lower <= act_tol) & np.isfinite(lower)
    up_act = (upper - az <= act_tol) & np.isfinite(upper)
    eq = np.isclose(lower, upper)
    active = low_act | up_act | eq
    if not np.any(active):
        return result
    a_act = a[active].toarray()
    b_act = np.where(up_act[active], upper[active], lower[active])
    nv = a.shape[1]
    na = a_act.shape[0]
    kkt = np.zeros((nv + na, nv + na))
    kkt[:nv, :nv] = problem.hessian.toarray() + 1e-10 * np.eye(nv)
    kkt[:nv, nv:] = a_act.T
    kkt[nv:, :nv] = a_act
    rhs = np.concatenate([-problem.linear, b_act])
    try:
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    except np.linalg.LinAlgError:
        return result
    z_pol = sol[:nv]
    y_pol = np.zeros(a.shape[0])
    y_pol[active] = sol[nv:]

    def kkt_residual(zv, yv):
        viol = np.maximum(a @ zv - upper, 0.0) + np.maximum(lower - a @ zv, 0.0)
        stat = problem.hessian @ zv + problem.linear + a.T @ yv
        return max(np.max(viol, initial=0.0), np.max(np.abs(stat), initial=0.0))

    if kkt_residual(z_pol, y_pol) < kkt_residual(z, y):
        obj_pol = 0.5 * z_pol @ (problem.hessian @ z_pol) + problem.linear @ z_pol
        return QpResult("optimal", z_pol, obj_pol, y_pol, result.iterations,
                        warm_state=result.warm_state)
    return result


def default_workspace(problem: MiqpProblem,
                      settings: QpSettings = QpSettings()) -> QpWorkspace:
    """Workspace with rho boosted on equality rows and on the binary bound
    rows, which branch-and-bound pins to equalities node by node."""
    eq_rows = np.nonzero(np.isclose(problem.lower, problem.upper))[0]
    eq_rows = np.union1d(eq_rows, problem.binary_bound_rows)
    return QpWorkspace(problem.hessian, problem.constraints, settings,
                       eq_rows=eq_rows.astype(int))


def _exact_qp(problem: MiqpProblem, lower: np.ndarray, upper: np.ndarray,
              tol: float = 1e-9, max_iter: int = 500) -> QpResult:
    """Dense primal active-set solve, exact up to linear-algebra accuracy.

    Starts from a certified feasible point (phase-1 LP); working-set rows are
    unit-normalized before each KKT solve and the solve gets one step of
    iterative refinement, so boundary values come out accurate even when the
    binding rows have tiny coefficients on the objective variables.
    """
    from . import geometry

    a = problem.constraints.toarray()
    nv = a.shape[1]
    q_mat = problem.hessian.toarray()
    q_lin = problem.linear
    fin_u = np.isfinite(upper)
    fin_l = np.isfinite(lower)
    one_sided = np.vstack([a[fin_u], -a[fin_l]])
    one_offs = np.concatenate([upper[fin_u], -lower[fin_l]])
    try:
        z = geometry.feasible_point(geometry.Polytope(one_sided, one_offs))
    except geometry.GeometryError:
        return QpResult("infeasible")

    # zero-curvature coordinates get a tiny ridge so the KKT system is
    # nonsingular; the reported objective always uses the original Q
    diag = q_mat.diagonal()
    q_reg = q_mat + np.diag(np.where(diag == 0.0, 1e-8, 0.0))

    m = a.shape[0]
    eq = fin_u & fin_l & np.isclose(lower, upper)
    side = np.zeros(m, dtype=int)  # 0 inactive, 1 upper, -1 lower, 2 equality
    side[eq] = 2
    az = a @ z
    for r in range(m):
        if side[r] == 2:
            continue
        if fin_u[r] and az[r] >= upper[r] - 1e-8:
            side[r] = 1
        elif fin_l[r] and az[r] <= lower[r] + 1e-8:
            side[r] = -1

    # Rows dropped since the iterate last moved.  In exact arithmetic a
    # just-dropped row cannot block again before a real step, so excluding
    # these from the ratio test breaks degenerate add/drop cycles driven by
    # noise-sized directions.
    recently_dropped: set[int] = set()
    for _ in range(max_iter):
        w = np.nonzero(side != 0)[0]
        a_w = a[w]
        b_w = np.where(side[w] == -1, lower[w], upper[w])
        scale = np.linalg.norm(a_w, axis=1)
        scale[scale < 1e-300] = 1.0
        a_ws = a_w / scale[:, None]
        b_ws = b_w / scale
        k = len(w)
        kkt = np.zeros((nv + k, nv + k))
        kkt[:nv, :nv] = q_reg
        kkt[:nv, nv:] = a_ws.T
        kkt[nv:, :nv] = a_ws
        rhs = np.concatenate([-(q_mat @ z + q_lin), b_ws - a_ws @ z])
        try:
            sol = np.linalg.solve(kkt, rhs)
            sol = sol + np.linalg.solve(kkt, rhs - kkt @ sol)
        except np.linalg.LinAlgError:
            sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        d = sol[:nv]
        lam = sol[nv:] / scale
        step = np.max(np.abs(d)) if nv else 0.0
        if step <= 1e-9 * max(1.0, np.max(np.abs(z))):
            # KKT point if no working inequality has a wrong-sign multiplier
            # (relative to the dual scale: sub-noise negatives are kept)
            lam_scale = max(1.0, np.max(np.abs(lam)) if k else 0.0)
            drop = None
            worst = tol * lam_scale
            for idx, r in enumerate(w):
                if side[r] == 2:
                    continue
                v = lam[idx] if side[r] == 1 else -lam[idx]
                if v < -worst:
                    worst = -v
                    drop = r
            if drop is None:
                # One ridge-free re-solve on the final working set removes
                # the regularization bias from the reported point; keep it
                # only if it stays feasible (with free zero-curvature
                # variables the unridged system can be rank-deficient).
                kkt[:nv, :nv] = q_mat
                rhs0 = np.concatenate([-q_lin, b_ws])
                sol0, *_ = np.linalg.lstsq(kkt, rhs0, rcond=None)
                z_pol = sol0[:nv]
                az_pol = a @ z_pol
                ok = (np.all(az_pol <= upper + 1e-7)
                      and np.all(az_pol >= lower - 1e-7)
                      and np.max(np.abs(z_pol - z)) <= 1e-3)
                if ok:
                    z = z_pol
                    lam = sol0[nv:] / scale
                y = np.zeros(m)
                y[w] = lam
                objective = float(0.5 * z @ (q_mat @ z) + q_lin @ z)
                return QpResult("optimal", z, objective, y)
            side[drop] = 0
            recently_dropped.add(drop)
            continue
        ad = a @ d
        alpha = 1.0
        block = -1
        block_side = 0
        for r in range(m):
            if side[r] != 0 or r in recently_dropped:
                continue
            if ad[r] > 1e-12 and fin_u[r]:
                ratio = (upper[r] - az[r]) / ad[r]
                if ratio < alpha:
                    alpha, block, block_side = ratio, r, 1
            if ad[r] < -1e-12 and fin_l[r]:
                ratio = (lower[r] - az[r]) / ad[r]
                if ratio < alpha:
                    alpha, block, block_side = ratio, r, -1
        alpha = max(alpha, 0.0)
        z = z + alpha * d
        az = a @ z
        if alpha * step > 1e-12:
            recently_dropped.clear()
        if block >= 0:
            side[block] = block_side
    return QpResult("numerical_failure")


def qp_solve(problem: MiqpProblem, settings: QpSettings = QpSettings(),
             workspace: QpWorkspace | None = None,
             lower: np.ndarray | None = None,
             upper: np.ndarray | None = None,
             warm: tuple | None = None,
             exact_feasibility_check=None) -> QpResult:
    """Solve the continuous relaxation (binaries live in their bound rows)."""
    if workspace is None:
        workspace = default_workspace(problem, settings)
    lower = problem.lower if lower is None else lower
    upper = problem.upper if upper is None else upper
    result = workspace.solve(problem.linear, lower, upper, warm=warm)
    if result.status == "optimal":
        z = result.z
        result.objective = float(
            0.5 * z @ (problem.hessian @ z) + problem.linear @ z)
        if settings.polish:
            result = _polish(problem, workspace, result, lower, upper)
    elif result.status == "numerical_failure" and settings.exact_fallback:
        exact = _exact_qp(problem, lower, upper)
        exact.iterations = result.iterations
        return exact
    elif (result.status == "numerical_failure" and exact_feasibility_check
          and settings.exact_infeasibility):
        # Never report "infeasible" from a stalled iteration without proof.
        if not exact_feasibility_check(lower, upper):
            return QpResult("infeasible", iterations=result.iterations)
    elif (result.status == "infeasible" and exact_feasibility_check
          and settings.exact_infeasibility):
        if exact_feasibility_check(lower, upper):
            # Spurious certificate; surface it instead of pruning silently.
            return QpResult("numerical_failure", iterations=result.iterations)
    return result


def _lp_feasibility_check(problem: MiqpProblem):
    """Exact phase-1 LP on the row system, via the geometry kernel."""
    from . import geometry

    a = problem.constraints.toarray()

    def check(lower: np.ndarray, upper: np.ndarray) -> bool:
        rows = []
        offs = []
        fin_u = np.isfinite(upper)
        fin_l = np.isfinite(lower)
        rows.append(a[fin_u])
        offs.append(upper[fin_u])
        rows.append(-a[fin_l])
        offs.append(-lower[fin_l])
        poly = geometry.Polytope(np.vstack(rows), np.concatenate(offs))
        return not geometry.is_empty(poly)

    return check


@dataclass(order=True)
class _Node:
    bound: float
    neg_depth: int
    counter: int
    fixes: dict = field(compare=False)
    warm: tuple | None = field(compare=False, default=None)


def branch_and_bound(problem: MiqpProblem, settings: QpSettings = QpSettings(),
                     budget_ms: float = np.inf,
                     workspace: QpWorkspace | None = None,
                     incumbent_hints: list[dict] | None = None,
                     warm_root: tuple | None = None) -> MiqpResult:
    """Global MIQP optimum via best-first search on the relaxation bound.

    Branch variable: most fractional binary, ties to the lowest index.
    Node order: lowest bound first, deeper node first on ties.  A node whose
    bound reaches the incumbent (within tolerance) is pruned.
    """
    t_start = time.perf_counter()
    if workspace is None:
        workspace = default_workspace(problem, settings)
    feas_check = _lp_feasibility_check(problem)
    n_bin = problem.binary_indices.size
    bound_rows = problem.binary_bound_rows
    base_lb = problem.lower[bound_rows].copy()
    base_ub = problem.upper[bound_rows].copy()

    qp_solves = 0
    nodes = 0
    incumbent_obj = np.inf
    incumbent_z = None
    root_warm = None

    def bounds_for(fixes: dict):
        lower = problem.lower.copy()
        upper = problem.upper.copy()
        for idx, val in fixes.items():
            lower[bound_rows[idx]] = float(val)
            upper[bound_rows[idx]] = float(val)
        return lower, upper

    def solve_node(fixes: dict, warm):
        nonlocal qp_solves
        lower, upper = bounds_for(fixes)
        qp_solves += 1
        return qp_solve(problem, settings, workspace, lower, upper, warm,
                        exact_feasibility_check=feas_check)

    def fractional(z):
        vals = z[problem.binary_indices]
        frac = np.minimum(np.abs(vals - np.floor(vals + 0.5)), 0.5)
        free = (base_ub - base_lb) > 0.5
        frac = np.where(free, frac, 0.0)
        return vals, frac

    # Heuristic incumbents: concrete binary assignments supplied by the caller
    # (e.g. the previous tick's face selection).
    for hint in (incumbent_hints or []):
        res = solve_node(hint, None)
        if res.status == "optimal":
            vals, frac = fractional(res.z)
            if np.max(frac, initial=0.0) <= INT_TOL and res.objective < incumbent_obj:
                incumbent_obj = res.objective
                incumbent_z = res.z

    counter = 0
    heap: list[_Node] = [_Node(-np.inf, 0, counter, {}, warm=warm_root)]
    budget_hit = False
    while heap:
        if (time.perf_counter() - t_start) * 1e3 > budget_ms:
            budget_hit = True
            break
        node = heapq.heappop(heap)
        if node.bound >= incumbent_obj - PRUNE_TOL:
            continue
        nodes += 1
        res = solve_node(node.fixes, node.warm)
        if nodes == 1 and res.warm_state is not None:
            root_warm = res.warm_state
        if res.status == "infeasible":
            continue
        if res.status == "numerical_failure":
            raise SolveError("QP subsolver failed on a certified-feasible node")
        bound = max(node.bound, res.objective)
        if bound >= incumbent_obj - PRUNE_TOL:
            continue
        vals, frac = fractional(res.z)
        free_mask = np.array([
            (base_ub[i] - base_lb[i] > 0.5) and i not in node.fixes
            for i in range(n_bin)
        ])
        frac = np.where(free_mask, frac, 0.0)
        max_frac = np.max(frac, initial=0.0)
        if max_frac <= INT_TOL:
            # Integral relaxation: certify by re-solving with binaries pinned.
            pin = dict(node.fixes)
            for i in range(n_bin):
                if free_mask[i]:
                    pin[i] = int(round(vals[i]))
            if pin == node.fixes:
                # every binary is already pinned through its bounds; the
                # relaxation itself is the certified pinned solve
                res_fix = res
            else:
                res_fix = solve_node(pin, res.warm_state)
            if res_fix.status == "optimal" and res_fix.objective < incumbent_obj:
                incumbent_obj = res_fix.objective
                incumbent_z = res_fix.z
            continue
        branch = int(np.argmax(frac))
        for val in (0, 1):
            fixes = dict(node.fixes)
            fixes[branch] = val
            counter += 1
            heapq.heappush(heap, _Node(bound, -(len(fixes)), counter, fixes,
                                       warm=res.warm_state))

    wall_ms = (time.perf_counter() - t_start) * 1e3
    stats = {"qp_solves": qp_solves, "nodes": nodes, "wall_ms": wall_ms,
             "root_warm": root_warm}
    if incumbent_z is None:
        status = "budget_exceeded" if budget_hit else "infeasible"
        return MiqpResult(status, None, np.nan, {}, stats)
    status = "budget_exceeded" if budget_hit else "optimal"
    if problem.layout is not None:
        u_opt = incumbent_z[problem.layout.u]
        faces = _active_faces(problem, incumbent_z)
    else:
        u_opt = incumbent_z
        faces = {}
    return MiqpResult(status, u_opt, float(incumbent_obj), faces, stats)


def _active_faces(problem: MiqpProblem, z: np.ndarray) -> dict:
    """Per obstacle, the first face whose step-(k+1) binary is active (0)."""
    lay = problem.layout
    chosen = {}
    for f, (i, j) in enumerate(lay.faces):
        if i in chosen:
            continue
        if z[lay.p_index(f, 1)] < 0.5:
            chosen[i] = j
    return chosen

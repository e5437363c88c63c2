"""Halfspace-representation polytope algebra on top of a dense simplex LP kernel.

Every set in the pipeline is a polytope {x : normals @ x <= offsets}.  The LP
kernel solves the small dense problems (<= ~2000 rows, <= ~10 columns) that
containment, redundancy and projection checks reduce to.  Exactness of these
certification LPs matters more than speed, so the kernel is a simplex method
(applied to the dual, whose basis has the size of the ambient dimension) with
Bland's rule as the anti-cycling fallback.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FEASIBILITY_TOL = 1e-8
CONTAINMENT_TOL = 1e-7
REDUNDANCY_TOL = 1e-7

# Fourier-Motzkin intermediate row budget; default environments stay far below.
FM_ROW_CAP = 2000

_PIVOT_TOL = 1e-11
_COST_TOL = 1e-9


class GeometryError(Exception):
    """Contract violation in a set computation."""


class NumericalFailure(GeometryError):
    """The LP kernel could not certify a result within its iteration cap."""


@dataclass(frozen=True)
class Polytope:
    """{x in R^dim : normals @ x <= offsets}.  Emptiness is computed, not stored."""

    normals: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        normals = np.atleast_2d(np.asarray(self.normals, dtype=float))
        offsets = np.asarray(self.offsets, dtype=float).ravel()
        if normals.shape[0] != offsets.shape[0]:
            raise GeometryError(
                f"row mismatch: {normals.shape[0]} normals vs {offsets.shape[0]} offsets"
            )
        if not (np.all(np.isfinite(normals)) and np.all(np.isfinite(offsets))):
            raise GeometryError("non-finite polytope data")
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "offsets", offsets)

    @property
    def dim(self) -> int:
        return self.normals.shape[1]

    @property
    def num_rows(self) -> int:
        return self.normals.shape[0]

    @staticmethod
    def box(lower, upper) -> "Polytope":
        lower = np.asarray(lower, dtype=float).ravel()
        upper = np.asarray(upper, dtype=float).ravel()
        d = lower.size
        eye = np.eye(d)
        return Polytope(np.vstack([eye, -eye]), np.concatenate([upper, -lower]))

    @staticmethod
    def empty(dim: int) -> "Polytope":
        # The canonical explicitly-empty set: 0 <= -1.
        return Polytope(np.zeros((1, dim)), np.array([-1.0]))

    def intersect(self, other: "Polytope") -> "Polytope":
        if other.dim != self.dim:
            raise GeometryError("dimension mismatch in intersection")
        return Polytope(
            np.vstack([self.normals, other.normals]),
            np.concatenate([self.offsets, other.offsets]),
        )

    def contains_point(self, x, tol: float = FEASIBILITY_TOL) -> bool:
        x = np.asarray(x, dtype=float).ravel()
        if self.num_rows == 0:
            return True
        return bool(np.all(self.normals @ x <= self.offsets + tol))

    def slack(self, x) -> np.ndarray:
        """offsets - normals @ x; negative entries are violated rows."""
        return self.offsets - self.normals @ np.asarray(x, dtype=float).ravel()


@dataclass(frozen=True)
class LpSolution:
    status: str  # optimal | infeasible | unbounded
    objective: float
    point: np.ndarray | None = None


def _simplex_standard(a_eq: np.ndarray, b_eq: np.ndarray, cost: np.ndarray,
                      max_iter: int = 20000):
    """Two-phase tableau simplex for min cost'w s.t. a_eq w = b_eq, w >= 0.

    Returns (status, w, objective, basis) with status in
    {optimal, infeasible, unbounded}.  Dantzig pricing with a switch to
    Bland's rule after a run of degenerate pivots.
    """
    a_eq = np.asarray(a_eq, dtype=float)
    b_eq = np.asarray(b_eq, dtype=float).copy()
    cost = np.asarray(cost, dtype=float)
    m, n = a_eq.shape

    # Flip rows so the rhs is nonnegative, then add artificials (identity basis).
    a_eq = a_eq.copy()
    neg = b_eq < 0
    a_eq[neg] *= -1.0
    b_eq[neg] *= -1.0

    tab = np.zeros((m + 1, n + m + 1))
    tab[:m, :n] = a_eq
    tab[:m, n:n + m] = np.eye(m)
    tab[:m, -1] = b_eq
    basis = list(range(n, n + m))

    def run_phase(obj_row: np.ndarray, allowed: int) -> str:
        tab[m, :] = 0.0
        tab[m, :obj_row.size] = obj_row
        for r, bi in enumerate(basis):
            if abs(tab[m, bi]) > 0:
                tab[m, :] -= tab[m, bi] * tab[r, :]
        degenerate_run = 0
        for _ in range(max_iter):
            use_bland = degenerate_run > 50
            costs = tab[m, :allowed]
            if use_bland:
                entering_candidates = np.nonzero(costs < -_COST_TOL)[0]
                if entering_candidates.size == 0:
                    return "optimal"
                j = int(entering_candidates[0])
            else:
                j = int(np.argmin(costs))
                if costs[j] >= -_COST_TOL:
                    return "optimal"
            col = tab[:m, j]
            pos = np.nonzero(col > _PIVOT_TOL)[0]
            if pos.size == 0:
                return "unbounded"
            ratios = tab[pos, -1] / col[pos]
            best = np.min(ratios)
            ties = pos[ratios <= best + 1e-12]
            # leaving: Bland tie-break (lowest basis index) for anti-cycling
            r = int(ties[np.argmin([basis[t] for t in ties])])
            degenerate_run = degenerate_run + 1 if best <= 1e-12 else 0
            piv = tab[r, j]
            tab[r, :] /= piv
            for i in range(m + 1):
                if i != r and abs(tab[i, j]) > 0:
                    tab[i, :] -= tab[i, j] * tab[r, :]
            basis[r] = j
        raise NumericalFailure("simplex iteration cap exceeded")

    # Phase 1: drive artificials to zero.
    phase1_cost = np.concatenate([np.zeros(n), np.ones(m)])
    status = run_phase(phase1_cost, n + m)
    if status != "optimal":  # pragma: no cover - phase 1 is always bounded
        raise NumericalFailure("phase-1 anomaly")
    if -tab[m, -1] > 1e-7:  # phase-1 objective is -tab[m, -1]
        return "infeasible", None, None, None

    # Pivot residual artificials out of the basis where possible.
    for r in range(m):
        if basis[r] >= n:
            row = tab[r, :n]
            candidates = np.nonzero(np.abs(row) > 1e-9)[0]
            if candidates.size:
                j = int(candidates[0])
                piv = tab[r, j]
                tab[r, :] /= piv
                for i in range(m + 1):
                    if i != r and abs(tab[i, j]) > 0:
                        tab[i, :] -= tab[i, j] * tab[r, :]
                basis[r] = j
    # Forbid artificial columns from re-entering.
    tab[:m, n:n + m] = 0.0

    status = run_phase(cost, n)
    if status == "unbounded":
        return "unbounded", None, None, None
    w = np.zeros(n)
    for r, bi in enumerate(basis):
        if bi < n:
            w[bi] = tab[r, -1]
    return "optimal", w, float(cost @ w), [bi for bi in basis if bi < n]


def _recover_primal(poly: Polytope, c_max: np.ndarray, dual_obj: float,
                    basis_rows: list[int]):
    """Vertex recovery from the tight rows selected by the optimal dual basis."""
    rows = [i for i in basis_rows if i < poly.num_rows]
    if not rows:
        x = np.zeros(poly.dim)
    else:
        a_b = poly.normals[rows]
        b_b = poly.offsets[rows]
        x, *_ = np.linalg.lstsq(a_b, b_b, rcond=None)
    ok = poly.contains_point(x, tol=1e-7) and abs(c_max @ x - dual_obj) <= 1e-6 * (
        1.0 + abs(dual_obj)
    )
    return x, ok


def lp_solve(cost, poly: Polytope, sense: str = "max") -> LpSolution:
    """Optimize cost @ x over poly.  sense is "min" or "max"."""
    cost = np.asarray(cost, dtype=float).ravel()
    if cost.size != poly.dim:
        raise GeometryError(f"cost dim {cost.size} != polytope dim {poly.dim}")
    if sense not in ("min", "max"):
        raise GeometryError(f"bad sense {sense!r}")
    c_max = cost if sense == "max" else -cost

    if poly.num_rows == 0:
        if np.all(np.abs(c_max) <= _COST_TOL):
            return LpSolution("optimal", 0.0, np.zeros(poly.dim))
        return LpSolution("unbounded", np.inf)

    # Dual of max c'x s.t. Ax <= b:  min b'y s.t. A'y = c, y >= 0.
    status, y, dual_obj, basis = _simplex_standard(
        poly.normals.T, c_max, poly.offsets
    )
    if status == "optimal":
        x, ok = _recover_primal(poly, c_max, dual_obj, basis)
        if not ok:
            # Degenerate recovery: break ties with a deterministic tiny
            # perturbation of the objective, verify against the original.
            rng = np.random.default_rng(0)
            for _ in range(3):
                c_pert = c_max + rng.normal(scale=1e-9, size=c_max.size)
                st2, _, obj2, basis2 = _simplex_standard(
                    poly.normals.T, c_pert, poly.offsets
                )
                if st2 != "optimal":
                    continue
                x, ok = _recover_primal(poly, c_max, dual_obj, basis2)
                if ok:
                    break
            if not ok:
                raise NumericalFailure("could not recover a certified vertex")
        obj = c_max @ x
        return LpSolution("optimal", float(obj if sense == "max" else -obj), x)

    if status == "unbounded":
        # Dual unbounded => primal infeasible.
        return LpSolution("infeasible", np.nan)

    # Dual infeasible: primal is unbounded if nonempty, else infeasible.
    feasible, _ = _phase1_point(poly)
    if feasible:
        return LpSolution("unbounded", np.inf if sense == "max" else -np.inf)
    return LpSolution("infeasible", np.nan)


def _phase1_rows(poly: Polytope):
    """Unit-normalized rows so the phase-1 slack t measures geometric
    distance uniformly; mixed row scales otherwise distort the objective."""
    norms = np.linalg.norm(poly.normals, axis=1)
    norms = np.where(norms < 1e-300, 1.0, norms)
    return poly.normals / norms[:, None], poly.offsets / norms


def _phase1_point(poly: Polytope):
    """Feasibility via min t s.t. Ax - t*1 <= b, t >= -1 (always solvable)."""
    m, d = poly.normals.shape
    a_rows, b_offs = _phase1_rows(poly)
    normals = np.hstack([a_rows, -np.ones((m, 1))])
    normals = np.vstack([normals, np.zeros((1, d + 1))])
    normals[-1, -1] = -1.0
    offsets = np.concatenate([b_offs, [1.0]])
    aug = Polytope(normals, offsets)
    cost = np.zeros(d + 1)
    cost[-1] = 1.0
    sol = lp_solve(cost, aug, sense="min")
    if sol.status != "optimal":  # pragma: no cover - aug problem is solvable
        raise NumericalFailure("feasibility LP did not solve")
    if sol.objective > FEASIBILITY_TOL:
        return False, None
    return True, sol.point[:d]


def lp_value(cost, poly: Polytope, sense: str = "max") -> LpSolution:
    """lp_solve without primal recovery: status and objective only."""
    cost = np.asarray(cost, dtype=float).ravel()
    if cost.size != poly.dim:
        raise GeometryError(f"cost dim {cost.size} != polytope dim {poly.dim}")
    c_max = cost if sense == "max" else -cost
    if poly.num_rows == 0:
        if np.all(np.abs(c_max) <= _COST_TOL):
            return LpSolution("optimal", 0.0)
        return LpSolution("unbounded", np.inf)
    status, _, dual_obj, _ = _simplex_standard(poly.normals.T, c_max, poly.offsets)
    if status == "optimal":
        return LpSolution(
            "optimal", float(dual_obj if sense == "max" else -dual_obj))
    if status == "unbounded":
        return LpSolution("infeasible", np.nan)
    feasible, _ = _phase1_point(poly)
    if feasible:
        return LpSolution("unbounded", np.inf if sense == "max" else -np.inf)
    return LpSolution("infeasible", np.nan)


def _phase1_aug(poly: Polytope):
    m, d = poly.normals.shape
    a_rows, b_offs = _phase1_rows(poly)
    normals = np.hstack([a_rows, -np.ones((m, 1))])
    normals = np.vstack([normals, np.zeros((1, d + 1))])
    normals[-1, -1] = -1.0
    offsets = np.concatenate([b_offs, [1.0]])
    aug = Polytope(normals, offsets)
    cost = np.zeros(d + 1)
    cost[-1] = 1.0
    return aug, cost


def is_empty(poly: Polytope) -> bool:
    # value-only phase 1: no vertex recovery, robust on large degenerate rows
    aug, cost = _phase1_aug(poly)
    sol = lp_value(cost, aug, sense="min")
    if sol.status != "optimal":  # pragma: no cover - aug problem is solvable
        raise NumericalFailure("feasibility LP did not solve")
    return sol.objective > FEASIBILITY_TOL


def feasible_point(poly: Polytope) -> np.ndarray:
    feasible, x = _phase1_point(poly)
    if not feasible:
        raise GeometryError("polytope is empty")
    return x


def _dedupe_rows(normals: np.ndarray, offsets: np.ndarray):
    """Among rows with numerically equal unit normals keep the tightest offset."""
    if normals.shape[0] == 0:
        return normals, offsets
    order = np.lexsort(np.round(np.column_stack([normals, offsets]).T[::-1], 9))
    keep_idx: list[int] = []
    for i in order:
        if keep_idx and np.allclose(normals[keep_idx[-1]], normals[i], atol=1e-9):
            if offsets[i] >= offsets[keep_idx[-1]] - 1e-12:
                continue
            keep_idx[-1] = i
        else:
            keep_idx.append(int(i))
    return normals[keep_idx], offsets[keep_idx]


def reduce(poly: Polytope) -> Polytope:
    """Drop redundant rows; the surviving rows are LP-certified irredundant.

    Large row sets (typical after a Fourier-Motzkin step) are screened against
    a growing core of candidate-irredundant rows first: a row whose support
    value over the core already stays below its offset is redundant for the
    full set too, so only a small fraction ever needs the exact final pass.
    """
    if is_empty(poly):
        raise GeometryError("reduce of an empty polytope is undefined")
    normals, offsets = _normalize_rows(poly.normals, poly.offsets)
    normals, offsets = _dedupe_rows(normals, offsets)
    m = normals.shape[0]
    if m <= 1:
        return Polytope(normals, offsets)

    order = np.arange(m)
    if m > 8:
        # Process likely-binding rows first so the core converges quickly.
        try:
            center, _ = chebyshev_center(Polytope(normals, offsets))
            order = np.argsort(offsets - normals @ center)
        except GeometryError:
            pass

    core: list[int] = [int(order[0])]
    for i in order[1:]:
        i = int(i)
        sub = Polytope(normals[core], offsets[core])
        sol = lp_value(normals[i], sub, "max")
        if sol.status == "optimal" and sol.objective <= offsets[i] + REDUNDANCY_TOL:
            continue  # redundant against a superset region, hence redundant
        core.append(i)

    # Exact pass: each survivor against all the other survivors.
    alive = sorted(core)
    i = 0
    while i < len(alive):
        ri = alive[i]
        others = [r for r in alive if r != ri]
        if not others:
            break
        # Cap the objective direction so the subproblem cannot be unbounded.
        test_normals = np.vstack([normals[others], normals[ri]])
        test_offsets = np.concatenate([offsets[others], [offsets[ri] + 1.0]])
        sol = lp_value(normals[ri], Polytope(test_normals, test_offsets), "max")
        if sol.status == "optimal" and sol.objective <= offsets[ri] + REDUNDANCY_TOL:
            alive.pop(i)
        else:
            i += 1
    return Polytope(normals[alive], offsets[alive])


def _normalize_rows(normals: np.ndarray, offsets: np.ndarray):
    norms = np.linalg.norm(normals, axis=1)
    keep_n = []
    keep_o = []
    for a, b, s in zip(normals, offsets, norms):
        if s <= 1e-12:
            if b < -1e-12:
                raise GeometryError("explicitly empty row in a set assumed non-empty")
            continue  # 0 <= b: vacuous
        keep_n.append(a / s)
        keep_o.append(b / s)
    if not keep_n:
        return np.zeros((0, normals.shape[1])), np.zeros(0)
    return np.array(keep_n), np.array(keep_o)


def _normalize_rows_keep_empty(normals: np.ndarray, offsets: np.ndarray):
    """Like _normalize_rows but for derived rows of a known-nonempty system:
    a numerically-zero row with a clearly negative offset is a numerics fault."""
    norms = np.linalg.norm(normals, axis=1)
    zero = norms <= 1e-12
    if np.any(offsets[zero] < -1e-7):
        raise NumericalFailure("derived an explicitly empty row from a "
                               "non-empty system")
    keep = ~zero
    return normals[keep] / norms[keep, None], offsets[keep] / norms[keep]


def canonicalize(poly: Polytope) -> Polytope:
    """Unit normals, rows sorted lexicographically: the cache/digest form."""
    normals, offsets = _normalize_rows(poly.normals, poly.offsets)
    if normals.shape[0] == 0:
        return Polytope(np.zeros((0, poly.dim)), np.zeros(0))
    stacked = np.column_stack([normals, offsets])
    order = np.lexsort(np.round(stacked.T[::-1], 10))
    return Polytope(normals[order], offsets[order])


def _eliminate_one(normals: np.ndarray, offsets: np.ndarray, col: int):
    """Fourier-Motzkin elimination of one coordinate (by column index)."""
    coeff = normals[:, col]
    pos = np.nonzero(coeff > 1e-10)[0]
    neg = np.nonzero(coeff < -1e-10)[0]
    zero = np.nonzero(np.abs(coeff) <= 1e-10)[0]
    out_rows = [np.delete(normals[zero], col, axis=1)]
    out_offs = [offsets[zero]]
    if pos.size and neg.size:
        cp = coeff[pos]          # > 0
        cq = -coeff[neg]         # > 0
        combo = (cq[None, :, None] * normals[pos][:, None, :]
                 + cp[:, None, None] * normals[neg][None, :, :])
        combo_off = cq[None, :] * offsets[pos][:, None] \
            + cp[:, None] * offsets[neg][None, :]
        combo = np.delete(combo.reshape(-1, normals.shape[1]), col, axis=1)
        out_rows.append(combo)
        out_offs.append(combo_off.reshape(-1))
    rows = np.vstack(out_rows)
    offs = np.concatenate(out_offs)
    if rows.shape[0]:
        rows, offs = _normalize_rows_keep_empty(rows, offs)
        rows, offs = _dedupe_rows(rows, offs)
    if rows.shape[0] > FM_ROW_CAP:
        raise GeometryError(
            f"Fourier-Motzkin row cap exceeded: {rows.shape[0]} > {FM_ROW_CAP} "
            f"(pos={pos.size}, neg={neg.size})"
        )
    return rows, offs


def project(poly: Polytope, keep) -> Polytope:
    """Exact orthogonal projection onto the kept coordinates (ascending order)."""
    keep = sorted(set(int(k) for k in keep))
    if not keep:
        raise GeometryError("projection onto the empty index set")
    if any(k < 0 or k >= poly.dim for k in keep):
        raise GeometryError("projection index out of range")
    if is_empty(poly):
        return Polytope.empty(len(keep))

    drop = [i for i in range(poly.dim) if i not in keep]
    normals, offsets = poly.normals, poly.offsets
    remaining = list(range(poly.dim))
    current = Polytope(normals, offsets)
    for d in drop:
        col = remaining.index(d)
        n2, o2 = _eliminate_one(current.normals, current.offsets, col)
        remaining.pop(col)
        if n2.shape[0] == 0:
            current = Polytope(np.zeros((0, len(remaining))), np.zeros(0))
        else:
            n2, o2 = _normalize_rows(n2, o2)
            current = Polytope(n2, o2)
            if current.num_rows:
                current = reduce(current)
    return current


def contains(outer: Polytope, inner: Polytope, tol: float = CONTAINMENT_TOL) -> bool:
    """inner subset of outer, certified row by row via support LPs."""
    if outer.dim != inner.dim:
        raise GeometryError("dimension mismatch in containment check")
    for a, b in zip(outer.normals, outer.offsets):
        sol = lp_solve(a, inner, "max")
        if sol.status == "infeasible":
            raise GeometryError("containment check requires a non-empty inner set")
        if sol.status == "unbounded" or sol.objective > b + tol:
            return False
    return True


def chebyshev_center(poly: Polytope):
    """Center and radius of the largest inscribed ball (one LP)."""
    m, d = poly.normals.shape
    if m == 0:
        raise GeometryError("chebyshev center of an unbounded set")
    norms = np.linalg.norm(poly.normals, axis=1)
    normals = np.hstack([poly.normals, norms[:, None]])
    normals = np.vstack([normals, np.zeros((1, d + 1))])
    normals[-1, -1] = -1.0  # r >= 0
    offsets = np.concatenate([poly.offsets, [0.0]])
    cost = np.zeros(d + 1)
    cost[-1] = 1.0
    sol = lp_solve(cost, Polytope(normals, offsets), "max")
    if sol.status == "infeasible":
        raise GeometryError("chebyshev center of an empty polytope")
    if sol.status == "unbounded":
        raise GeometryError("chebyshev center of an unbounded polytope")
    return sol.point[:d], float(sol.objective)


def bounding_box(poly: Polytope):
    """(lower, upper) per coordinate via 2*dim support LPs."""
    lower = np.empty(poly.dim)
    upper = np.empty(poly.dim)
    for k in range(poly.dim):
        e = np.zeros(poly.dim)
        e[k] = 1.0
        hi = lp_solve(e, poly, "max")
        lo = lp_solve(e, poly, "min")
        if hi.status != "optimal" or lo.status != "optimal":
            raise GeometryError(f"polytope unbounded or empty along coordinate {k}")
        upper[k] = hi.objective
        lower[k] = lo.objective
    return lower, upper


def sample(poly: Polytope, count: int, seed: int = 0) -> np.ndarray:
    """Hit-and-run samples from a bounded non-empty polytope (deterministic)."""
    center, radius = chebyshev_center(poly)
    if radius <= 0:
        return np.tile(center, (count, 1))
    rng = np.random.default_rng(seed)
    x = center.copy()
    out = np.empty((count, poly.dim))
    burn = 10
    for i in range(count + burn):
        direction = rng.normal(size=poly.dim)
        direction /= np.linalg.norm(direction)
        denom = poly.normals @ direction
        slack = poly.offsets - poly.normals @ x
        t_hi = np.inf
        t_lo = -np.inf
        pos = denom > 1e-12
        neg = denom < -1e-12
        if np.any(pos):
            t_hi = np.min(slack[pos] / denom[pos])
        if np.any(neg):
            t_lo = np.max(slack[neg] / denom[neg])
        if not (np.isfinite(t_hi) and np.isfinite(t_lo)):
            raise GeometryError("sampling requires a bounded polytope")
        t = rng.uniform(min(t_lo, t_hi), max(t_lo, t_hi))
        x = x + t * direction
        if i >= burn:
            out[i - burn] = x
    return out


def to_hrep_text(poly: Polytope) -> str:
    """Golden-test text format: 'dim rows' header then one 'a_1 .. a_dim b' per line."""
    lines = [f"{poly.dim} {poly.num_rows}"]
    for a, b in zip(poly.normals, poly.offsets):
        lines.append(" ".join(f"{v:.12e}" for v in (*a, b)))
    return "\n".join(lines) + "\n"


def from_hrep_text(text: str) -> Polytope:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    dim, rows = (int(v) for v in lines[0].split())
    data = np.array([[float(v) for v in ln.split()] for ln in lines[1:1 + rows]])
    if rows == 0:
        return Polytope(np.zeros((0, dim)), np.zeros(0))
    if data.shape != (rows, dim + 1):
        raise GeometryError("malformed H-rep text")
    return Polytope(data[:, :dim], data[:, dim])

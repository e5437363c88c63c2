"""Solver-layer tests: the ADMM QP kernel against hand-solved examples and a
KKT oracle, then branch-and-bound against exhaustive binary enumeration."""

import itertools

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.optimize import minimize

from misc.encode import MiqpProblem, ProblemTemplate
from misc.invariance import LinearSystem
from misc.solve import (QpSettings, SolveError, branch_and_bound,
                        default_workspace, qp_solve)

TIGHT = QpSettings(eps_abs=1e-9, eps_rel=1e-9, max_iterations=20000)


def make_problem(hessian, linear, a, lower, upper, binary_bound_rows=()):
    """Small hand-built problem in the solver's row-bound form."""
    hessian = sp.csc_matrix(np.atleast_2d(np.asarray(hessian, dtype=float)))
    a = sp.csc_matrix(np.atleast_2d(np.asarray(a, dtype=float)))
    binary_bound_rows = np.asarray(binary_bound_rows, dtype=int)
    if binary_bound_rows.size:
        cols = a.toarray()[binary_bound_rows]
        binary_indices = np.array([int(np.argmax(r != 0)) for r in cols])
    else:
        binary_indices = np.zeros(0, dtype=int)
    return MiqpProblem(
        hessian=hessian, linear=np.asarray(linear, dtype=float),
        constraints=a, lower=np.asarray(lower, dtype=float),
        upper=np.asarray(upper, dtype=float),
        binary_indices=binary_indices,
        binary_bound_rows=binary_bound_rows,
        group_rows=slice(0, 0), row_blocks={}, layout=None, env_hash="test")


class TestQpExamples:
    def test_scalar_quadratic(self):
        # min 1/2 z^2 - z on [-10, 10]: z* = 1, objective -1/2
        prob = make_problem([[1.0]], [-1.0], [[1.0]], [-10.0], [10.0])
        res = qp_solve(prob)
        assert res.status == "optimal"
        assert res.z[0] == pytest.approx(1.0, abs=1e-6)
        assert res.objective == pytest.approx(-0.5, abs=1e-6)

    def test_active_box_constraint(self):
        # min 1/2 |z|^2 - 3'z with z <= 1 componentwise: z* = (1, 1)
        prob = make_problem(np.eye(2), [-3.0, -3.0], np.eye(2),
                            [-np.inf, -np.inf], [1.0, 1.0])
        res = qp_solve(prob)
        assert np.allclose(res.z, [1.0, 1.0], atol=1e-6)
        assert res.objective == pytest.approx(-5.0, abs=1e-6)

    def test_equality_constraint(self):
        # min 1/2 (x^2 + y^2) with x + y = 2: (1, 1), objective 1
        prob = make_problem(np.eye(2), [0.0, 0.0], [[1.0, 1.0]], [2.0], [2.0])
        res = qp_solve(prob)
        assert np.allclose(res.z, [1.0, 1.0], atol=1e-6)
        assert res.objective == pytest.approx(1.0, abs=1e-6)

    def test_infeasible_rows(self):
        # z <= -1 and z >= 1
        prob = make_problem([[1.0]], [0.0], [[1.0], [1.0]],
                            [-np.inf, 1.0], [-1.0, np.inf])
        res = qp_solve(prob)
        assert res.status == "infeasible"

    def test_projection_form(self):
        # projection of the point (2, -2) onto the unit box
        prob = make_problem(np.eye(2), [-2.0, 2.0], np.eye(2),
                            [-1.0, -1.0], [1.0, 1.0])
        res = qp_solve(prob)
        assert np.allclose(res.z, [1.0, -1.0], atol=1e-6)

    def test_settings_validation(self):
        with pytest.raises(SolveError):
            QpSettings(eps_abs=0.0)
        with pytest.raises(SolveError):
            QpSettings(rho=-1.0)


class TestQpRandomOracle:
    def test_against_slsqp(self):
        """100 random strictly convex QPs with inequality rows, compared to a
        general-purpose NLP solver at 1e-5."""
        rng = np.random.default_rng(77)
        for _ in range(100):
            nv = int(rng.integers(2, 6))
            mr = int(rng.integers(1, 8))
            root = rng.normal(size=(nv, nv))
            q_mat = root.T @ root + 0.5 * np.eye(nv)
            linear = rng.normal(size=nv)
            a = rng.normal(size=(mr, nv))
            interior = rng.normal(size=nv) * 0.2
            upper = a @ interior + rng.uniform(0.5, 2.0, mr)
            lower = np.full(mr, -np.inf)
            # bounding box rows keep everything compact
            a_full = np.vstack([a, np.eye(nv)])
            lower = np.concatenate([lower, np.full(nv, -20.0)])
            upper = np.concatenate([upper, np.full(nv, 20.0)])
            prob = make_problem(q_mat, linear, a_full, lower, upper)
            res = qp_solve(prob, TIGHT)
            assert res.status == "optimal"

            def f(z):
                return 0.5 * z @ q_mat @ z + linear @ z

            cons = [{"type": "ineq",
                     "fun": lambda z, r=r: upper[r] - a_full[r] @ z}
                    for r in range(a_full.shape[0])]
            cons += [{"type": "ineq",
                      "fun": lambda z, r=r: a_full[r] @ z - lower[r]}
                     for r in range(a_full.shape[0])
                     if np.isfinite(lower[r])]
            # feasibility of our solution
            az = a_full @ res.z
            assert np.all(az <= upper + 1e-6)
            assert np.all(az >= lower - 1e-6)
            # reference from two starts; ours must match the best of them
            ref_fun = np.inf
            for x0 in (interior, res.z):
                ref = minimize(f, x0, method="SLSQP", constraints=cons,
                               options={"maxiter": 300, "ftol": 1e-10})
                feas = (np.all(a_full @ ref.x <= upper + 1e-7)
                        and np.all(a_full @ ref.x >= lower - 1e-7))
                if feas:
                    ref_fun = min(ref_fun, ref.fun)
            assert np.isfinite(ref_fun)
            assert res.objective == pytest.approx(ref_fun, abs=1e-5)

    def test_kkt_residual_at_optimum(self):
        """Stationarity and complementarity hold at the reported solution."""
        rng = np.random.default_rng(5)
        for _ in range(20):
            nv = 4
            root = rng.normal(size=(nv, nv))
            q_mat = root.T @ root + np.eye(nv)
            linear = rng.normal(size=nv)
            a = np.vstack([rng.normal(size=(3, nv)), np.eye(nv)])
            upper = np.concatenate([rng.uniform(1, 3, 3), np.full(nv, 10.0)])
            lower = np.full(3 + nv, -10.0)
            prob = make_problem(q_mat, linear, a, lower, upper)
            res = qp_solve(prob, TIGHT)
            assert res.status == "optimal"
            # stationarity: Qz + q + A'y = 0
            grad = q_mat @ res.z + linear + a.T @ res.y
            assert np.linalg.norm(grad, np.inf) < 1e-5
            # primal feasibility
            az = a @ res.z
            assert np.all(az <= upper + 1e-6)
            assert np.all(az >= lower - 1e-6)

    def test_warm_start_consistency(self):
        rng = np.random.default_rng(3)
        nv = 5
        root = rng.normal(size=(nv, nv))
        q_mat = root.T @ root + np.eye(nv)
        linear = rng.normal(size=nv)
        a = np.eye(nv)
        prob = make_problem(q_mat, linear, a, np.full(nv, -2.0),
                            np.full(nv, 2.0))
        workspace = default_workspace(prob, TIGHT)
        cold = qp_solve(prob, TIGHT, workspace)
        warm = qp_solve(prob, TIGHT, workspace, warm=cold.warm_state)
        assert np.allclose(cold.z, warm.z, atol=1e-8)
        assert warm.iterations <= cold.iterations


def brute_force_reference(problem, assignments, settings=TIGHT):
    """Enumerate binary assignments, solve each pinned QP, keep the best."""
    best = (np.inf, None)
    workspace = default_workspace(problem, settings)
    for combo in assignments:
        trial = problem.copy_bounds()
        for idx, val in combo.items():
            row = trial.binary_bound_rows[idx]
            trial.lower[row] = float(val)
            trial.upper[row] = float(val)
        res = qp_solve(trial, settings, workspace,
                       lower=trial.lower, upper=trial.upper)
        if res.status == "optimal" and res.objective < best[0]:
            best = (res.objective, res.z)
    return best


class TestBranchAndBound:
    def _random_miqp(self, rng, n_cont=2, n_bin=3):
        """Continuous block coupled to binaries through inequality rows."""
        nv = n_cont + n_bin
        hessian = np.zeros((nv, nv))
        hessian[:n_cont, :n_cont] = np.eye(n_cont)
        target = rng.uniform(-3, 3, n_cont)
        linear = np.zeros(nv)
        linear[:n_cont] = -target
        rows = []
        lower = []
        upper = []
        # coupling: x_i <= 4 * p_i  (binary gates the continuous range)
        for i in range(min(n_cont, n_bin)):
            row = np.zeros(nv)
            row[i] = 1.0
            row[n_cont + i] = -4.0
            rows.append(row)
            lower.append(-np.inf)
            upper.append(0.0)
        # continuous box
        for i in range(n_cont):
            row = np.zeros(nv)
            row[i] = 1.0
            rows.append(row)
            lower.append(-5.0)
            upper.append(5.0)
        # at most n_bin - 1 binaries active
        row = np.zeros(nv)
        row[n_cont:] = 1.0
        rows.append(row)
        lower.append(0.0)
        upper.append(float(n_bin - 1))
        # binary bound rows last
        bound_rows = []
        for i in range(n_bin):
            row = np.zeros(nv)
            row[n_cont + i] = 1.0
            bound_rows.append(len(rows))
            rows.append(row)
            lower.append(0.0)
            upper.append(1.0)
        return make_problem(hessian, linear, np.array(rows), lower, upper,
                            binary_bound_rows=bound_rows)

    def test_matches_enumeration(self):
        """40 random MIQPs against exhaustive enumeration at 1e-6."""
        rng = np.random.default_rng(21)
        for _ in range(40):
            prob = self._random_miqp(rng)
            n_bin = prob.binary_indices.size
            res = branch_and_bound(prob, TIGHT)
            combos = [dict(enumerate(bits)) for bits in
                      itertools.product((0, 1), repeat=n_bin)]
            ref_obj, _ = brute_force_reference(prob, combos)
            if res.status == "infeasible":
                assert not np.isfinite(ref_obj)
            else:
                assert res.status == "optimal"
                assert res.objective == pytest.approx(ref_obj, abs=1e-6)

    def test_solution_is_integral_and_feasible(self):
        rng = np.random.default_rng(8)
        prob = self._random_miqp(rng)
        res = branch_and_bound(prob, TIGHT)
        assert res.status == "optimal"
        z = res.u_opt  # layout-free problems report the full vector
        binaries = z[prob.binary_indices]
        assert np.all(np.abs(binaries - np.round(binaries)) < 1e-5)
        az = prob.constraints @ z
        assert np.all(az <= prob.upper + 1e-6)
        assert np.all(az >= prob.lower - 1e-6)

    def test_bound_dominates_incumbent(self):
        """The root relaxation never exceeds the mixed-integer optimum."""
        rng = np.random.default_rng(13)
        for _ in range(10):
            prob = self._random_miqp(rng)
            root = qp_solve(prob, TIGHT)
            res = branch_and_bound(prob, TIGHT)
            if res.status == "optimal" and root.status == "optimal":
                assert root.objective <= res.objective + 1e-6

    def test_budget_exceeded_status(self):
        rng = np.random.default_rng(2)
        prob = self._random_miqp(rng, n_cont=3, n_bin=6)
        res = branch_and_bound(prob, QpSettings(), budget_ms=0.0)
        assert res.status == "budget_exceeded"

    def test_incumbent_hint_accepted(self):
        rng = np.random.default_rng(4)
        prob = self._random_miqp(rng)
        plain = branch_and_bound(prob, TIGHT)
        n_bin = prob.binary_indices.size
        hint = {i: 1 for i in range(n_bin - 1)}
        hint[n_bin - 1] = 0
        hinted = branch_and_bound(prob, TIGHT, incumbent_hints=[hint])
        assert hinted.status == plain.status == "optimal"
        assert hinted.objective == pytest.approx(plain.objective, abs=1e-7)


class TestFullEncodingSolve:
    def test_certificate_resolve(self, toy_env, toy_atlas):
        """Re-solving with the optimal face selection pinned reproduces the
        branch-and-bound objective at 1e-8."""
        sys = LinearSystem.from_environment(toy_env)
        template = ProblemTemplate(sys, toy_env, toy_atlas)
        x = np.array([13.0, 20.0, 2.0, 0.0])  # just left of the obstacle
        u_ref = np.array([toy_env.amax, 0.0])  # shove toward it
        prob = template.fix_resolved_faces(
            template.fix_step_k_binaries(
                template.instantiate(x, u_ref), x), x)
        res = branch_and_bound(prob, TIGHT)
        assert res.status == "optimal"
        pinned = prob.copy_bounds()
        lo, hi = pinned.binary_bounds()
        free = np.nonzero(hi - lo > 0.5)[0]
        # pin every remaining free binary to its optimal value
        z = None
        full = branch_and_bound(prob, TIGHT)
        for idx in free:
            i_face, step = divmod(idx, 2)
            active = (full.active_faces.get(
                prob.layout.faces[i_face][0]) == prob.layout.faces[i_face][1])
            pinned.fix_binary(i_face, step, 0 if active and step == 1 else 1)
        res_pin = qp_solve(pinned, TIGHT, lower=pinned.lower,
                           upper=pinned.upper)
        assert res_pin.status == "optimal"
        assert res_pin.objective == pytest.approx(res.objective, abs=1e-8)

"""Outer-loop behavior: both solvers, all variants, logging, reuse."""

import numpy as np
import pytest

from aladin import expr as ex
from aladin.expr import VectorFunction, var, param
from aladin.driver import CSV_HEADER, run_admm, run_aladin
from aladin.errors import SolverError
from aladin.examples_lib import coupled_qp, ocp_chain, tutorial
from aladin.local import solve_local
from aladin.problem import (
    SeparableProblem,
    SolverOptions,
    Subproblem,
    set_parameters,
    validate,
)

import oracles


def convex_coupled_instance(seed, n_blocks=3, block_size=2):
    """Random strictly convex QP blocks with chain coupling (no g/h/bounds)."""
    return coupled_qp(seed=seed, n_blocks=n_blocks, block_size=block_size)


def stack_solution(sol):
    return np.concatenate([np.concatenate(sol.xs), sol.lam])


class TestTutorial:
    def test_converges_to_elimination_oracle(self):
        xy, lam_star, _ = oracles.tutorial_solution()
        sol = run_aladin(tutorial(), SolverOptions(term_eps=1e-11))
        assert sol.termination == "tolerance-met"
        assert sol.consensus_violation <= 1e-10
        np.testing.assert_allclose(sol.xs[0], xy[:1], atol=1e-6)
        np.testing.assert_allclose(sol.xs[1], xy, atol=1e-6)
        np.testing.assert_allclose(sol.lam, [lam_star], atol=1e-6)

    def test_termination_honesty(self):
        eps = 1e-9
        sol = run_aladin(tutorial(), SolverOptions(term_eps=eps))
        assert sol.termination == "tolerance-met"
        last = sol.log.records[-1]
        assert last.consensus_viol <= eps and last.local_step <= eps

    def test_eps_zero_disables_termination(self):
        sol = run_aladin(tutorial(), SolverOptions(term_eps=0.0, max_iter=12))
        assert sol.termination == "max-iterations"
        assert sol.iterations == 12

    def test_all_variants_agree_on_solution(self):
        xy, lam_star, _ = oracles.tutorial_solution()
        for variant in ("fullspace", "nullspace", "bilevel"):
            sol = run_aladin(
                tutorial(),
                SolverOptions(term_eps=1e-11, variant=variant, inner_iter=5),
            )
            assert sol.termination == "tolerance-met", variant
            np.testing.assert_allclose(sol.xs[1], xy, atol=1e-6)


class TestDecoupled:
    def decoupled_problem(self):
        f1 = VectorFunction([ex.square(var(0) - 3)], 1)
        f2 = VectorFunction(
            [ex.square(var(0) + 1) + ex.square(var(1) - 0.5)], 2
        )
        return SeparableProblem(
            [Subproblem(f1, A=np.zeros((0, 1))), Subproblem(f2, A=np.zeros((0, 2)))]
        )

    def test_aladin_matches_standalone_locals(self):
        prob = self.decoupled_problem()
        sol = run_aladin(prob, SolverOptions(term_eps=1e-10))
        for i, sub in enumerate(prob.subproblems):
            ref = solve_local(
                sub, sub.z0, np.zeros(0), 1e-8 * np.eye(sub.n_x), tol=1e-12
            )
            np.testing.assert_allclose(sol.xs[i], ref.x, atol=1e-8)

    def test_admm_matches_standalone_locals(self):
        prob = self.decoupled_problem()
        sol = run_admm(prob, SolverOptions(term_eps=1e-10))
        np.testing.assert_allclose(sol.xs[0], [3.0], atol=1e-8)
        np.testing.assert_allclose(sol.xs[1], [-1.0, 0.5], atol=1e-8)


class TestVariantConsistency:
    def test_full_vs_nullspace_trajectories_convex(self):
        for seed in range(5):
            prob = convex_coupled_instance(seed)
            opts_a = SolverOptions(term_eps=0, max_iter=8, variant="fullspace")
            opts_b = SolverOptions(term_eps=0, max_iter=8, variant="nullspace")
            sa = run_aladin(prob, opts_a)
            sb = run_aladin(convex_coupled_instance(seed), opts_b)
            for ra, rb in zip(sa.log.records, sb.log.records):
                for za, zb in zip(ra.z, rb.z):
                    np.testing.assert_allclose(za, zb, atol=1e-8)
                np.testing.assert_allclose(ra.lam, rb.lam, atol=1e-8)

    def test_bilevel_equals_nullspace_exact_inner(self):
        prob = tutorial()
        n_c = prob.n_c
        sa = run_aladin(
            tutorial(), SolverOptions(term_eps=0, max_iter=10, variant="nullspace")
        )
        sb = run_aladin(
            tutorial(),
            SolverOptions(
                term_eps=0, max_iter=10, variant="bilevel", inner_iter=n_c
            ),
        )
        for ra, rb in zip(sa.log.records, sb.log.records):
            for za, zb in zip(ra.z, rb.z):
                np.testing.assert_allclose(za, zb, atol=1e-6)
            np.testing.assert_allclose(ra.lam, rb.lam, atol=1e-6)


class TestAdmm:
    def test_convex_qp_reaches_centralized_solution(self):
        prob = convex_coupled_instance(7)
        xs_ref, _ = oracles.solve_centralized(prob, tol=1e-12)
        sol = run_admm(prob, SolverOptions(term_eps=0, max_iter=500, rho_admm=100.0))
        diff = max(np.abs(a - b).max() for a, b in zip(sol.xs, xs_ref))
        assert diff <= 1e-4
        assert sol.consensus_violation <= 1e-6

    def test_same_log_shape_as_aladin(self):
        sol = run_admm(tutorial(), SolverOptions(term_eps=0, max_iter=5))
        rows = sol.log.rows()
        assert len(rows) == 5 and len(rows[0]) == len(CSV_HEADER)


class TestParametricReuse:
    def test_minimizer_follows_parameter(self):
        f = VectorFunction([ex.square(var(0) - param(0))], 1, n_p=1)
        prob = SeparableProblem([Subproblem(f, A=np.zeros((0, 1)), p=[1.0])])
        graph = prob.subproblems[0].f.outputs[0]
        sol1 = run_aladin(prob, SolverOptions(term_eps=1e-10))
        np.testing.assert_allclose(sol1.xs[0], [1.0], atol=1e-8)
        set_parameters(prob, 0, [3.0])
        sol2 = run_aladin(prob, SolverOptions(term_eps=1e-10))
        np.testing.assert_allclose(sol2.xs[0], [3.0], atol=1e-8)
        assert prob.subproblems[0].f.outputs[0] is graph

    def test_receding_horizon_loop_matches_one_shot(self):
        # drive the control example through 5 initial conditions, reusing the
        # problem object; each solve must match a fresh instance's solution
        prob = ocp_chain()
        opts = SolverOptions(term_eps=1e-9)
        rng = np.random.default_rng(3)
        inits = [
            [(-1.0 + 0.2 * t + rng.uniform(-0.05, 0.05), 0.1 * t),
             (0.5, 0.05 * t),
             (2.5 - 0.2 * t, -0.05 * t)]
            for t in range(5)
        ]
        for states in inits:
            for i, st in enumerate(states):
                set_parameters(prob, i, list(st))
            sol = run_aladin(prob, opts)
            fresh = ocp_chain()
            for i, st in enumerate(states):
                set_parameters(fresh, i, list(st))
            ref = run_aladin(fresh, opts)
            for a, b in zip(sol.xs, ref.xs):
                np.testing.assert_allclose(a, b, atol=1e-7)


class TestExampleLibrary:
    def test_tutorial_dimensions(self):
        prob = tutorial()
        assert prob.n_s == 2 and prob.n_c == 1
        assert prob.subproblems[0].n_x == 1
        assert prob.subproblems[1].n_x == 2

    def test_coupled_qp_seeded_determinism(self):
        a = coupled_qp(seed=42)
        b = coupled_qp(seed=42)
        for sa, sb in zip(a.subproblems, b.subproblems):
            np.testing.assert_array_equal(sa.A, sb.A)
            np.testing.assert_array_equal(sa.z0, sb.z0)
            x = np.array([0.3, -0.4, 1.1])
            assert ex.evaluate(sa.f, x)[0] == ex.evaluate(sb.f, x)[0]

    def test_ocp_chain_validates_and_solves(self):
        prob = ocp_chain()
        assert validate(prob) == []
        sol = run_aladin(prob, SolverOptions(term_eps=1e-9))
        assert sol.termination == "tolerance-met"
        # input bounds must be respected at every knot
        for x, sub in zip(sol.xs, prob.subproblems):
            assert np.all(x >= sub.lb - 1e-12) and np.all(x <= sub.ub + 1e-12)

    def test_unknown_name(self):
        from aladin.examples_lib import example_library

        with pytest.raises(KeyError):
            example_library("does-not-exist")


class TestLogsAndGuards:
    def test_csv_header_and_rows(self, tmp_path):
        sol = run_aladin(tutorial(), SolverOptions(term_eps=1e-10))
        path = tmp_path / "log.csv"
        sol.log.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "iter,consensus_viol,local_step,qp_step,active_changes,comms_floats"
        assert len(lines) == sol.iterations + 1

    def test_json_log(self, tmp_path):
        sol = run_aladin(
            tutorial(), SolverOptions(term_eps=1e-10, variant="bilevel", inner_iter=3)
        )
        data = sol.log.to_json(tmp_path / "log.json")
        assert (tmp_path / "log.json").exists()
        assert data[0]["comms_floats"] > 0  # bilevel exchanges floats

    def test_invalid_problem_rejected(self):
        f = VectorFunction([ex.square(var(0))], 1)
        bad = SeparableProblem([Subproblem(f, A=[[0.0]])], b=[0.0])
        with pytest.raises(ValueError, match="invalid problem"):
            run_aladin(bad)

    def test_divergence_guard(self):
        # unbounded linear objective: with a tiny curvature floor the QP
        # step explodes immediately
        f = VectorFunction([100.0 * var(0)], 1)
        prob = SeparableProblem([Subproblem(f, A=np.zeros((0, 1)))])
        sol = run_aladin(
            prob, SolverOptions(term_eps=1e-8, max_iter=50, reg_param=1e-9)
        )
        assert sol.termination == "error"
        assert "divergence" in sol.message

    def test_parallel_matches_sequential(self):
        seq = run_aladin(tutorial(), SolverOptions(term_eps=1e-10, parallel=False))
        par = run_aladin(tutorial(), SolverOptions(term_eps=1e-10, parallel=True))
        assert seq.iterations == par.iterations
        for ra, rb in zip(seq.log.records, par.log.records):
            for xa, xb in zip(ra.x, rb.x):
                assert np.array_equal(xa, xb)
        assert np.array_equal(seq.lam, par.lam)

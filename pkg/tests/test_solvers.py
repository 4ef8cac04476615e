"""Solver stack tests: CG behavior, ILU(0) exactness, AMG hierarchy checks."""

import numpy as np
import pytest
import scipy.linalg as la
import scipy.sparse as sp

from emilab.fem import ProblemConfig, assemble_operators
from emilab.meshgen import build_dofmap, build_mesh, label_model_a
from emilab.solvers import (
    AmgError,
    AmgPreconditioner,
    SolverConfig,
    amg_build,
    amg_vcycle,
    blockdiag_prec,
    cg_solve,
    ilu0_factor,
)
from emilab.system import build_system, pin_nullspace, solve_direct


def dirichlet_laplacian_2d(m):
    """Standard SPD 5-point Laplacian on an m x m interior grid."""
    main = np.full(m, 2.0)
    off = np.full(m - 1, -1.0)
    T = sp.diags([off, main * 2, off], [-1, 0, 1])
    I = sp.eye(m)
    E = sp.diags([off, off], [-1, 1])
    return (sp.kron(I, T) + sp.kron(E, I)).tocsr()


def tridiag_laplacian(n):
    return sp.diags(
        [np.full(n - 1, -1.0), np.full(n, 2.0), np.full(n - 1, -1.0)], [-1, 0, 1]
    ).tocsr()


def _emi_case(nh, n_cells, tau=0.01):
    mesh = build_mesh(nh)
    labeling = label_model_a(mesh, n_cells)
    dofmap = build_dofmap(mesh, labeling)
    ops = assemble_operators(mesh, labeling, dofmap, ProblemConfig(tau=tau))
    return pin_nullspace(build_system(ops), mesh=mesh), ops


def test_cg_identity_one_iteration():
    A = sp.eye(7, format="csr")
    b = np.arange(1.0, 8.0)
    x, report = cg_solve(A, b)
    assert report.iterations == 1
    assert report.converged
    assert np.allclose(x, b, rtol=1e-14)


def test_cg_matches_direct_solve():
    A = dirichlet_laplacian_2d(7)
    b = np.sin(np.arange(A.shape[0], dtype=float))
    x, report = cg_solve(A, b, SolverConfig(tol=1e-12))
    x_ref = la.solve(A.toarray(), b)
    assert report.converged
    assert np.linalg.norm(x - x_ref) <= 1e-9 * np.linalg.norm(x_ref)


def test_cg_true_residual_on_success():
    A = dirichlet_laplacian_2d(9)
    b = np.ones(A.shape[0])
    x, report = cg_solve(A, b)
    true_rel = np.linalg.norm(b - A @ x) / np.linalg.norm(b)
    assert report.converged
    assert true_rel <= 1e-9
    assert report.final_rel_residual == pytest.approx(true_rel, rel=1e-12)


def test_cg_energy_error_monotone():
    A = dirichlet_laplacian_2d(8)
    b = np.cos(np.arange(A.shape[0], dtype=float))
    x_star = la.solve(A.toarray(), b)
    iterates = []
    cg_solve(A, b, SolverConfig(tol=1e-12), callback=lambda x: iterates.append(x.copy()))
    energies = [float((x - x_star) @ (A @ (x - x_star))) for x in iterates]
    diffs = np.diff(energies)
    assert np.all(diffs <= 1e-12 * max(energies))


def test_cg_breakdown_on_indefinite():
    A = sp.diags([1.0, -1.0]).tocsr()
    b = np.array([1.0, 1.0])
    x, report = cg_solve(A, b)
    assert report.breakdown
    assert not report.converged
    assert report.breakdown_iteration is not None


def test_cg_zero_rhs():
    A = dirichlet_laplacian_2d(4)
    x, report = cg_solve(A, np.zeros(A.shape[0]))
    assert report.iterations == 0
    assert report.converged
    assert np.all(x == 0.0)


def test_cg_deterministic():
    A = dirichlet_laplacian_2d(8)
    b = np.sin(np.arange(A.shape[0], dtype=float))
    _, r1 = cg_solve(A, b)
    _, r2 = cg_solve(A, b)
    assert r1.iterations == r2.iterations
    assert r1.residual_history == r2.residual_history


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(tol=0.0)
    with pytest.raises(ValueError):
        SolverConfig(maxiter=0)


# ---------------------------------------------------------------------------
# ILU(0)


def test_ilu0_tridiagonal_is_exact():
    """With no fill possible, ILU(0) reproduces the full factorization."""
    A = tridiag_laplacian(20)
    prec = ilu0_factor(A)
    assert prec.shift == 0.0
    LU = (prec.lower @ prec.upper).tocsr()
    assert abs(LU - A).max() <= 1e-14
    r = np.sin(np.arange(20, dtype=float))
    assert np.allclose(prec(r), la.solve(A.toarray(), r), rtol=1e-12)


def test_ilu0_pattern_is_preserved():
    A = dirichlet_laplacian_2d(6)
    prec = ilu0_factor(A)
    combined = (sp.tril(prec.lower, -1) + prec.upper).tocsr()
    combined.sort_indices()
    a_sorted = A.copy()
    a_sorted.sort_indices()
    assert np.array_equal(combined.indices, a_sorted.indices)
    assert np.array_equal(combined.indptr, a_sorted.indptr)


def test_ilu0_zero_pivot_shifted():
    A = sp.csr_matrix(np.array([[1e-30, 1.0], [1.0, 1e-30]]))
    prec = ilu0_factor(A)
    assert prec.shift > 0.0
    z = prec(np.array([1.0, 2.0]))
    assert np.all(np.isfinite(z))


def test_ilu0_missing_diagonal_rejected():
    A = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
    A.eliminate_zeros()
    with pytest.raises(ValueError):
        ilu0_factor(A)


def test_ilu0_accelerates_cg():
    A = dirichlet_laplacian_2d(32)
    b = np.ones(A.shape[0])
    _, plain = cg_solve(A, b)
    _, prec = cg_solve(A, b, M=ilu0_factor(A))
    assert prec.converged and plain.converged
    assert prec.iterations <= plain.iterations / 2


def test_ilu0_action_symmetric_on_spd_input():
    """On an SPD matrix ILU(0) factors satisfy U = diag(U) L^T, so the action
    is symmetric and valid inside CG."""
    A = dirichlet_laplacian_2d(12)
    prec = ilu0_factor(A)
    rng = np.random.default_rng(29)
    for _ in range(5):
        r1, r2 = rng.standard_normal((2, A.shape[0]))
        assert r2 @ prec(r1) == pytest.approx(r1 @ prec(r2), rel=1e-10)


# ---------------------------------------------------------------------------
# Block-diagonal preconditioner


def test_blockdiag_exact_block_solve():
    system, ops = _emi_case(16, 1)
    prec = blockdiag_prec(ops, eps=1e-4)
    rng = np.random.default_rng(3)
    r = rng.standard_normal(system.n)
    z = prec(r)
    assert np.linalg.norm(prec.matrix @ z - r) <= 1e-10 * np.linalg.norm(r)


def test_blockdiag_symmetric_linear_action():
    system, ops = _emi_case(16, 1)
    prec = blockdiag_prec(ops, eps=1e-4)
    rng = np.random.default_rng(11)
    r1, r2 = rng.standard_normal((2, system.n))
    lhs = r2 @ prec(r1)
    rhs = r1 @ prec(r2)
    assert lhs == pytest.approx(rhs, rel=1e-10)
    combo = prec(2.0 * r1 + 3.0 * r2)
    assert np.allclose(combo, 2.0 * prec(r1) + 3.0 * prec(r2), rtol=1e-10)


def test_blockdiag_large_eps_stays_spd():
    system, ops = _emi_case(16, 1)
    prec = blockdiag_prec(ops, eps=1.0)
    rng = np.random.default_rng(5)
    for _ in range(5):
        v = rng.standard_normal(system.n)
        assert v @ prec(v) > 0.0


def test_blockdiag_rejects_nonpositive_eps():
    _, ops = _emi_case(16, 1)
    with pytest.raises(ValueError):
        blockdiag_prec(ops, eps=0.0)


# ---------------------------------------------------------------------------
# AMG


def test_amg_1d_poisson_model_problem():
    A = tridiag_laplacian(64)
    h = amg_build(A, target_coarse=8)
    assert len(h.levels) >= 2
    assert all(a > b for a, b in zip(h.sizes, h.sizes[1:]))
    assert h.sizes[-1] <= 8
    b = np.ones(64)
    _, plain = cg_solve(A, b)
    _, prec = cg_solve(A, b, M=AmgPreconditioner(h))
    assert prec.converged
    assert prec.iterations <= 15
    assert plain.iterations >= 30  # the unpreconditioned count is far larger


def test_amg_identity_is_identity_action():
    A = sp.eye(64, format="csr")
    h = amg_build(A, target_coarse=200)
    assert len(h.levels) == 0
    r = np.sin(np.arange(64, dtype=float))
    assert np.allclose(amg_vcycle(h, r), r, rtol=1e-13)


def test_amg_galerkin_identity():
    A = dirichlet_laplacian_2d(24)
    h = amg_build(A, target_coarse=50)
    rng = np.random.default_rng(17)
    norm_a = np.abs(A).sum(axis=1).max()
    for lvl, nxt in zip(h.levels, h.levels[1:] + [None]):
        coarse = nxt.matrix if nxt is not None else None
        if coarse is None:
            break
        P = lvl.prolong
        for _ in range(5):
            v = rng.standard_normal(P.shape[1])
            gap = np.linalg.norm((P.T @ (lvl.matrix @ (P @ v))) - coarse @ v)
            assert gap <= 1e-12 * norm_a * np.linalg.norm(v)


def test_amg_vcycle_zero_input():
    A = dirichlet_laplacian_2d(16)
    h = amg_build(A, target_coarse=50)
    z = amg_vcycle(h, np.zeros(A.shape[0]))
    assert np.all(z == 0.0)


def test_amg_vcycle_symmetric():
    A = dirichlet_laplacian_2d(24)
    h = amg_build(A, target_coarse=50)
    rng = np.random.default_rng(23)
    for _ in range(5):
        r1, r2 = rng.standard_normal((2, A.shape[0]))
        lhs = r2 @ amg_vcycle(h, r1)
        rhs = r1 @ amg_vcycle(h, r2)
        assert lhs == pytest.approx(rhs, rel=1e-10)


def test_amg_level_sizes():
    A = dirichlet_laplacian_2d(64)
    h = amg_build(A, target_coarse=200)
    assert all(a > b for a, b in zip(h.sizes, h.sizes[1:]))
    assert h.sizes[-1] <= 200


def test_amg_stagnation_aborts():
    A = sp.eye(500, format="csr")  # no strong couplings anywhere
    with pytest.raises(AmgError):
        amg_build(A, target_coarse=100)


def test_amg_on_pinned_system():
    system, _ = _emi_case(32, 1)
    h = amg_build(system.matrix)
    _, report = cg_solve(system.matrix, system.rhs, M=AmgPreconditioner(h))
    assert report.converged
    assert report.iterations <= 40


# ---------------------------------------------------------------------------
# Cross-solver agreement and clustering trends


def test_all_solvers_agree():
    system, ops = _emi_case(32, 1)
    x_ref = solve_direct(system)
    solutions = [x_ref]
    for M in (
        None,
        ilu0_factor(system.matrix),
        blockdiag_prec(ops, eps=1e-4),
        AmgPreconditioner(amg_build(system.matrix)),
    ):
        x, report = cg_solve(system.matrix, system.rhs, M=M)
        assert report.converged
        solutions.append(x)
    for a in solutions:
        for b in solutions:
            assert np.linalg.norm(a - b) <= 1e-6 * np.linalg.norm(x_ref)


def test_block_preconditioned_spectrum_clusters_at_one():
    """The share of preconditioned eigenvalues away from 1 shrinks under refinement."""
    fractions = []
    for nh in (8, 16, 32):
        mesh = build_mesh(nh)
        labeling = label_model_a(mesh, 1)
        dofmap = build_dofmap(mesh, labeling)
        ops = assemble_operators(mesh, labeling, dofmap, ProblemConfig(tau=0.01))
        system = build_system(ops)
        prec = blockdiag_prec(ops, eps=1e-4)
        eigs = la.eigh(
            system.matrix.toarray(), prec.matrix.toarray(), eigvals_only=True
        )
        frac = np.count_nonzero((eigs < 0.9) | (eigs > 1.1)) / len(eigs)
        fractions.append(frac)
    assert fractions[0] > fractions[1] > fractions[2]

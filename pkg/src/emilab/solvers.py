"""Solver stack: preconditioned CG, ILU(0), exact block solves, one-cycle AMG.

Every preconditioner is a callable ``z = M(r)`` whose action is linear and
symmetric, as required for CG.  The AMG preconditioner applies a single
V(1,1) cycle of a smoothed-aggregation hierarchy with symmetric
Gauss-Seidel smoothing, built once per matrix.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.sparse.linalg import splu, spsolve_triangular

__all__ = [
    "AmgError",
    "SolverConfig",
    "SolveReport",
    "cg_solve",
    "ILU0Preconditioner",
    "ilu0_factor",
    "BlockDiagPreconditioner",
    "blockdiag_prec",
    "AmgLevel",
    "AmgHierarchy",
    "amg_build",
    "amg_vcycle",
    "AmgPreconditioner",
]


class AmgError(RuntimeError):
    """Raised when hierarchy construction stagnates or is inconsistent."""


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-9
    maxiter: int = 20000

    def __post_init__(self):
        if self.tol <= 0 or self.maxiter <= 0:
            raise ValueError("tol and maxiter must be positive")


@dataclass
class SolveReport:
    iterations: int
    final_rel_residual: float
    wall_time: float
    residual_history: list
    converged: bool
    breakdown: bool = False
    breakdown_iteration: int | None = None


def cg_solve(A, b, config: SolverConfig | None = None, M=None, callback=None):
    """Preconditioned conjugate gradients on a symmetric system.

    Convergence is declared on the true relative residual: once the recursive
    residual passes the tolerance it is verified against b - A x and iteration
    continues (with a residual replacement) if round-off drift left the true
    residual above it.  Nonpositive curvature stops the iteration with the
    breakdown flag set, signalling indefiniteness or nullspace contamination.
    """
    config = config or SolverConfig()
    t0 = time.perf_counter()
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    norm_b = np.linalg.norm(b)
    if norm_b == 0.0:
        return np.zeros(n), SolveReport(0, 0.0, time.perf_counter() - t0, [], True)

    x = np.zeros(n)
    r = b.copy()
    z = M(r) if M is not None else r.copy()
    p = z.copy()
    rz = float(r @ z)
    history: list[float] = []
    it = 0
    while it < config.maxiter:
        it += 1
        Ap = A @ p
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            rel = float(np.linalg.norm(b - A @ x) / norm_b)
            return x, SolveReport(
                it, rel, time.perf_counter() - t0, history, False,
                breakdown=True, breakdown_iteration=it,
            )
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        rel = float(np.linalg.norm(r) / norm_b)
        history.append(rel)
        if callback is not None:
            callback(x)
        if rel <= config.tol:
            true_r = b - A @ x
            true_rel = float(np.linalg.norm(true_r) / norm_b)
            if true_rel <= config.tol:
                return x, SolveReport(
                    it, true_rel, time.perf_counter() - t0, history, True
                )
            r = true_r  # replace drifted recursive residual and keep going
            z = M(r) if M is not None else r.copy()
            p = z.copy()
            rz = float(r @ z)
            continue
        z = M(r) if M is not None else r.copy()
        rz_next = float(r @ z)
        p = z + (rz_next / rz) * p
        rz = rz_next
    rel = float(np.linalg.norm(b - A @ x) / norm_b)
    return x, SolveReport(it, rel, time.perf_counter() - t0, history, rel <= config.tol)


# ---------------------------------------------------------------------------
# ILU(0)


@dataclass
class ILU0Preconditioner:
    """Zero fill-in incomplete LU; application is two triangular sweeps."""

    lower: sp.csr_matrix  # unit lower triangular
    upper: sp.csr_matrix
    shift: float = 0.0  # diagonal shift applied on pivot breakdown

    def __call__(self, r: np.ndarray) -> np.ndarray:
        y = spsolve_triangular(self.lower, r, lower=True, unit_diagonal=True)
        return spsolve_triangular(self.upper, y, lower=False)


def _ilu0_sweep(A: sp.csr_matrix) -> tuple[np.ndarray, float]:
    """In-place IKJ elimination on a CSR copy; returns (data, min |pivot|)."""
    indptr, indices, data = A.indptr, A.indices, A.data
    n = A.shape[0]
    diag_pos = np.empty(n, dtype=np.int64)
    for i in range(n):
        row = indices[indptr[i] : indptr[i + 1]]
        k = np.searchsorted(row, i)
        if k >= len(row) or row[k] != i:
            raise ValueError(f"matrix lacks a stored diagonal entry in row {i}")
        diag_pos[i] = indptr[i] + k
    min_piv = np.inf
    for i in range(n):
        s, e = indptr[i], indptr[i + 1]
        row_map = {c: s + j for j, c in enumerate(indices[s:e])}
        for jj in range(s, e):
            k = indices[jj]
            if k >= i:
                break
            piv = data[diag_pos[k]]
            lik = data[jj] / piv
            data[jj] = lik
            for pp in range(diag_pos[k] + 1, indptr[k + 1]):
                t = row_map.get(indices[pp])
                if t is not None:
                    data[t] -= lik * data[pp]
        min_piv = min(min_piv, abs(data[diag_pos[i]]))
    return data, min_piv


def ilu0_factor(A, max_shift_tries: int = 6) -> ILU0Preconditioner:
    """ILU(0): L and U inherit the sparsity pattern of A, row by row.

    On a (near-)zero pivot the factorization restarts from A plus a small
    diagonal shift, escalating until the pivots are safe; the shift actually
    used is recorded on the returned preconditioner.
    """
    A = sp.csr_matrix(A).copy()
    A.sort_indices()
    scale = float(np.abs(A.data).max()) if A.nnz else 1.0
    piv_tol = 1e-12 * scale
    shift = 0.0
    for attempt in range(max_shift_tries):
        work = A.copy() if shift == 0.0 else (A + shift * sp.eye(A.shape[0], format="csr")).tocsr()
        work.sort_indices()
        _, min_piv = _ilu0_sweep(work)
        if np.isfinite(min_piv) and min_piv > piv_tol:
            lower = sp.tril(work, -1, format="csr") + sp.eye(work.shape[0], format="csr")
            upper = sp.triu(work, format="csr")
            return ILU0Preconditioner(lower.tocsr(), upper.tocsr(), shift)
        shift = 1e-8 * scale if shift == 0.0 else shift * 100.0
    raise RuntimeError("ILU(0) pivot breakdown persists after diagonal shifts")


# ---------------------------------------------------------------------------
# Exact block-diagonal preconditioner


@dataclass
class BlockDiagPreconditioner:
    """Exact solve of tau * (A_i + eps * Mtilde_i) per subdomain block."""

    matrix: sp.csr_matrix
    eps: float
    _lu: object = field(repr=False, default=None)

    def __call__(self, r: np.ndarray) -> np.ndarray:
        return self._lu.solve(r)


def blockdiag_prec(operators, config=None, eps: float | None = None) -> BlockDiagPreconditioner:
    """Block-diagonal preconditioner from bulk stiffness plus scaled bulk mass.

    The bulk mass is the full-rank regularization of each Neumann stiffness
    block; the assembled block-diagonal matrix is SPD for any positive eps
    and factorized once.
    """
    config = config if config is not None else operators.config
    eps = float(config.epsilon if eps is None else eps)
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    dofmap = operators.dofmap
    starts = dofmap.block_start
    rows, cols, vals = [], [], []
    for i in range(dofmap.n_subdomains):
        blk = (operators.stiffness[i] + eps * operators.bulk_mass[i]).tocoo()
        rows.append(blk.row + starts[i])
        cols.append(blk.col + starts[i])
        vals.append(config.tau * blk.data)
    n = dofmap.n
    P = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    ).tocsr()
    try:
        lu = splu(P.tocsc())
    except RuntimeError as exc:
        raise RuntimeError(f"block preconditioner factorization failed: {exc}") from exc
    return BlockDiagPreconditioner(P, eps, lu)


# ---------------------------------------------------------------------------
# Smoothed aggregation AMG, applied as a single V(1,1) cycle


@dataclass
class AmgLevel:
    matrix: sp.csr_matrix
    lower: sp.csr_matrix  # tril(A), for the forward Gauss-Seidel sweep
    upper: sp.csr_matrix  # triu(A), for the backward sweep
    prolong: sp.csr_matrix  # maps the next-coarser level into this one


@dataclass
class AmgHierarchy:
    levels: list  # fine-to-coarse AmgLevel entries
    coarse_lu: object
    sizes: list  # matrix sizes, finest first, coarsest last
    theta: float
    omega: float


def _strength_graph(A: sp.csr_matrix, theta: float) -> sp.csr_matrix:
    d = A.diagonal()
    coo = A.tocoo()
    off = coo.row != coo.col
    r, c, v = coo.row[off], coo.col[off], coo.data[off]
    dd = d[r] * d[c]
    strong = (dd > 0) & (np.abs(v) >= theta * np.sqrt(np.maximum(dd, 0)))
    S = sp.coo_matrix(
        (np.abs(v[strong]), (r[strong], c[strong])), shape=A.shape
    ).tocsr()
    S.sort_indices()
    return S


def _aggregate(S: sp.csr_matrix) -> tuple[np.ndarray, int]:
    """Greedy aggregation over the strength graph, deterministic in row order."""
    n = S.shape[0]
    agg = np.full(n, -1, dtype=np.int64)
    indptr, indices, data = S.indptr, S.indices, S.data
    next_id = 0
    for i in range(n):
        if agg[i] != -1:
            continue
        nbrs = indices[indptr[i] : indptr[i + 1]]
        if len(nbrs) == 0 or np.all(agg[nbrs] == -1):
            agg[i] = next_id
            agg[nbrs] = next_id
            next_id += 1
    for i in range(n):
        if agg[i] != -1:
            continue
        nbrs = indices[indptr[i] : indptr[i + 1]]
        vals = data[indptr[i] : indptr[i + 1]]
        assigned = agg[nbrs] != -1
        if np.any(assigned):
            cand = nbrs[assigned]
            strength = vals[assigned]
            agg[i] = agg[cand[np.argmax(strength)]]
        else:
            agg[i] = next_id
            next_id += 1
    return agg, next_id


def amg_build(
    A,
    target_coarse: int = 200,
    theta: float = 0.08,
    omega: float = 2.0 / 3.0,
    max_levels: int = 25,
) -> AmgHierarchy:
    """Build a smoothed-aggregation hierarchy down to a small dense coarse grid.

    Tentative prolongators are piecewise constant over greedy strength-based
    aggregates, smoothed by one damped-Jacobi step; coarse operators are the
    Galerkin triple products.  Coarsening that shrinks a level by less than
    10 percent aborts with diagnostics.
    """
    A = sp.csr_matrix(A)
    A.sort_indices()
    levels: list[AmgLevel] = []
    sizes = [A.shape[0]]
    while A.shape[0] > target_coarse and len(levels) < max_levels:
        S = _strength_graph(A, theta)
        agg, n_agg = _aggregate(S)
        if n_agg >= 0.9 * A.shape[0]:
            raise AmgError(
                "aggregation stagnated: "
                f"{A.shape[0]} -> {n_agg} aggregates (sizes so far {sizes})"
            )
        n = A.shape[0]
        P_t = sp.coo_matrix(
            (np.ones(n), (np.arange(n), agg)), shape=(n, n_agg)
        ).tocsr()
        d = A.diagonal()
        if np.any(d <= 0):
            raise AmgError("matrix has a nonpositive diagonal entry")
        D_inv = sp.diags(1.0 / d)
        P = (P_t - omega * (D_inv @ (A @ P_t))).tocsr()
        A_c = (P.T @ A @ P).tocsr()
        A_c.sort_indices()
        levels.append(
            AmgLevel(
                matrix=A,
                lower=sp.tril(A, format="csr"),
                upper=sp.triu(A, format="csr"),
                prolong=P,
            )
        )
        A = A_c
        sizes.append(A.shape[0])
    coarse_lu = la.lu_factor(A.toarray())
    return AmgHierarchy(levels=levels, coarse_lu=coarse_lu, sizes=sizes, theta=theta, omega=omega)


def _vcycle(h: AmgHierarchy, k: int, r: np.ndarray) -> np.ndarray:
    if k == len(h.levels):
        return la.lu_solve(h.coarse_lu, r)
    lvl = h.levels[k]
    # pre-smooth from zero initial guess: one forward Gauss-Seidel sweep
    x = spsolve_triangular(lvl.lower, r, lower=True)
    resid = r - lvl.matrix @ x
    x = x + lvl.prolong @ _vcycle(h, k + 1, lvl.prolong.T @ resid)
    # post-smooth: one backward sweep, the adjoint of the pre-smoother
    return x + spsolve_triangular(lvl.upper, r - lvl.matrix @ x, lower=False)


def amg_vcycle(h: AmgHierarchy, r: np.ndarray) -> np.ndarray:
    """One V(1,1) cycle with symmetric Gauss-Seidel smoothing."""
    return _vcycle(h, 0, np.asarray(r, dtype=float))


@dataclass
class AmgPreconditioner:
    """One V-cycle per application, optionally through a congruence basis.

    With a basis Q the action is Q V(Q^T r) for a hierarchy built on Q^T A Q,
    which stays symmetric positive definite for any nonsingular Q.
    """

    hierarchy: AmgHierarchy
    basis: object = None

    def __call__(self, r: np.ndarray) -> np.ndarray:
        if self.basis is None:
            return amg_vcycle(self.hierarchy, r)
        return self.basis @ amg_vcycle(self.hierarchy, self.basis.T @ r)

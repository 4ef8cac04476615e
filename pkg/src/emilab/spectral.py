"""Symbol machinery: Toeplitz construction, Weyl distribution checks.

A symbol here is a real trigonometric polynomial on the d-torus given by its
finitely many Fourier coefficients; the associated d-level Toeplitz matrix
carries coefficient f_{k-l} at multi-index (k, l).  Spectral distribution of
a symmetric matrix sequence against a symbol (or a piecewise combination of
symbols weighted by relative block sizes) is quantified two ways: the mean
gap between sorted eigenvalues and sorted symbol samples after quantile
resampling, and the Weyl averages of a fixed battery of smooth compactly
supported test functions against the corresponding symbol integrals.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

__all__ = [
    "SpectralError",
    "LanczosError",
    "SymbolFunction",
    "CombinedSymbol",
    "DistributionReport",
    "p1_laplacian_symbol",
    "laplacian_1d_symbol",
    "constant_symbol",
    "toeplitz_from_symbol",
    "eig_rearranged",
    "lanczos_eigenvalues",
    "combined_symbol",
    "combined_symbol_for_blocks",
    "distribution_distance",
]


class SpectralError(ValueError):
    """Raised for invalid symbols or non-symmetric inputs."""


class LanczosError(RuntimeError):
    """Raised when the Lanczos sweep fails its residual verification."""


@dataclass(frozen=True)
class SymbolFunction:
    """Real trigonometric polynomial on [-pi, pi]^dim.

    ``coeffs`` maps integer offset tuples to Fourier coefficients; a real
    symmetric symbol has f_{-k} = f_k.  Symbols created from a plain
    evaluator carry no coefficients and cannot generate Toeplitz matrices.
    """

    dim: int
    coeffs: Mapping | None
    evaluator: Callable | None = None

    def __post_init__(self):
        if self.coeffs is None and self.evaluator is None:
            raise SpectralError("symbol needs coefficients or an evaluator")
        if self.coeffs is not None:
            for k in self.coeffs:
                if len(k) != self.dim:
                    raise SpectralError(f"coefficient index {k} has wrong arity")

    @property
    def bandwidth(self) -> int | None:
        if self.coeffs is None:
            return None
        return max((max(abs(i) for i in k) for k in self.coeffs), default=0)

    def coefficient(self, k: tuple) -> float:
        if self.coeffs is None:
            raise SpectralError("symbol has no Fourier coefficients")
        return float(self.coeffs.get(tuple(k), 0.0))

    def is_hermitian(self, tol: float = 1e-14) -> bool:
        if self.coeffs is None:
            return False
        return all(
            abs(v - self.coeffs.get(tuple(-i for i in k), 0.0)) <= tol
            for k, v in self.coeffs.items()
        )

    def __call__(self, theta: np.ndarray) -> np.ndarray:
        """Evaluate on points of shape (..., dim) (or (...,) when dim == 1)."""
        theta = np.asarray(theta, dtype=float)
        if self.dim == 1 and (theta.ndim == 0 or theta.shape[-1] != 1):
            theta = theta[..., None]
        if self.evaluator is not None:
            return self.evaluator(theta)
        out = np.zeros(theta.shape[:-1])
        for k, v in self.coeffs.items():
            phase = np.tensordot(theta, np.asarray(k, dtype=float), axes=([-1], [0]))
            out = out + v * np.cos(phase)  # real symmetric part; sine terms cancel
        return out

    def sample(self, points_per_axis: int) -> np.ndarray:
        """Values on the uniform midpoint grid of [-pi, pi]^dim, flattened."""
        axis = -np.pi + (np.arange(points_per_axis) + 0.5) * 2 * np.pi / points_per_axis
        grids = np.meshgrid(*([axis] * self.dim), indexing="ij")
        theta = np.stack(grids, axis=-1)
        return self(theta).ravel()

    def range_estimate(self, points_per_axis: int = 256) -> tuple[float, float]:
        vals = self.sample(points_per_axis)
        return float(vals.min()), float(vals.max())


def p1_laplacian_symbol() -> SymbolFunction:
    """Symbol of the interior stencil of the structured P1 stiffness matrix."""
    return SymbolFunction(
        dim=2,
        coeffs={(0, 0): 4.0, (1, 0): -1.0, (-1, 0): -1.0, (0, 1): -1.0, (0, -1): -1.0},
    )


def laplacian_1d_symbol() -> SymbolFunction:
    return SymbolFunction(dim=1, coeffs={(0,): 2.0, (1,): -1.0, (-1,): -1.0})


def constant_symbol(value: float, dim: int = 1) -> SymbolFunction:
    return SymbolFunction(dim=dim, coeffs={(0,) * dim: float(value)})


def toeplitz_from_symbol(symbol: SymbolFunction, nu) -> np.ndarray:
    """Dense d-level Toeplitz matrix with entries f_{k-l} from the symbol.

    ``nu`` is the per-level size (an int for one level).  Rows and columns
    are ordered with the first index outermost, so for nu = (2, 3) the matrix
    consists of a 2x2 Toeplitz arrangement of 3x3 Toeplitz blocks.
    """
    if symbol.coeffs is None:
        raise SpectralError("cannot build a Toeplitz matrix without a finite bandwidth")
    nu = (int(nu),) if np.isscalar(nu) else tuple(int(m) for m in nu)
    if len(nu) != symbol.dim:
        raise SpectralError(f"size multi-index {nu} does not match arity {symbol.dim}")
    if any(m < 1 for m in nu):
        raise SpectralError("each level size must be at least 1")
    total = int(np.prod(nu))
    out = np.zeros((total, total))
    for k, v in symbol.coeffs.items():
        if any(abs(ki) >= m for ki, m in zip(k, nu)):
            continue
        shift = np.ones((1, 1))
        for ki, m in zip(k, nu):
            shift = np.kron(shift, np.eye(m, k=-ki))
        out += v * shift
    return out


def _check_symmetric_dense(M: np.ndarray, tol: float = 1e-10):
    scale = max(np.abs(M).max(), 1.0)
    if np.abs(M - M.T).max() > tol * scale:
        raise SpectralError("matrix is not symmetric")


def lanczos_eigenvalues(
    A,
    n_steps: int | None = None,
    rng_seed: int = 7,
    residual_samples: int = 10,
    residual_tol: float = 1e-8,
) -> np.ndarray:
    """Full spectrum via Lanczos with full reorthogonalization.

    Runs n steps (a complete tridiagonalization) with a deterministic start
    vector; breakdown restarts the basis from the next coordinate direction.
    A sample of Ritz pairs is verified against the matrix before returning.
    """
    n = A.shape[0]
    m = n if n_steps is None else min(n_steps, n)
    rng = np.random.default_rng(rng_seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    V = np.zeros((n, m))
    alpha = np.zeros(m)
    beta = np.zeros(max(m - 1, 0))
    V[:, 0] = v
    for j in range(m):
        w = A @ V[:, j]
        alpha[j] = V[:, j] @ w
        w -= alpha[j] * V[:, j]
        if j > 0:
            w -= beta[j - 1] * V[:, j - 1]
        # full reorthogonalization keeps the basis numerically orthonormal
        w -= V[:, : j + 1] @ (V[:, : j + 1].T @ w)
        w -= V[:, : j + 1] @ (V[:, : j + 1].T @ w)
        if j == m - 1:
            break
        nw = np.linalg.norm(w)
        if nw <= 1e-13 * max(abs(alpha[j]), 1.0):
            # invariant subspace found: restart orthogonal to the basis
            fresh = None
            for basis_try in range(n):
                cand = np.zeros(n)
                cand[basis_try] = 1.0
                cand -= V[:, : j + 1] @ (V[:, : j + 1].T @ cand)
                if np.linalg.norm(cand) > 1e-8:
                    fresh = cand / np.linalg.norm(cand)
                    break
            if fresh is None:
                raise LanczosError("could not restart after breakdown")
            V[:, j + 1] = fresh
            beta[j] = 0.0
        else:
            V[:, j + 1] = w / nw
            beta[j] = nw
    if m < n:
        raise LanczosError("partial sweeps cannot produce the full spectrum")
    eigvals, eigvecs = la.eigh_tridiagonal(alpha, beta)
    norm_a = np.abs(eigvals).max() if m else 0.0
    idx = np.linspace(0, m - 1, min(residual_samples, m)).astype(int)
    for i in idx:
        vec = V @ eigvecs[:, i]
        res = np.linalg.norm(A @ vec - eigvals[i] * vec)
        if res > residual_tol * max(norm_a, 1e-300):
            raise LanczosError(
                f"Ritz residual {res:.2e} exceeds {residual_tol:.0e} * |A|"
            )
    return np.sort(eigvals)


def eig_rearranged(M, dense_threshold: int = 6000) -> np.ndarray:
    """Nondecreasing spectrum of a symmetric matrix.

    Dense solves up to the threshold, afterwards a fully reorthogonalized
    Lanczos sweep; a sample of eigenpairs is residual-checked either way.
    """
    if sp.issparse(M):
        scale = np.abs(M).max() if M.nnz else 1.0
        asym = abs(M - M.T).max() if M.nnz else 0.0
        if asym > 1e-10 * max(scale, 1.0):
            raise SpectralError("matrix is not symmetric")
        n = M.shape[0]
        if n <= dense_threshold:
            dense = M.toarray()
            return _dense_checked_spectrum(dense)
        return lanczos_eigenvalues(M.tocsr())
    M = np.asarray(M, dtype=float)
    _check_symmetric_dense(M)
    if M.shape[0] <= dense_threshold:
        return _dense_checked_spectrum(M)
    return lanczos_eigenvalues(M)


def _dense_checked_spectrum(M: np.ndarray, residual_samples: int = 10) -> np.ndarray:
    vals, vecs = la.eigh(M)
    n = len(vals)
    norm_a = np.abs(vals).max() if n else 0.0
    idx = np.linspace(0, n - 1, min(residual_samples, n)).astype(int)
    for i in idx:
        res = np.linalg.norm(M @ vecs[:, i] - vals[i] * vecs[:, i])
        if res > 1e-8 * max(norm_a, 1e-300):
            raise SpectralError(f"eigenpair residual {res:.2e} too large")
    return vals


@dataclass(frozen=True)
class CombinedSymbol:
    """Piecewise symbol: piece i is active for x in [breaks[i], breaks[i+1]].

    The weights are the relative block sizes and must sum to one; sampling
    draws from each piece proportionally to its weight.
    """

    pieces: tuple  # ((SymbolFunction, weight), ...)
    breaks: np.ndarray

    def __call__(self, x: float, theta: np.ndarray) -> np.ndarray:
        i = int(np.searchsorted(self.breaks[1:-1], x, side="right"))
        return self.pieces[i][0](theta)

    def sample(self, total_points: int) -> np.ndarray:
        weights = np.array([w for _, w in self.pieces])
        counts = np.floor(weights * total_points).astype(int)
        # distribute the rounding remainder deterministically, largest first
        remainder = total_points - counts.sum()
        frac_order = np.argsort(-(weights * total_points - counts), kind="stable")
        counts[frac_order[:remainder]] += 1
        chunks = []
        for (f, _), m in zip(self.pieces, counts):
            if m == 0:
                continue
            per_axis = max(int(np.ceil(m ** (1.0 / f.dim))), 1)
            vals = f.sample(per_axis)
            chunks.append(np.sort(vals)[np.linspace(0, len(vals) - 1, m).astype(int)])
        return np.sort(np.concatenate(chunks))

    def range_estimate(self) -> tuple[float, float]:
        lows, highs = zip(*(f.range_estimate() for f, _ in self.pieces))
        return min(lows), max(highs)


def combined_symbol(pieces) -> CombinedSymbol:
    """Combine per-block symbols with their relative dimension weights."""
    pieces = tuple(pieces)
    if not pieces:
        raise SpectralError("no symbol pieces given")
    weights = np.array([w for _, w in pieces], dtype=float)
    if np.any(weights <= 0):
        raise SpectralError("all weights must be positive")
    if abs(weights.sum() - 1.0) > 1e-12:
        raise SpectralError(f"weights must sum to 1, got {weights.sum()}")
    breaks = np.concatenate([[0.0], np.cumsum(weights)])
    breaks[-1] = 1.0
    return CombinedSymbol(pieces=pieces, breaks=breaks)


def combined_symbol_for_blocks(dofmap, symbols) -> CombinedSymbol:
    """Per-block symbols weighted by each block's share of the global dofs."""
    weights = dofmap.block_sizes / dofmap.n
    if len(symbols) != len(weights):
        raise SpectralError("need one symbol per subdomain block")
    return combined_symbol(list(zip(symbols, weights)))


@dataclass
class DistributionReport:
    """Comparison of a sorted spectrum against symbol samples."""

    sorted_eigs: np.ndarray
    symbol_quantiles: np.ndarray
    quantile_distance: float
    test_function_gaps: list  # (name, |matrix average - symbol integral|)
    outlier_count: int
    delta: float
    matrix_size: int

    def summary(self) -> dict:
        return {
            "matrix_size": self.matrix_size,
            "quantile_distance": self.quantile_distance,
            "outlier_count": self.outlier_count,
            "delta": self.delta,
            "test_function_gaps": {name: gap for name, gap in self.test_function_gaps},
        }


def _resample_sorted(values: np.ndarray, m: int) -> np.ndarray:
    """m midpoint quantiles of an already sorted sample."""
    q = (np.arange(m) + 0.5) / m
    return np.quantile(values, q, method="linear")


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _test_battery(fmax: float):
    """Polynomials under a C1 cutoff plus three smooth bumps.

    The cutoff plateau covers [-0.5, 1.05*fmax] and the support ends at
    1.25*fmax, so the battery sees the whole symbol range while staying
    compactly supported.
    """
    span = max(fmax, 1e-8)
    lo0, lo1 = -1.0, -0.5
    hi0, hi1 = 1.05 * span, 1.25 * span

    def cutoff(t):
        return _smoothstep((t - lo0) / (lo1 - lo0)) * _smoothstep((hi1 - t) / (hi1 - hi0))

    battery = []
    for k in range(5):
        battery.append((f"poly{k}", lambda t, k=k: (t ** k) * cutoff(t)))

    def bump(t, c, w):
        u = (t - c) / w
        out = np.zeros_like(t)
        inside = np.abs(u) < 1.0
        out[inside] = np.exp(1.0 - 1.0 / (1.0 - u[inside] ** 2))
        return out

    for frac in (0.25, 0.5, 0.75):
        battery.append(
            (f"bump{frac}", lambda t, c=frac * span, w=0.25 * span: bump(t, c, w))
        )
    return battery


def _symbol_integral_average(symbol, func, points_per_axis: int) -> float:
    """(1 / mu(D)) * integral of func(symbol) by tensor Gauss-Legendre."""
    if isinstance(symbol, CombinedSymbol):
        return sum(
            w * _symbol_integral_average(f, func, points_per_axis)
            for f, w in symbol.pieces
        )
    nodes, weights = np.polynomial.legendre.leggauss(points_per_axis)
    nodes = nodes * np.pi  # [-1, 1] -> [-pi, pi]; weights absorb into the mean
    grids = np.meshgrid(*([nodes] * symbol.dim), indexing="ij")
    theta = np.stack(grids, axis=-1)
    vals = func(symbol(theta))
    wgt = np.ones(())
    for _ in range(symbol.dim):
        wgt = np.multiply.outer(wgt, weights)
    return float((vals * wgt).sum() / 2.0 ** symbol.dim)


def distribution_distance(
    eigs: np.ndarray,
    symbol,
    samples_per_axis: int = 128,
    quantile_length: int | None = None,
    delta: float = 0.1,
    quad_points: int = 64,
) -> DistributionReport:
    """Quantile distance and Weyl test-function gaps between spectrum and symbol.

    Both sides are reduced to equal-length midpoint quantile vectors; the
    outlier count tallies eigenvalues outside the symbol range widened by
    delta on both ends.
    """
    eigs = np.sort(np.asarray(eigs, dtype=float))
    if isinstance(symbol, CombinedSymbol):
        sym_vals = symbol.sample(max(samples_per_axis ** 2, 4096))
        lo, hi = symbol.range_estimate()
    else:
        sym_vals = np.sort(symbol.sample(samples_per_axis))
        lo, hi = symbol.range_estimate()
    m = quantile_length or min(1024, len(eigs))
    eig_q = _resample_sorted(eigs, m)
    sym_q = _resample_sorted(sym_vals, m)
    distance = float(np.abs(eig_q - sym_q).mean())

    battery = _test_battery(hi)
    gaps = []
    for name, func in battery:
        matrix_avg = float(func(eigs).mean())
        symbol_avg = _symbol_integral_average(symbol, func, quad_points)
        gaps.append((name, abs(matrix_avg - symbol_avg)))

    outliers = int(np.count_nonzero((eigs < lo - delta) | (eigs > hi + delta)))
    return DistributionReport(
        sorted_eigs=eigs,
        symbol_quantiles=sym_q,
        quantile_distance=distance,
        test_function_gaps=gaps,
        outlier_count=outliers,
        delta=delta,
        matrix_size=len(eigs),
    )

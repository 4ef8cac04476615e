"""File exchange: Matrix Market, plain vectors, mesh text dumps, CSV rows."""

from __future__ import annotations

import io as _io
from pathlib import Path

import numpy as np
import scipy.io as sio
import scipy.sparse as sp

from .meshgen import StructuredMesh, SubdomainLabeling

__all__ = [
    "write_matrix_market",
    "read_matrix_market",
    "write_vector",
    "read_vector",
    "export_mesh_text",
    "CSV_HEADER",
    "format_result_row",
]

CSV_HEADER = "model,N,nh,tau,eps,solver,iterations,relres,seconds,n,n0,nGamma"


def write_matrix_market(matrix, path, symmetric: bool = True) -> None:
    """Coordinate-format export; symmetric matrices store the lower triangle.

    Rectangular inputs (coupling blocks) always use the general format.
    """
    matrix = sp.coo_matrix(matrix)
    symmetry = "symmetric" if symmetric and matrix.shape[0] == matrix.shape[1] else "general"
    sio.mmwrite(str(path), matrix, field="real", symmetry=symmetry)


def read_matrix_market(path) -> sp.csr_matrix:
    return sp.csr_matrix(sio.mmread(str(path)))


def write_vector(path, vec: np.ndarray) -> None:
    np.savetxt(str(path), np.asarray(vec, dtype=float), fmt="%.17g")


def read_vector(path) -> np.ndarray:
    return np.loadtxt(str(path), dtype=float).reshape(-1)


def export_mesh_text(mesh: StructuredMesh, labeling: SubdomainLabeling, path) -> None:
    """Plain-text dump: one `x y` line per vertex, then one
    `v0 v1 v2 subdomain` line per triangle."""
    buf = _io.StringIO()
    buf.write(f"{mesh.n_vertices} {mesh.n_triangles}\n")
    for x, y in mesh.vertices:
        buf.write(f"{x:.17g} {y:.17g}\n")
    for (a, b, c), lab in zip(mesh.triangles, labeling.cell_of):
        buf.write(f"{a} {b} {c} {lab}\n")
    Path(path).write_text(buf.getvalue())


def format_result_row(
    model: str,
    n_cells: int,
    nh: int,
    tau: float,
    eps: float,
    solver: str,
    iterations: int,
    relres: float,
    seconds: float,
    n: int,
    n0: int,
    n_gamma: int,
) -> str:
    return (
        f"{model},{n_cells},{nh},{tau:.10g},{eps:.10g},{solver},"
        f"{iterations},{relres:.6e},{seconds:.3f},{n},{n0},{n_gamma}"
    )

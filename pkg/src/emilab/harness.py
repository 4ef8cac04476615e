"""Experiment driver: solver tables, spectral verification suite, CSV output.

Each table run follows the same pipeline: build the mesh and partition,
assemble operators, pin the nullspace, then time one solve per requested
solver.  Rows carry the dof bookkeeping next to the iteration counts so a
table is self-describing; failed runs are recorded in-row with -1 iterations
and the run continues.  Reruns of the same spec are byte-identical except
for the wall-time column.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from . import io as eio
from .fem import OperatorSet, ProblemConfig, assemble_operators
from .meshgen import (
    DofMap,
    GeometryError,
    StructuredMesh,
    SubdomainLabeling,
    build_dofmap,
    build_mesh,
    label_model_a,
    label_model_b,
    model_a_scale,
)
from .solvers import (
    AmgPreconditioner,
    SolverConfig,
    amg_build,
    blockdiag_prec,
    cg_solve,
    ilu0_factor,
)
from .spectral import (
    constant_symbol,
    distribution_distance,
    eig_rearranged,
    p1_laplacian_symbol,
    toeplitz_from_symbol,
)
from .system import (
    BlockSystem,
    build_scaled,
    build_system,
    interface_basis,
    pin_nullspace,
)

__all__ = [
    "ConfigError",
    "ExperimentSpec",
    "SOLVER_NAMES",
    "parse_config",
    "build_case",
    "solve_case",
    "run_table_refinement",
    "run_table_tau",
    "run_table_cells",
    "run_spectral_suite",
]

SOLVER_NAMES = ("cg", "ilu", "blockdiag", "amg", "geometry")


class ConfigError(ValueError):
    """Raised for malformed experiment specifications."""


@dataclass(frozen=True)
class ExperimentSpec:
    model: str = "A"
    nh_list: tuple = (64,)
    cells_list: tuple = (1,)
    tau_list: tuple = (0.01,)
    solvers: tuple = ("cg",)
    eps: float = 1e-4
    tol: float = 1e-9
    maxiter: int = 20000
    deterministic: bool = True  # provenance flag; every run is seed-free anyway
    outdir: str | None = None

    def __post_init__(self):
        if self.model not in ("A", "B"):
            raise ConfigError(f"unknown model {self.model!r}")
        for solver in self.solvers:
            if solver not in SOLVER_NAMES:
                raise ConfigError(f"unknown solver {solver!r}")
        if any(t <= 0 for t in self.tau_list):
            raise ConfigError("all tau values must be positive")
        if self.eps <= 0 or self.tol <= 0 or self.maxiter <= 0:
            raise ConfigError("eps, tol, maxiter must be positive")
        for nh in self.nh_list:
            for n_cells in self.cells_list:
                check_compatible(self.model, int(nh), int(n_cells))


def check_compatible(model: str, nh: int, n_cells: int) -> None:
    """Validate an (nh, N) pair without building the mesh."""
    if nh < 4 or (nh & (nh - 1)) != 0:
        raise GeometryError(f"nh must be a power of two >= 4, got {nh}")
    if n_cells == 0:
        return
    if model == "A":
        scale = model_a_scale(n_cells)
        if nh % scale != 0:
            raise GeometryError(f"model A: scale {scale} does not divide nh={nh}")
    else:
        root = int(round(np.sqrt(n_cells)))
        if root * root != n_cells:
            raise GeometryError(f"model B: N={n_cells} is not a perfect square")
        if nh % 8 != 0 or (3 * nh // 4) % root != 0:
            raise GeometryError(f"model B: N={n_cells} incompatible with nh={nh}")


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in ("nh", "cells"):
        return tuple(int(v) for v in raw.split(","))
    if key == "tau":
        return tuple(float(v) for v in raw.split(","))
    if key == "solvers":
        return tuple(v.strip() for v in raw.split(","))
    if key in ("eps", "tol"):
        return float(raw)
    if key == "maxiter":
        return int(raw)
    if key == "deterministic":
        return raw.lower() in ("1", "true", "yes")
    return raw


def parse_config(path) -> ExperimentSpec:
    """Flat key=value config; lists are comma separated, e.g. nh=8,16,32."""
    mapping = {
        "model": "model",
        "nh": "nh_list",
        "cells": "cells_list",
        "tau": "tau_list",
        "solvers": "solvers",
        "eps": "eps",
        "tol": "tol",
        "maxiter": "maxiter",
        "deterministic": "deterministic",
        "outdir": "outdir",
    }
    kwargs = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key not in mapping:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        kwargs[mapping[key]] = _parse_value(key, raw)
    try:
        return ExperimentSpec(**kwargs)
    except (GeometryError, ConfigError) as exc:
        raise ConfigError(str(exc)) from exc


@dataclass
class Case:
    """One assembled and pinned problem instance."""

    mesh: StructuredMesh
    labeling: SubdomainLabeling
    dofmap: DofMap
    operators: OperatorSet
    system: BlockSystem  # pinned
    unpinned: BlockSystem


def build_case(model: str, nh: int, n_cells: int, tau: float, eps: float = 1e-4) -> Case:
    mesh = build_mesh(nh)
    labeling = label_model_a(mesh, n_cells) if model == "A" else label_model_b(mesh, n_cells)
    dofmap = build_dofmap(mesh, labeling)
    config = ProblemConfig(tau=tau, epsilon=eps)
    operators = assemble_operators(mesh, labeling, dofmap, config)
    unpinned = build_system(operators)
    pinned = pin_nullspace(unpinned, mesh=mesh)
    return Case(mesh, labeling, dofmap, operators, pinned, unpinned)


def _membrane_mass_dominates(case: Case, factor: float = 10.0) -> bool:
    """True when the membrane mass dwarfs the scaled stiffness on the diagonal.

    In that regime, point relaxation in nodal variables cannot see the
    curvature of trace-continuous modes, so the multilevel preconditioner is
    built in the interface average/difference basis instead.
    """
    dofmap = case.dofmap
    cfg = case.operators.config
    mass, stiff = [], []
    for i in range(dofmap.n_subdomains):
        s, e = dofmap.block_range(i)
        mem = dofmap.is_membrane[s:e]
        if not mem.any():
            continue
        mass.append(case.operators.membrane_mass[i].diagonal()[mem])
        stiff.append(cfg.tau_i(i) * case.operators.stiffness[i].diagonal()[mem])
    if not mass:
        return False
    return float(np.median(np.concatenate(mass))) >= factor * float(
        np.median(np.concatenate(stiff))
    )


def _build_preconditioner(case: Case, solver: str, eps: float):
    if solver == "cg":
        return None
    if solver == "ilu":
        return ilu0_factor(case.system.matrix)
    if solver == "blockdiag":
        return blockdiag_prec(case.operators, eps=eps)
    if solver == "amg":
        if _membrane_mass_dominates(case):
            basis = interface_basis(case.dofmap)
            transformed = (basis.T @ case.system.matrix @ basis).tocsr()
            return AmgPreconditioner(amg_build(transformed), basis=basis)
        return AmgPreconditioner(amg_build(case.system.matrix))
    raise ConfigError(f"unknown solver {solver!r}")


def solve_case(case: Case, solver: str, tol: float, maxiter: int, eps: float):
    """Run one solver on a pinned case; returns (report, seconds)."""
    t0 = time.perf_counter()
    M = _build_preconditioner(case, solver, eps)
    cfg = SolverConfig(tol=tol, maxiter=maxiter)
    _, report = cg_solve(case.system.matrix, case.system.rhs, cfg, M=M)
    return report, time.perf_counter() - t0


def _result_row(spec, case: Case, nh, n_cells, tau, solver) -> str:
    dofmap = case.dofmap
    if solver == "geometry":
        return eio.format_result_row(
            spec.model, n_cells, nh, tau, spec.eps, solver,
            0, 0.0, 0.0, dofmap.n, dofmap.n0, dofmap.n_gamma,
        )
    try:
        report, seconds = solve_case(case, solver, spec.tol, spec.maxiter, spec.eps)
        iterations = report.iterations if report.converged else -1
        relres = report.final_rel_residual
    except Exception:
        iterations, relres, seconds = -1, float("nan"), 0.0
    return eio.format_result_row(
        spec.model, n_cells, nh, tau, spec.eps, solver,
        iterations, relres, seconds, dofmap.n, dofmap.n0, dofmap.n_gamma,
    )


def _write_rows(rows: list, spec: ExperimentSpec, name: str) -> list:
    if spec.outdir:
        outdir = Path(spec.outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / name).write_text("\n".join(rows) + "\n")
    return rows


def run_table_refinement(spec: ExperimentSpec) -> list:
    """One row per (solver, nh) at fixed cell count (the first in the list)."""
    rows = [eio.CSV_HEADER]
    n_cells = int(spec.cells_list[0])
    tau = float(spec.tau_list[0])
    for nh in spec.nh_list:
        case = build_case(spec.model, int(nh), n_cells, tau, spec.eps)
        for solver in spec.solvers:
            rows.append(_result_row(spec, case, int(nh), n_cells, tau, solver))
    return _write_rows(rows, spec, "table_refinement.csv")


def run_table_tau(spec: ExperimentSpec) -> list:
    """One row per (solver, tau) at fixed nh and cell count; model A only."""
    if spec.model != "A":
        raise ConfigError("the time-step table is defined for model A")
    rows = [eio.CSV_HEADER]
    nh = int(spec.nh_list[0])
    n_cells = int(spec.cells_list[0])
    for tau in spec.tau_list:
        case = build_case(spec.model, nh, n_cells, float(tau), spec.eps)
        for solver in spec.solvers:
            rows.append(_result_row(spec, case, nh, n_cells, float(tau), solver))
    return _write_rows(rows, spec, "table_tau.csv")


def run_table_cells(spec: ExperimentSpec) -> list:
    """One row per (solver, N) at fixed nh; use solver 'geometry' for dof-only rows."""
    rows = [eio.CSV_HEADER]
    nh = int(spec.nh_list[0])
    tau = float(spec.tau_list[0])
    for n_cells in spec.cells_list:
        if spec.solvers == ("geometry",):
            # dof bookkeeping only: skip assembly entirely
            mesh = build_mesh(nh)
            labeling = (
                label_model_a(mesh, int(n_cells))
                if spec.model == "A"
                else label_model_b(mesh, int(n_cells))
            )
            dofmap = build_dofmap(mesh, labeling)
            rows.append(
                eio.format_result_row(
                    spec.model, int(n_cells), nh, tau, spec.eps, "geometry",
                    0, 0.0, 0.0, dofmap.n, dofmap.n0, dofmap.n_gamma,
                )
            )
            continue
        case = build_case(spec.model, nh, int(n_cells), tau, spec.eps)
        for solver in spec.solvers:
            rows.append(_result_row(spec, case, nh, int(n_cells), tau, solver))
    return _write_rows(rows, spec, "table_cells.csv")


def run_spectral_suite(spec: ExperimentSpec, samples_per_axis: int = 128) -> dict:
    """Distribution reports over the nh list for the first cell count.

    Emits, per size: the scaled-matrix comparison against the stiffness
    symbol, the off-diagonal zero-distribution statistics, the spectrum of
    the block-preconditioned matrix against the constant symbol, and a
    Toeplitz comparison of matching size.
    """
    n_cells = int(spec.cells_list[0])
    tau = float(spec.tau_list[0])
    symbol = p1_laplacian_symbol()
    results = {"scaled": [], "offdiag_zero": [], "preconditioned": [], "szego": []}

    def record(kind, nh, compute):
        # eigensolve failures are recorded in place of the report
        try:
            results[kind].append((nh, compute()))
        except Exception as exc:
            results[kind].append((nh, {"error": f"{type(exc).__name__}: {exc}"}))

    for nh in spec.nh_list:
        nh = int(nh)
        case = build_case(spec.model, nh, n_cells, tau, spec.eps)
        system = case.unpinned
        n = system.n

        record(
            "scaled", nh,
            lambda: distribution_distance(
                eig_rearranged(build_scaled(system).matrix), symbol, samples_per_axis
            ),
        )

        def offdiag_stats():
            offdiag = system.matrix - _block_diagonal_part(system)
            delta = 1e-10 * float(np.abs(system.matrix).sum(axis=1).max())
            off_eigs = eig_rearranged(offdiag)
            frac = float(np.count_nonzero(np.abs(off_eigs) > delta)) / n
            bound = 2.0 * case.dofmap.n_gamma / n
            return {"fraction_above": frac, "bound": bound, "delta": delta, "n": n}

        record("offdiag_zero", nh, offdiag_stats)

        def preconditioned_report():
            prec = blockdiag_prec(case.operators, eps=spec.eps)
            gen_eigs = la.eigh(
                system.matrix.toarray(), prec.matrix.toarray(), eigvals_only=True
            )
            return distribution_distance(np.sort(gen_eigs), constant_symbol(1.0), delta=0.1)

        record("preconditioned", nh, preconditioned_report)

        record(
            "szego", nh,
            lambda: distribution_distance(
                eig_rearranged(toeplitz_from_symbol(symbol, (nh, nh))),
                symbol, samples_per_axis,
            ),
        )

    if spec.outdir:
        outdir = Path(spec.outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        summary = {}
        for kind, entries in results.items():
            summary[kind] = []
            for nh, rep in entries:
                if isinstance(rep, dict):
                    summary[kind].append({"nh": nh, **rep})
                else:
                    summary[kind].append({"nh": nh, **rep.summary()})
                    lines = ["eigenvalue_quantile,symbol_quantile"]
                    m = len(rep.symbol_quantiles)
                    eq = np.quantile(
                        rep.sorted_eigs, (np.arange(m) + 0.5) / m, method="linear"
                    )
                    lines += [f"{a:.12e},{b:.12e}" for a, b in zip(eq, rep.symbol_quantiles)]
                    (outdir / f"spectra_{kind}_nh{nh}.csv").write_text("\n".join(lines) + "\n")
        (outdir / "spectra_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return results


def _block_diagonal_part(system: BlockSystem):
    rows, cols, vals = [], [], []
    for start, length in system.block_ranges:
        blk = system.matrix[start : start + length, start : start + length].tocoo()
        rows.append(blk.row + start)
        cols.append(blk.col + start)
        vals.append(blk.data)
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=system.matrix.shape,
    ).tocsr()

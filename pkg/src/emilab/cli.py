"""Command line front end.

Subcommands: mesh, assemble, solve, spectra, table.  Exit codes: 0 success,
2 configuration/geometry error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import io as eio
from .harness import (
    ConfigError,
    ExperimentSpec,
    build_case,
    parse_config,
    run_spectral_suite,
    run_table_cells,
    run_table_refinement,
    run_table_tau,
    solve_case,
)
from .meshgen import GeometryError, build_dofmap, build_mesh, label_model_a, label_model_b
from .solvers import SolverConfig, cg_solve
from .spectral import LanczosError, SpectralError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3


def _int_list(raw: str):
    return tuple(int(v) for v in raw.split(","))


def _float_list(raw: str):
    return tuple(float(v) for v in raw.split(","))


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--model", choices=("A", "B"), default="A")
    p.add_argument("--nh", type=_int_list, default=(64,), help="comma separated sizes")
    p.add_argument("--cells", type=_int_list, default=(1,), help="comma separated cell counts")
    p.add_argument("--tau", type=_float_list, default=(0.01,))
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--maxiter", type=int, default=20000)
    p.add_argument("--config", help="flat key=value config file; overrides flags")
    p.add_argument("--csv", help="write result rows to this path")
    p.add_argument("--outdir", help="directory for suite outputs")


def _spec_from_args(args, solvers=None) -> ExperimentSpec:
    if args.config:
        return parse_config(args.config)
    return ExperimentSpec(
        model=args.model,
        nh_list=args.nh,
        cells_list=args.cells,
        tau_list=args.tau,
        solvers=solvers if solvers is not None else ("cg",),
        eps=args.eps,
        tol=args.tol,
        maxiter=args.maxiter,
        outdir=args.outdir,
    )


def _cmd_mesh(args) -> int:
    mesh = build_mesh(args.nh[0])
    n_cells = args.cells[0]
    labeling = label_model_a(mesh, n_cells) if args.model == "A" else label_model_b(mesh, n_cells)
    dofmap = build_dofmap(mesh, labeling)
    print(
        f"model {args.model} nh={mesh.nh} N={n_cells}: "
        f"n={dofmap.n} n0={dofmap.n0} n_in={dofmap.n_in} nGamma={dofmap.n_gamma} "
        f"(nGamma/n = {dofmap.n_gamma / dofmap.n:.3f})"
    )
    if args.out:
        eio.export_mesh_text(mesh, labeling, args.out)
        print(f"wrote mesh to {args.out}")
    return EXIT_OK


def _cmd_assemble(args) -> int:
    case = build_case(args.model, args.nh[0], args.cells[0], args.tau[0], args.eps)
    A = case.system.matrix
    asym = abs(A - A.T).max() if A.nnz else 0.0
    print(f"assembled n={A.shape[0]} nnz={A.nnz} |A - A^T|_max = {asym:.3e} (pinned)")
    if args.export_mm:
        eio.write_matrix_market(A, args.export_mm)
        eio.write_vector(str(args.export_mm) + ".rhs.txt", case.system.rhs)
        print(f"wrote {args.export_mm} and {args.export_mm}.rhs.txt")
    return EXIT_OK


def _cmd_solve(args) -> int:
    if args.import_mm:
        A = eio.read_matrix_market(args.import_mm)
        rhs = (
            eio.read_vector(args.import_rhs)
            if args.import_rhs
            else np.ones(A.shape[0])
        )
        cfg = SolverConfig(tol=args.tol, maxiter=args.maxiter)
        if args.solver != "cg":
            print("imported systems are solved with plain cg", file=sys.stderr)
        _, report = cg_solve(A, rhs, cfg)
        seconds = report.wall_time
        dof_info = (A.shape[0], 0, 0)
        n_cells, nh, tau = 0, 0, args.tau[0]
    else:
        case = build_case(args.model, args.nh[0], args.cells[0], args.tau[0], args.eps)
        report, seconds = solve_case(case, args.solver, args.tol, args.maxiter, args.eps)
        dof_info = (case.dofmap.n, case.dofmap.n0, case.dofmap.n_gamma)
        n_cells, nh, tau = args.cells[0], args.nh[0], args.tau[0]
        if args.export_mm:
            eio.write_matrix_market(case.system.matrix, args.export_mm)
            eio.write_vector(str(args.export_mm) + ".rhs.txt", case.system.rhs)
    status = "converged" if report.converged else "FAILED"
    print(
        f"{args.solver}: {report.iterations} iterations, "
        f"relres {report.final_rel_residual:.3e}, {seconds:.3f}s [{status}]"
    )
    if args.csv:
        row = eio.format_result_row(
            args.model, n_cells, nh, tau, args.eps, args.solver,
            report.iterations if report.converged else -1,
            report.final_rel_residual, seconds, *dof_info,
        )
        with open(args.csv, "a") as fh:
            fh.write(eio.CSV_HEADER + "\n" if fh.tell() == 0 else "")
            fh.write(row + "\n")
    return EXIT_OK if report.converged else EXIT_SOLVER


def _cmd_spectra(args) -> int:
    spec = _spec_from_args(args)
    results = run_spectral_suite(spec)
    for kind, entries in results.items():
        for nh, rep in entries:
            if isinstance(rep, dict) and "error" in rep:
                print(f"{kind} nh={nh}: failed ({rep['error']})")
            elif isinstance(rep, dict):
                print(
                    f"{kind} nh={nh}: fraction {rep['fraction_above']:.4f} "
                    f"<= bound {rep['bound']:.4f}"
                )
            else:
                print(
                    f"{kind} nh={nh}: quantile distance {rep.quantile_distance:.4f}, "
                    f"outliers {rep.outlier_count}"
                )
    return EXIT_OK


def _cmd_table(args) -> int:
    solvers = tuple(args.solver.split(",")) if args.solver else ("cg",)
    spec = _spec_from_args(args, solvers=solvers)
    runner = {
        "refinement": run_table_refinement,
        "tau": run_table_tau,
        "cells": run_table_cells,
    }[args.kind]
    rows = runner(spec)
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("\n".join(rows) + "\n")
    else:
        print("\n".join(rows))
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="emilab",
        description="Assemble, solve, and spectrally analyze cell-by-cell systems",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_mesh = sub.add_parser("mesh", help="build a mesh and report dof counts")
    _add_common(p_mesh)
    p_mesh.add_argument("--out", help="write a plain-text node/element file")

    p_asm = sub.add_parser("assemble", help="assemble the pinned global system")
    _add_common(p_asm)
    p_asm.add_argument("--export-mm", help="Matrix Market output path")

    p_solve = sub.add_parser("solve", help="assemble and solve one system")
    _add_common(p_solve)
    p_solve.add_argument("--solver", default="cg", choices=("cg", "ilu", "blockdiag", "amg"))
    p_solve.add_argument("--export-mm", help="Matrix Market output path")
    p_solve.add_argument("--import-mm", help="solve an imported Matrix Market system")
    p_solve.add_argument("--import-rhs", help="plain vector file for the imported system")

    p_spec = sub.add_parser("spectra", help="run the spectral verification suite")
    _add_common(p_spec)

    p_table = sub.add_parser("table", help="reproduce an iteration table")
    _add_common(p_table)
    p_table.add_argument("--kind", choices=("refinement", "tau", "cells"), default="refinement")
    p_table.add_argument("--solver", help="comma separated solver list")

    args = parser.parse_args(argv)
    handlers = {
        "mesh": _cmd_mesh,
        "assemble": _cmd_assemble,
        "solve": _cmd_solve,
        "spectra": _cmd_spectra,
        "table": _cmd_table,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, GeometryError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LanczosError, SpectralError, RuntimeError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())

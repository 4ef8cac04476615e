"""emilab: assembly, solvers, and spectral verification for cell-by-cell systems."""

from .fem import ProblemConfig, assemble_operators
from .harness import ExperimentSpec, build_case
from .meshgen import build_dofmap, build_mesh, label_model_a, label_model_b
from .solvers import SolverConfig, cg_solve
from .system import build_system, pin_nullspace

__version__ = "0.1.0"

__all__ = [
    "ProblemConfig",
    "assemble_operators",
    "ExperimentSpec",
    "build_case",
    "build_dofmap",
    "build_mesh",
    "label_model_a",
    "label_model_b",
    "SolverConfig",
    "cg_solve",
    "build_system",
    "pin_nullspace",
    "__version__",
]

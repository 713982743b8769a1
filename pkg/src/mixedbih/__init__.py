"""Mixed finite elements and monolithic multigrid for fourth-order problems.

Solves ``Delta^2 u - c0 Delta u + c1 u = f`` in the three-field form
(u, v = grad u, alpha) with u in DG(k) and v, alpha in RT(k+1) on
triangular meshes of the unit square and the L-shaped domain.
"""

from .assembly import BlockSystem, InadmissibleSpec, ProblemSpec, assemble_auxiliary, assemble_system
from .harness import ManufacturedCase, StudyConfig, compute_errors, convergence_study, make_case, mg_benchmark
from .mesh import Mesh2D, build_mesh, label_boundary, refine_uniform, star_patches
from .solver import MGHierarchy, SolveReport, build_hierarchy, direct_solve, fgmres, mg_solve

__version__ = "0.1.0"

__all__ = [
    "BlockSystem",
    "InadmissibleSpec",
    "ManufacturedCase",
    "MGHierarchy",
    "Mesh2D",
    "ProblemSpec",
    "SolveReport",
    "StudyConfig",
    "assemble_auxiliary",
    "assemble_system",
    "build_hierarchy",
    "build_mesh",
    "compute_errors",
    "convergence_study",
    "direct_solve",
    "fgmres",
    "label_boundary",
    "make_case",
    "mg_benchmark",
    "mg_solve",
    "refine_uniform",
    "star_patches",
]

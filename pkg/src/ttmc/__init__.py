"""Tensor-train steady-state solvers for Kronecker-structured Markov chains.

Three methods are provided: AMEn (:func:`ttmc.amen.amen_solve`), tensorized
multigrid with a direct coarsest-grid solve, and multigrid with an AMEn
coarsest-grid solve (both :func:`ttmc.multigrid.multigrid_solve`).
"""

from .amen import AmenConfig, amen_solve
from .models import KINDS, KroneckerModel, ModelSpec, build_model, validate_model
from .multigrid import MGConfig, build_hierarchy, multigrid_solve
from .numkit import dense_stationary
from .report import SolveReport
from .tt import TTOperator, TTTensor, TruncationPolicy, kron_to_tt_operator

__version__ = "0.1.0"

__all__ = [
    "AmenConfig",
    "amen_solve",
    "KINDS",
    "KroneckerModel",
    "ModelSpec",
    "build_model",
    "validate_model",
    "MGConfig",
    "build_hierarchy",
    "multigrid_solve",
    "dense_stationary",
    "SolveReport",
    "TTOperator",
    "TTTensor",
    "TruncationPolicy",
    "kron_to_tt_operator",
]

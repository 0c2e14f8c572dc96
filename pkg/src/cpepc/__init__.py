"""CP tensor decomposition with error-preserving correction and bounded-norm solvers."""
from __future__ import annotations

from .tensor import (
    DenseTensor,
    KruskalModel,
    ShapeError,
    balance,
    fold,
    gram_full,
    gram_skip,
    khatri_rao,
    khatri_rao_skip,
    mttkrp,
    normalize,
    reconstruct,
    relative_error,
    residual_norm,
    unfold,
)
from .scqp import (
    BoundedRegression,
    InfeasibleBoundError,
    ScqpProblem,
    reduce_identical,
    solve_ball,
    solve_bounded_regression,
    solve_matrix_sphere,
    solve_sphere,
)
from .calculus import (
    DampingTooSmall,
    ParamLayout,
    StructuredHessian,
    c_value,
    f_value,
    grad_c,
    grad_f,
    hess_c,
    hess_f,
    hessian,
    lagrangian_hessian,
    perm_matrix_RR,
    solve_kkt_system,
)
from .cpd import RunTrace, SolverOptions, TraceRecord, als, flm, init_identity_ones, random_init
from .epc import LONG_SCHEDULE, EpcConfig, InfeasibleStartError, acep, acep_mode_update, cpd_epc, scep
from .bounded import BoundConfig, bals, bals_mode_update, bsqp

__version__ = "0.1.0"

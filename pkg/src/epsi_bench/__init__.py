"""Nystrom-preconditioned inverse-iteration eigensolvers and a benchmark harness.

The top eigenpair solver is :func:`epsi_solve`; :func:`lazy_epsi_solve`
computes the top ``k`` eigenpairs.  Both take a :class:`NystromApprox` built
by :func:`nystrom_approximate`.  Classical baselines live in
:mod:`epsi_bench.baselines` and the ``epsi-bench`` CLI in
:mod:`epsi_bench.harness`.
"""
from .baselines import (
    BaselineMethod,
    davidson_method,
    inexact_rqi,
    power_iteration,
    subspace_iteration,
)
from .epsi import (
    BreakdownError,
    EpsiState,
    SolveOptions,
    WoodburyError,
    epsi_solve,
    epsi_step,
    rayleigh_quotient,
    woodbury_apply,
)
from .harness import ExperimentConfig, run_experiment
from .lazy_epsi import (
    LazyOptions,
    SubspaceState,
    deflated_epsi_update,
    lazy_epsi_solve,
    orthogonalization_step,
)
from .matrix_core import (
    DenseOperator,
    DimensionError,
    GramOperator,
    MatrixMarketError,
    ReferenceDecomposition,
    SparseOperator,
    SpectrumSpec,
    SymmetricOperator,
    dense_reference,
    gen_low_rank_noise,
    gen_synthetic,
    load_matrix_market,
    write_matrix_market,
)
from .sketch import (
    DistortionEstimate,
    NystromApprox,
    NystromError,
    apply_shift,
    estimate_distortion,
    load_nystrom,
    nystrom_approximate,
    save_nystrom,
)
from .trace import ConvergenceTrace, compute_metrics

__version__ = "0.1.0"

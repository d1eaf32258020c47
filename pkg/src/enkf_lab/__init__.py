"""Ensemble Kalman filtering with inflation and spectral projection.

Library layout:

* :mod:`enkf_lab.linalg` PSD kernels (gains, Loewner ratios, projections)
* :mod:`enkf_lab.models` coefficient streams and the turbulence testbed
* :mod:`enkf_lab.reference` exact/augmented Kalman benchmarks
* :mod:`enkf_lab.effective_dim` low-effective-dimension verifier
* :mod:`enkf_lab.enkf` the filter itself
* :mod:`enkf_lab.diagnostics` monitored sequences and experiments
* :mod:`enkf_lab.cli` the ``enkf-lab`` command
"""

__version__ = "0.1.0"

from .effective_dim import (
    DimReport,
    minimal_p_search,
    verify_dim_general,
    verify_dim_observed,
    verify_dim_unfiltered,
)
from .enkf import Ensemble, EnkfConfig, EnkfFilter, StepRecord, enkf_assimilate, enkf_forecast, enkf_step
from .linalg import (
    DimensionMismatch,
    KalmanGainContext,
    NotPositiveDefinite,
    SingularInnerSolve,
    SpectralDecomp,
    condition_number,
    gain_apply_woodbury,
    kalman_gain,
    kalman_update_operator,
    loewner_ratio,
    mahalanobis_sq,
    make_gain_context,
    positive_part,
    symmetrize,
    top_p_projection,
)
from .models import (
    CoefficientStream,
    InvalidChain,
    InvalidParams,
    JumpSpec,
    StepCoefficients,
    TruthTrajectory,
    TurbulenceParams,
    build_turbulence,
    markov_jump_step,
    simulate_truth,
)
from .reference import (
    AugmentedRiccatiState,
    DivergentMode,
    KalmanState,
    NoConvergence,
    augmented_riccati_step,
    instability_covariance,
    kalman_step,
    observability_gramian,
    stationary_riccati_ambient,
    stationary_riccati_diag,
    unfiltered_covariance,
    unfiltered_mode_values,
)
from .diagnostics import (
    ConcentrationTrial,
    FilterDiagnostics,
    compute_lambda_mu,
    compute_nu,
    run_accuracy_experiment,
    run_concentration_experiment,
    run_filter_experiment,
    run_stability_experiment,
    write_csv,
    write_json,
)

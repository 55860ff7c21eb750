"""Polynomial trajectory representations with empirically fitted noise and priors.

The package is organized by pipeline stage:

``basis``
    Monomial and Bernstein bases, design matrices and basis changes.
``trajdata``
    Corpus I/O, windowing, RTS smoothing, outlier rejection and local frames.
``noisemodel``
    Ego and range/bearing agent observation-noise covariances.
``regress``
    Closed-form Bayesian posterior, error metrics and a scikit-learn regressor.
``ebayes``
    Type-II maximum likelihood of noise and prior, and degree selection.
``synth``
    Synthetic corpora with known ground truth.
"""

from ._validation import NumericalError, ParameterError
from .basis import BasisSpec, basis_change, basis_matrix, design_matrix, evaluate
from .ebayes import (
    DegreeSelector,
    EmpiricalBayesTrajectoryModel,
    HyperParams,
    ModelScore,
    OptimizationError,
    OptimizerConfig,
    fit_hyperparams,
    log_marginal,
    scan_degrees,
    score,
)
from .noisemodel import AgentNoiseParams, EgoNoiseParams, SampleGeometry, agent_cov_world, ego_cov
from .regress import BayesianTrajectoryRegressor, ErrorReport, PriorParams, ade, posterior, solve_from_kinematics
from .synth import SynthConfig, generate
from .trajdata import (
    OutlierReport,
    SmootherConfig,
    TrackedTrajectory,
    classify_outliers,
    export,
    ingest,
    prepare_for_fit,
    rts_smooth,
    window,
)

__version__ = "0.1.0"

__all__ = [
    "AgentNoiseParams",
    "BasisSpec",
    "BayesianTrajectoryRegressor",
    "DegreeSelector",
    "EgoNoiseParams",
    "EmpiricalBayesTrajectoryModel",
    "ErrorReport",
    "HyperParams",
    "ModelScore",
    "NumericalError",
    "OptimizationError",
    "OptimizerConfig",
    "OutlierReport",
    "ParameterError",
    "PriorParams",
    "SampleGeometry",
    "SmootherConfig",
    "SynthConfig",
    "TrackedTrajectory",
    "ade",
    "agent_cov_world",
    "basis_change",
    "basis_matrix",
    "classify_outliers",
    "design_matrix",
    "ego_cov",
    "evaluate",
    "export",
    "fit_hyperparams",
    "generate",
    "ingest",
    "log_marginal",
    "posterior",
    "prepare_for_fit",
    "rts_smooth",
    "scan_degrees",
    "score",
    "solve_from_kinematics",
    "window",
]

"""Kriging-based global optimization with generalized observations.

A Gaussian-field surrogate conditioned on linear-operator measurements
(values, derivatives, smoothed responses, latent components) drives an
iterative optimization loop through a relative expected-improvement
criterion that separates where one measures from where one wants the
estimate to improve.
"""

from .acquisition import (
    AcquisitionSpec,
    AcquisitionVariant,
    GaussianMinProblem,
    PsiEstimate,
    RobustMode,
    build_batch_spec,
    build_fidelity_specs,
    build_gradient_spec,
    build_noisy_spec,
    build_robust_spec,
    gaussian_min_bounds,
    gaussian_min_exact_1d,
    gaussian_min_mc,
    reduce_rei,
    rei,
)
from .errors import (
    ConfigError,
    DomainMismatch,
    EvaluatorFailure,
    KrigoptError,
    NonPSD,
    NoValueMeasurements,
    SingularEta,
    SingularGram,
    UnsupportedOperatorPair,
)
from .evaluator import BuiltinEvaluator, EvaluatorRequest, EvaluatorResponse, ExternalEvaluator
from .field import (
    FitResult,
    FminContext,
    FminMethod,
    Measurement,
    PosteriorField,
    condition,
    find_fmin,
    fit_hyperparameters,
)
from .kernel import (
    Component,
    ComponentSpec,
    Convolution,
    CurvaturePenalty,
    Domain,
    GeneralizedPoint,
    Identity,
    KernelSpec,
    OperatorSum,
    PartialDerivative,
    kernel_eval,
    prior_mean,
)
from .optimizer import (
    AcquisitionMode,
    Box,
    EgoConfig,
    InnerOptConfig,
    RunResult,
    inner_minimize,
    latin_hypercube,
    regional_lower_bound,
    run_ego,
)
from .problems import get_problem

__version__ = "0.1.0"

"""Streaming gradient and Hessian samplers for importance-sampled SGD.

Rows arrive once; after the stream ends, an iterate ``x`` can be queried for
noisy per-row gradients drawn roughly in proportion to their norms.
"""
from ._backend import BACKEND
from .errors import (
    ContractViolation,
    EstimationFailure,
    FreshnessExhausted,
    InputError,
    StepFailed,
    UndefinedDistribution,
)
from .estimator import MassEstimate, estimate_mass
from .gsampler import BoostedSampler, GSampler, SampleOutcome, SamplerBank, SamplerConfig, sample_boosted, sample_once
from .hessian import HessianEngine, build_hessian_engine, hessian_run, hsample, newton
from .measures import Kind, MeasureSpec, gradient, sampling_gradient, smoothness_alpha
from .oracle import ExactInstance, exact_importance_distribution, exact_level_sets, exact_variances
from .sensitivity import SensitivityTracker, exact_sensitivity
from .sgd import SGDConfig, SGDEngine, SGDTrajectory, build_engine, run_baseline
from .sketch import BucketTable, CoordinateMedianSketch

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "BoostedSampler",
    "BucketTable",
    "ContractViolation",
    "CoordinateMedianSketch",
    "EstimationFailure",
    "ExactInstance",
    "FreshnessExhausted",
    "GSampler",
    "HessianEngine",
    "InputError",
    "Kind",
    "MassEstimate",
    "MeasureSpec",
    "SGDConfig",
    "SGDEngine",
    "SGDTrajectory",
    "SampleOutcome",
    "SamplerBank",
    "SamplerConfig",
    "SensitivityTracker",
    "StepFailed",
    "UndefinedDistribution",
    "build_engine",
    "build_hessian_engine",
    "estimate_mass",
    "exact_importance_distribution",
    "exact_level_sets",
    "exact_sensitivity",
    "exact_variances",
    "gradient",
    "hessian_run",
    "hsample",
    "newton",
    "run_baseline",
    "sample_boosted",
    "sample_once",
    "sampling_gradient",
    "smoothness_alpha",
]

"""Population-adjusted indirect comparisons: simulation and estimation toolkit."""

from .model import (AggregateData, ArmSummary, CovariateSet, EstimateRecord, EstimatorSpec,
                    MomentVector, TrialIPD, ValidationError)
from .estimators import run_estimator
from .inference import BootstrapPlan, summarize_trial

__all__ = ["AggregateData", "ArmSummary", "CovariateSet", "EstimateRecord", "EstimatorSpec",
           "MomentVector", "TrialIPD", "ValidationError", "run_estimator", "BootstrapPlan",
           "summarize_trial"]
__version__ = "0.1.0"

"""Treatment effects for groups defined by a post-treatment auxiliary outcome.

Estimators (conventional regression, expected-auxiliary stratification,
structural nested mean models fitted by G-estimation, principal
stratification by EM, censored-outcome G-estimation), a ground-truth oracle
for synthetic worlds and a Monte Carlo harness.
"""

from .data import (
    STRATA,
    CompleteDataset,
    Dataset,
    Event,
    Stratum,
    SurvivalDataset,
    load_complete_csv,
    load_observed_csv,
    load_survival_csv,
)
from .errors import (
    DataError,
    EstimationError,
    InestimableError,
    InestimableWeightError,
    RankDeficientError,
    SeparationError,
)

__version__ = "0.1.0"

__all__ = [
    "STRATA",
    "CompleteDataset",
    "Dataset",
    "Event",
    "Stratum",
    "SurvivalDataset",
    "load_complete_csv",
    "load_observed_csv",
    "load_survival_csv",
    "DataError",
    "EstimationError",
    "InestimableError",
    "InestimableWeightError",
    "RankDeficientError",
    "SeparationError",
]

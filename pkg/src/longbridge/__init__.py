"""Long-term treatment effect estimation from combined experimental and
observational samples, using outcome and selection bridge functions fit by
the generalized method of moments."""

from longbridge.data import (
    CombinedSample,
    FoldAssignment,
    ObservationRow,
    ValidationReport,
    load_csv,
    make_rng,
    save_csv,
    split_folds,
    validate,
)

__all__ = [
    "CombinedSample",
    "FoldAssignment",
    "ObservationRow",
    "ValidationReport",
    "load_csv",
    "make_rng",
    "save_csv",
    "split_folds",
    "validate",
]

__version__ = "0.1.0"

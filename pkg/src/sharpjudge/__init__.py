"""Sharp specification test for judge-leniency instrumental variable designs."""

from .dataset import Dataset, ingest_csv, normalize_outcome
from .grid import build_grid
from .propensity import fit_frequency, fit_mle, fit_propensity
from .sharp import SharpConfig, TestResult, run_sharp_test

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "SharpConfig",
    "TestResult",
    "build_grid",
    "fit_frequency",
    "fit_mle",
    "fit_propensity",
    "ingest_csv",
    "normalize_outcome",
    "run_sharp_test",
]

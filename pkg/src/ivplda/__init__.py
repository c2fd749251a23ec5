"""i-vector/PLDA speaker verification: acoustic front-end, GMM-UBM, total
variability, i-vector normalisation and dataset-shift compensation, PLDA
scoring, fusion and evaluation, plus synthetic corpora for testing."""

from ._accel import backend_name
from .errors import ConfigError, DataError, IvpldaError, NumericalError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "IvpldaError", "NumericalError", "backend_name", "__version__"]

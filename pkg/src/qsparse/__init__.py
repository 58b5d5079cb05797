"""Compressed, error-compensated local SGD with quantization and sparsification."""
from .errors import (
    ConfigError, DataError, FormatError, ParameterError, QsparseError, UnsupportedError,
)
from .kernels import BACKEND
from .objectives import Dataset, NonConvexLogistic, Quadratic, Softmax
from .operators import (
    Composed, Identity, Piecewise, Qsgd, RandK, RotatedLevels, Sign, SignComp,
    StochasticLevels, TopK, apply_operator, compress,
)
from .engine import RunConfig, RunResult, run, run_async, run_sync
from .schedule import SyncSchedule, make_periodic, make_random_async

__version__ = "0.1.0"

"""Physics-informed autoregressive solver for 1D time-dependent PDEs."""

import os

# The per-step matrix products are small; BLAS thread start-up costs more
# than it saves on them, so default to a single thread unless told otherwise.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from .model import BACKBONES, DivergenceError, PianoModel  # noqa: E402
from .problems import PROBLEMS, Grid, get_problem  # noqa: E402
from .training import TrainConfig, train  # noqa: E402

__all__ = ["BACKBONES", "DivergenceError", "Grid", "PROBLEMS", "PianoModel", "TrainConfig",
           "get_problem", "train"]
__version__ = "0.1.0"

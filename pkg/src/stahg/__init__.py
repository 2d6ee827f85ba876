"""Traffic-flow forecasting on road graphs with sampled neighbor attention.

The package is organized bottom-up:

* ``diffcore``: float64 tensors with taped reverse-mode differentiation
* ``data``: graph/flow loaders, feature engineering, sliding windows
* ``model``: recurrent encoders + hybrid graph attention + coarse
  temporal-graph refinement + MLP forecast head
* ``train``: smooth-L1 objective, Adam, fit/evaluate/grid-search
* ``synth``: deterministic synthetic road networks, flows and baselines
* ``cli``: the ``stahg`` command (synth / train / eval / gradcheck /
  export-attention)
"""

from .diffcore import Tape, Tensor, backward, finite_diff_check
from .train import TrainingConfig

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "finite_diff_check",
    "TrainingConfig",
    "__version__",
]

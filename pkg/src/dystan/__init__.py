"""Joint sedentary-activity / social-context recognition from IMU windows.

Subpackages: autodiff (tensor core), nn (layers + Adam), dsp (signal
conditioning), data (ingestion, splits, synthetic generator), model (the
network and its variants), training (loss + CV driver), metrics, cli.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, no_grad  # noqa: F401
from .data import LabeledWindow, RawRecording, SplitPlan, SynthConfig  # noqa: F401
from .metrics import FoldReport  # noqa: F401
from .model import DystanConfig, TaskOutputs, build_variant  # noqa: F401
from .training import TrainConfig, run_cv, train_fold  # noqa: F401

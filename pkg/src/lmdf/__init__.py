"""Long-term multi-granularity deep framework for driver drowsiness detection.

The pipeline: 51 facial landmarks anchor 15 multi-granularity patches,
parallel convolutional paths plus a fusion layer turn each frame into a
single representation (MCNN), and a 3-layer LSTM head predicts a
per-frame drowsy/normal label over the streaming sequence.
"""

from .errors import (CheckpointError, DataValidationError, LMDFError,
                     ShapeError, TrackParseError, TrainingError)
from .gradcheck import finite_diff_check
from .lstm import LSTMState, TemporalHead, cell_step, predict, stack_step, tbptt_train
from .mcnn import MCNNModel, mcnn_backward, mcnn_forward
from .optim import adam_step
from .patches import (FacialShape, PatchSet, anchor_points, build_patch_set,
                      crop_resize, perturb_landmarks, sample_unaligned)
from .tensor import ParamTensor

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "DataValidationError", "LMDFError", "ShapeError",
    "TrackParseError", "TrainingError",
    "finite_diff_check",
    "LSTMState", "TemporalHead", "cell_step", "predict", "stack_step", "tbptt_train",
    "MCNNModel", "mcnn_backward", "mcnn_forward",
    "adam_step",
    "FacialShape", "PatchSet", "anchor_points", "build_patch_set",
    "crop_resize", "perturb_landmarks", "sample_unaligned",
    "ParamTensor",
]

"""3D dense-block lesion segmentation on a self-contained autodiff engine."""

from .data import (FoldSplit, Manifest, PhantomConfig, Sample, ScanRecord,
                   generate_dataset, generate_phantom, load_manifest, load_samples,
                   save_manifest, split_folds, split_train_val, standardize)
from .errors import (ConfigError, DegenerateVolumeError, FormatError,
                     GenerationError, GraphError, LabelError, LengthError,
                     NumericError, RatlesnetError, ShapeError, StateError,
                     UnsupportedError)
from .metrics import (CrossvalResult, DiceResult, EvalReport, GeneralizationResult,
                      aggregate, crossval, dice, generalization_eval)
from .model import (Model, ModelConfig, build_model, forward, from_bytes,
                    load_checkpoint, param_count, predict_mask, save_checkpoint,
                    to_bytes)
from .nifti import Mask, NiftiHeader, Volume, read_nifti, write_nifti
from .ops import (ConvParams, PoolContext, concat_channels, conv3d, maxpool3d,
                  relu, softmax_cross_entropy, unpool3d)
from .tensor import (Graph, Tensor, add, backward, grad_check, mul, tensor_new,
                     tensor_sum)
from .training import (AdamState, TrainConfig, TrainPolicy, TrainResult,
                       adam_step, train, write_epoch_log)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]

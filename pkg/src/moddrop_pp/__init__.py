"""Missing-modality robust segmentation: modality dropout, a dynamic filter-scaling
head and intra-subject co-training, on a small numpy autograd engine."""

from .backbone import BackboneConfig, SegmentationModel, parameter_census
from .data import MultiModalSample, SynthConfig, generate_dataset, kde_normalize, load_dataset, save_dataset
from .dynamic import DynamicConvLayer, DynamicHead, ModalityCode, dynamic_forward, scaling_param_count
from .errors import (
    ConfigError,
    DegenerateError,
    DomainError,
    FormatError,
    InvalidCodeError,
    ModDropError,
    NumericsError,
    ShapeError,
)
from .losses import LossConfig, combined_objective, focal_loss, ssim
from .metrics import MetricsReport, overall_score
from .moddrop import DropoutPolicy, apply_dropout, enumerate_configs, sample_config
from .tensor import Tensor, backward, grad_check
from .trainer import Checkpoint, TrainConfig, Trainer, run_training

__version__ = "0.1.0"

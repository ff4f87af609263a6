"""Progressive refinement necks and an ESSamp downsampler on a NumPy autodiff core."""

from .analyzer import ModelStats, count_macs, count_params, stats, sweep
from .detector import (
    ArchConfig,
    BoxLabel,
    Detection,
    Model,
    assign_targets,
    build_model,
    decode_predictions,
    detection_loss,
    forward,
    tiny_config,
)
from .errors import (
    ConfigError,
    ContractViolation,
    InvalidArgument,
    InvalidState,
    NonFiniteError,
    PRNetError,
    TensorFileError,
)
from .essamp import ESSampConfig, essamp_forward, essamp_param_count, make_essamp
from .kernels import BACKEND
from .metrics import ap_sweep, average_precision, iou, nms
from .neck import FeatureSet, PRNConfig, make_prn, prn_forward
from .tensor import Tensor, count_ops, grad_check, no_grad
from .synth import Dataset, DatasetSpec, benchmark_spec, gen_dataset
from .train import TrainConfig, compare_necks, evaluate, sgd_momentum_step, train_loop

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "BACKEND", "BoxLabel", "ConfigError", "ContractViolation", "Dataset", "DatasetSpec", "Detection",
    "ESSampConfig", "FeatureSet", "InvalidArgument", "InvalidState", "Model", "ModelStats",
    "NonFiniteError", "PRNConfig", "PRNetError", "Tensor", "TensorFileError", "TrainConfig",
    "ap_sweep", "assign_targets", "benchmark_spec", "compare_necks", "average_precision", "build_model", "count_macs", "count_ops",
    "count_params", "decode_predictions", "detection_loss", "essamp_forward", "essamp_param_count",
    "evaluate", "forward", "gen_dataset", "grad_check", "iou", "make_essamp", "make_prn", "nms", "no_grad",
    "prn_forward", "sgd_momentum_step", "stats", "sweep", "tiny_config", "train_loop",
]

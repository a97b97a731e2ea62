"""Multi-modal rectified flow at desk scale.

A small reverse-mode autodiff core, forward-process schedules, a trainer
over task paths in the per-modality time cube, MLP and joint-attention
networks, a guided Euler sampler, and the synthetic studies built on them.
"""

from .errors import ConfigError, DimensionError, DomainError, MMFlowError, UsageError
from .paths import ModalitySpec, TaskPath, path_eval, task_path
from .sampler import GuidanceMatrix, SamplerConfig, euler_sample, guided_velocity, sample_marginal
from .schedules import ForwardSchedule, convert_prediction, shift_time
from .tensor import Tensor, backward
from .training import FlowModel, Trainer, TrainerConfig

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DimensionError", "DomainError", "MMFlowError", "UsageError",
    "ModalitySpec", "TaskPath", "path_eval", "task_path",
    "GuidanceMatrix", "SamplerConfig", "euler_sample", "guided_velocity", "sample_marginal",
    "ForwardSchedule", "convert_prediction", "shift_time",
    "Tensor", "backward",
    "FlowModel", "Trainer", "TrainerConfig",
    "__version__",
]

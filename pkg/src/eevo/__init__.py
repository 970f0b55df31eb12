"""Early-exit decoding for a small numpy transformer, with vocabulary pruning."""

from .decoder import GenerationResult, Mode, generate
from .model import ModelConfig, ModelWeights, init_random, load_weights, save_weights
from .policy import ConfidenceMeasure, ExitPolicy, ScheduleKind, ThresholdSchedule

__all__ = [
    "ConfidenceMeasure",
    "ExitPolicy",
    "GenerationResult",
    "Mode",
    "ModelConfig",
    "ModelWeights",
    "ScheduleKind",
    "ThresholdSchedule",
    "generate",
    "init_random",
    "load_weights",
    "save_weights",
]

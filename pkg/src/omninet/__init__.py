"""Multi-modal multi-task network with spatio-temporal caches, at toy scale."""

from .cache import CacheState, SpatioTemporalTensor, compute_gate, encode, reset
from .cnp import ModelConfig, OmniNetModel, count_parameters, decode_step_logits, generate_greedy, preset
from .errors import AllPaddingError, ContractError, DimensionError, NonFiniteGradientError, TrainingAborted

__version__ = "0.1.0"

__all__ = [
    "AllPaddingError",
    "CacheState",
    "ContractError",
    "DimensionError",
    "ModelConfig",
    "NonFiniteGradientError",
    "OmniNetModel",
    "SpatioTemporalTensor",
    "TrainingAborted",
    "compute_gate",
    "count_parameters",
    "decode_step_logits",
    "encode",
    "generate_greedy",
    "preset",
    "reset",
]

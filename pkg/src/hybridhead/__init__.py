"""Hybrid attention + state-space language model in pure numpy.

Submodules: ``numerics`` (autodiff), ``hybrid_head``, ``meta_tokens``, ``model``,
``cache``, ``analysis``, ``training``, ``checkpoint`` and ``cli``. The most used
names are re-exported here.
"""
from .cache import CacheState, cache_bytes, cache_report
from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, ModelConfig, preset
from .meta_tokens import precompute_init, seed_cache
from .model import Model, build, forward
from .numerics import ContractError, ShapeError, Tensor, backward, no_grad
from .runconfig import RunConfig
from .training import WsdSchedule, lr_at, train

__version__ = "0.1.0"

__all__ = [
    "CacheState", "cache_bytes", "cache_report", "Checkpoint", "CheckpointError", "ConfigError",
    "ModelConfig", "preset", "precompute_init", "seed_cache", "Model", "build", "forward",
    "ContractError", "ShapeError", "Tensor", "backward", "no_grad", "RunConfig", "WsdSchedule",
    "lr_at", "train", "__version__",
]

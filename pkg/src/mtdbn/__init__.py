"""Multityped deep belief nets: typed RBMs, a two-layer joint stack, typed task heads."""

__version__ = "0.1.0"

from .errors import (
    CalibrationError,
    ConfigError,
    ContractError,
    DataError,
    DivergenceError,
    MtdbnError,
)
from .heads import TaskHead
from .rbm import RbmParams, SparseCdConfig, UnitType
from .stack import DeepNet, ViewSpec

__all__ = [
    "CalibrationError",
    "ConfigError",
    "ContractError",
    "DataError",
    "DeepNet",
    "DivergenceError",
    "MtdbnError",
    "RbmParams",
    "SparseCdConfig",
    "TaskHead",
    "UnitType",
    "ViewSpec",
]

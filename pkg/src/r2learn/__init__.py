"""Representation retrieval learning for multi-source and blockwise-missing data.

A shared dictionary of representers (scalar-valued feature maps) is learned
jointly with sparse per-source linear learners. The Selective Integration
Penalty rewards representers that many sources retrieve.
"""

from r2learn.errors import ConfigError, ContractError, DataError, NumericError
from r2learn.numerics import AdamState, RandomStream, adam_step, check_gradient, soft_threshold
from r2learn.penalties import (
    CoefficientMatrix,
    SipParams,
    complexity_stat,
    gamma_smoothed,
    integrativeness_exact,
    sip_exact,
    sip_smoothed,
    sip_smoothed_gradient,
)
from r2learn.representers import RepresenterDictionary, RepresenterSpec, init_dictionary

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "CoefficientMatrix",
    "ConfigError",
    "ContractError",
    "DataError",
    "NumericError",
    "RandomStream",
    "RepresenterDictionary",
    "RepresenterSpec",
    "SipParams",
    "adam_step",
    "check_gradient",
    "complexity_stat",
    "gamma_smoothed",
    "init_dictionary",
    "integrativeness_exact",
    "sip_exact",
    "sip_smoothed",
    "sip_smoothed_gradient",
    "soft_threshold",
]

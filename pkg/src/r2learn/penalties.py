"""Selective Integration Penalty (SIP) and integrativeness statistics.

Coefficients are held as an ``S x D`` matrix: row ``s`` is the learner of
source ``s``, column ``d`` the weights all sources put on representer ``d``.
Representer ``d`` is *retrieved* by source ``s`` when ``|B[s, d]| > zero_tol``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from r2learn.errors import ConfigError, ContractError

ZERO_TOL = 1e-8


@dataclass(frozen=True)
class CoefficientMatrix:
    values: np.ndarray
    zero_tol: float = ZERO_TOL

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ContractError(f"coefficient matrix must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ContractError("coefficient matrix has non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def source_count(self) -> int:
        return self.values.shape[0]

    @property
    def dict_size(self) -> int:
        return self.values.shape[1]

    def support(self) -> np.ndarray:
        return np.abs(self.values) > self.zero_tol


@dataclass(frozen=True)
class SipParams:
    tau: float = 0.1
    lambda2: float = 0.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"sip.tau must be > 0, got {self.tau}")
        if self.lambda2 < 0:
            raise ConfigError(f"sip.lambda2 must be >= 0, got {self.lambda2}")


def _as_matrix(B) -> np.ndarray:
    if isinstance(B, CoefficientMatrix):
        return B.values
    B = np.asarray(B, dtype=np.float64)
    if B.ndim != 2:
        raise ContractError(f"coefficient matrix must be 2-D, got shape {B.shape}")
    return B


def integrativeness_exact(B, zero_tol: float | None = None) -> np.ndarray:
    """Number of sources retrieving each representer (integer vector of length D)."""
    if zero_tol is None:
        zero_tol = B.zero_tol if isinstance(B, CoefficientMatrix) else ZERO_TOL
    return np.sum(np.abs(_as_matrix(B)) > zero_tol, axis=0).astype(np.int64)


def _sip_from_gamma(gamma: np.ndarray, S: int) -> float:
    if S < 2:
        raise ConfigError(f"SIP needs at least 2 sources, got S={S}")
    return float(np.sum(np.minimum(1.0, (S - gamma) / (S - 1.0))))


def sip_exact(gamma, S: int) -> float:
    """``sum_d min(1, (S - gamma_d) / (S - 1))``; lies in ``[0, D]``."""
    gamma = np.asarray(gamma)
    if np.any(gamma < 0) or np.any(gamma > S):
        raise ContractError(f"integrativeness must lie in [0, {S}]")
    return _sip_from_gamma(gamma.astype(np.float64), S)


def gamma_smoothed(B, tau: float) -> np.ndarray:
    """Truncated-l1 integrativeness ``sum_s min(1, |B[s, d]| / tau)``."""
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    return np.sum(np.minimum(1.0, np.abs(_as_matrix(B)) / tau), axis=0)


def sip_smoothed(B, params: SipParams, S: int | None = None) -> float:
    B = _as_matrix(B)
    S = B.shape[0] if S is None else S
    return _sip_from_gamma(gamma_smoothed(B, params.tau), S)


def sip_smoothed_gradient(B, params: SipParams, S: int | None = None) -> np.ndarray:
    """Gradient of the smoothed SIP w.r.t. ``B`` (``S x D``).

    Nonzero only where the column's smoothed integrativeness exceeds 1 and
    ``0 < |B[s, d]| < tau``; there it equals ``-sign(B) / (tau (S - 1))``.
    Kinks take the one-sided value 0, so exact zeros stay stationary.
    """
    B = _as_matrix(B)
    S = B.shape[0] if S is None else S
    if S < 2:
        raise ConfigError(f"SIP needs at least 2 sources, got S={S}")
    tau = params.tau
    g = gamma_smoothed(B, tau)
    a = np.abs(B)
    active = (a > 0) & (a < tau) & (g > 1.0)[None, :]
    return np.where(active, -np.sign(B) / (tau * (S - 1.0)), 0.0)


def complexity_stat(gamma) -> float:
    """``sum_d sqrt(gamma_d)``, the dictionary-capacity diagnostic."""
    gamma = np.asarray(gamma, dtype=np.float64)
    if np.any(gamma < 0):
        raise ContractError("integrativeness must be nonnegative")
    return float(np.sum(np.sqrt(gamma)))

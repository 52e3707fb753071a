"""Numeric building blocks: seeded streams, Adam, the l1 prox and a gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from r2learn.errors import ContractError, NumericError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class RandomStream:
    """Reproducible random stream identified by ``(seed, stream_id)``.

    Built on ``numpy.random.SeedSequence`` spawn keys, so a stream never
    depends on how many other streams were drawn before it. ``path`` names
    nested sub-streams (e.g. replication -> tuning trial -> init).
    """

    seed: int
    stream_id: int = 0
    path: tuple[int, ...] = ()

    def substream(self, *keys: int) -> "RandomStream":
        return RandomStream(self.seed, self.stream_id, self.path + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed) & (2**64 - 1),
                                    spawn_key=(int(self.stream_id),) + self.path)
        return np.random.Generator(np.random.PCG64(ss))


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPS

    @classmethod
    def zeros(cls, shape, learning_rate=1e-3, beta1=ADAM_BETA1, beta2=ADAM_BETA2,
              epsilon=ADAM_EPS) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape), 0, float(learning_rate),
                   float(beta1), float(beta2), float(epsilon))


def adam_direction(state: AdamState, grad: np.ndarray):
    """Advance the moments with ``grad``.

    Returns ``(new_state, delta, step_size)`` where ``delta`` is the amount to
    subtract from the parameters and ``step_size`` is the per-coordinate
    effective learning rate ``lr / (sqrt(v_hat) + eps)``; the proximal
    beta update scales its l1 threshold by it.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.first_moment.shape:
        raise ContractError(f"gradient shape {grad.shape} does not match Adam state "
                            f"{state.first_moment.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient passed to Adam",
                           {"n_bad": int(np.sum(~np.isfinite(grad)))})
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * (grad * grad)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    step_size = state.learning_rate / (np.sqrt(v_hat) + state.epsilon)
    new_state = replace(state, first_moment=m, second_moment=v, step_count=t)
    return new_state, step_size * m_hat, step_size


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray):
    """One bias-corrected Adam update. Pure: returns ``(new_state, new_params)``."""
    params = np.asarray(params, dtype=np.float64)
    if params.shape != state.first_moment.shape:
        raise ContractError(f"parameter shape {params.shape} does not match Adam state "
                            f"{state.first_moment.shape}")
    new_state, delta, _ = adam_direction(state, grad)
    return new_state, params - delta


def soft_threshold(x, lam):
    """Proximal operator of ``lam * |.|``: ``sign(x) * max(|x| - lam, 0)``.

    Works elementwise on arrays; ``lam`` may broadcast against ``x``.
    """
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam < 0):
        raise ContractError("soft_threshold requires lambda >= 0")
    x = np.asarray(x, dtype=np.float64)
    out = np.sign(x) * np.maximum(np.abs(x) - lam, 0.0)
    # avoid -0.0 so exact zeros compare and serialize cleanly
    out = out + 0.0
    return out if out.ndim else float(out)


def check_gradient(f, point, analytic_grad, step: float = 1e-5) -> float:
    """Max over coordinates of ``|fd - analytic| / max(1, |analytic|)``.

    ``fd`` is the central difference ``(f(x+h e_i) - f(x-h e_i)) / 2h``.
    """
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    x = np.array(point, dtype=np.float64)
    g = np.asarray(analytic_grad, dtype=np.float64).reshape(x.shape)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"function not finite near coordinate {i}")
        fd = (fp - fm) / (2.0 * step)
        worst = max(worst, abs(fd - gflat[i]) / max(1.0, abs(gflat[i])))
    return worst

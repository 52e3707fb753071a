"""Reference methods: single-task (STL), pooled, and multi-task representation
learning (MTRL), each with a linear or one-hidden-layer neural variant.

Linear fits solve ridge-regularized least squares directly; neural fits use
full-batch Adam with optional early stopping on a validation set. STL on
blockwise data uses each source's observed modalities only.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from r2learn.data import MultiSourceDataset
from r2learn.errors import ConfigError, ContractError, DataError, NumericError
from r2learn.numerics import AdamState, RandomStream, adam_step
from r2learn.representers import RepresenterDictionary, RepresenterSpec, init_dictionary
from r2learn.serialize import decode_array, encode_array

METHODS = ("stl", "pooling", "mtrl")
FAMILIES = ("linear", "nn")


@dataclass(frozen=True)
class BaselineSpec:
    method: str = "stl"
    family: str = "linear"
    hidden: int = 32
    ridge: float = 1e-6
    latent_dim: int = 16
    lr: float = 1e-2
    max_steps: int = 3000
    eval_every: int = 10
    early_stop_patience: int = 200
    lr_decay: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"baseline method must be one of {METHODS}, got {self.method!r}")
        if self.family not in FAMILIES:
            raise ConfigError(f"baseline family must be one of {FAMILIES}, got {self.family!r}")
        if self.ridge < 0 or self.hidden < 1 or self.latent_dim < 1 or not self.lr > 0:
            raise ConfigError("invalid baseline hyperparameters")
        if self.max_steps < 1 or self.eval_every < 1:
            raise ConfigError("max_steps and eval_every must be positive")

    @property
    def name(self) -> str:
        return f"{self.method}-{self.family}"


def _design(data: MultiSourceDataset, s: int) -> np.ndarray:
    """Covariates of source ``s``; for blockwise data only its observed modalities."""
    if not data.is_blockwise:
        return data.sources[s].X
    blocks = data.observed_blocks(s)
    return np.hstack([blocks[m] for m in sorted(blocks)])


class LinearRegressor:
    """``y ~ X w + c`` with unpenalized intercept."""

    def __init__(self, w, c):
        self.w = np.asarray(w, dtype=np.float64)
        self.c = float(c)

    @classmethod
    def fit(cls, X, y, ridge):
        n, p = X.shape
        xm, ym = X.mean(axis=0), y.mean()
        Xc = X - xm
        A = Xc.T @ Xc + n * ridge * np.eye(p)
        if np.linalg.cond(A) > 1e12:
            raise NumericError(f"linear design is singular or ill-conditioned (n={n}, p={p}); "
                               "use ridge > 0")
        w = np.linalg.solve(A, Xc.T @ (y - ym))
        return cls(w, ym - xm @ w)

    def predict(self, X):
        return X @ self.w + self.c

    def to_dict(self):
        return {"type": "linear", "w": encode_array(self.w), "c": self.c}


class MLPRegressor:
    """One-hidden-layer tanh network with scalar output."""

    def __init__(self, dictionary: RepresenterDictionary):
        self.dictionary = dictionary

    @classmethod
    def fit(cls, X, y, spec: BaselineSpec, stream: RandomStream, X_val=None, y_val=None):
        p = X.shape[1]
        d = init_dictionary([RepresenterSpec("mlp", p, hidden=spec.hidden)], stream)

        def value(dct, A, b):
            r = dct.forward_batch(A, check=False)[:, 0] - b
            return float(np.mean(r * r))

        best = (value(d, X_val, y_val) if X_val is not None else np.inf, d)
        state = AdamState.zeros(d.params.size, spec.lr)
        waited = 0
        n = X.shape[0]
        for step in range(1, spec.max_steps + 1):
            out, cache = d.forward_batch(X, cache=True, check=False)
            g = 2.0 * (out[:, 0] - y) / n
            grad = d.backward_flat(X, g[:, None], cache)
            if not np.all(np.isfinite(grad)):
                raise NumericError("non-finite gradient in neural baseline", {"step": step})
            state, params = adam_step(state, d.params, grad)
            if spec.lr_decay != 1.0:
                state.learning_rate *= spec.lr_decay
            d = d.with_params(params)
            if X_val is not None and step % spec.eval_every == 0:
                v = value(d, X_val, y_val)
                if v < best[0]:
                    best, waited = (v, d), 0
                else:
                    waited += spec.eval_every
                    if spec.early_stop_patience and waited >= spec.early_stop_patience:
                        break
        return cls(best[1] if X_val is not None else d)

    def predict(self, X):
        return self.dictionary.forward_batch(X)[:, 0]

    def to_dict(self):
        return {"type": "mlp", "dictionary": self.dictionary.to_dict()}


def _regressor_from_dict(d):
    if d["type"] == "linear":
        return LinearRegressor(decode_array(d["w"]), d["c"])
    return MLPRegressor(RepresenterDictionary.from_dict(d["dictionary"]))


def _fit_one(X, y, spec, stream, X_val=None, y_val=None):
    if spec.family == "linear":
        return LinearRegressor.fit(X, y, spec.ridge)
    return MLPRegressor.fit(X, y, spec, stream, X_val, y_val)


class BaselineModel:
    """Fitted baseline: ``predict_source(data, s)`` gives source ``s``'s predictions."""

    kind = "baseline"

    def __init__(self, spec: BaselineSpec, S: int):
        self.spec = spec
        self.S = S

    def predict_source(self, data: MultiSourceDataset, s: int) -> np.ndarray:
        raise NotImplementedError

    def source_rmse(self, data: MultiSourceDataset) -> np.ndarray:
        if data.S != self.S:
            raise ContractError(f"dataset has {data.S} sources, model was fitted on {self.S}")
        return np.array([np.sqrt(np.mean((self.predict_source(data, s) - data.sources[s].y) ** 2))
                         for s in range(self.S)])

    def to_dict(self) -> dict:
        return {"schema": "r2learn.model/1", "kind": "baseline",
                "spec": dataclasses.asdict(self.spec), "S": self.S, "state": self._state()}


class STLModel(BaselineModel):
    def __init__(self, spec, models):
        super().__init__(spec, len(models))
        self.models = models

    def predict_source(self, data, s):
        return self.models[s].predict(_design(data, s))

    def _state(self):
        return {"models": [m.to_dict() for m in self.models]}


class PooledModel(BaselineModel):
    def __init__(self, spec, model, S):
        super().__init__(spec, S)
        self.model = model

    def predict_source(self, data, s):
        if data.is_blockwise:
            raise ContractError("a pooled model cannot predict blockwise-missing data")
        return self.model.predict(data.sources[s].X)

    def _state(self):
        return {"model": self.model.to_dict()}


class MTRLModel(BaselineModel):
    """Shared representation ``h(x)`` with per-source linear heads ``a_s . h(x) + c_s``.

    ``h`` is ``W x`` (``latent_dim`` outputs) for the linear family and
    ``tanh(W x + b)`` (``hidden`` units) for the neural family.
    """

    def __init__(self, spec, W, b, heads, intercepts):
        super().__init__(spec, heads.shape[0])
        self.W, self.b, self.heads, self.intercepts = W, b, heads, intercepts

    def represent(self, X):
        Z = X @ self.W.T + self.b
        return np.tanh(Z) if self.spec.family == "nn" else Z

    def predict_source(self, data, s):
        if data.is_blockwise:
            raise ContractError("MTRL needs a shared covariate space")
        return self.represent(data.sources[s].X) @ self.heads[s] + self.intercepts[s]

    def _state(self):
        return {k: encode_array(getattr(self, k)) for k in ("W", "b", "heads", "intercepts")}


def fit_stl(data: MultiSourceDataset, spec: BaselineSpec, validation: MultiSourceDataset | None = None):
    """Independent per-source fits."""
    root = RandomStream(spec.seed)
    models = []
    for s in range(data.S):
        Xv = yv = None
        if validation is not None:
            Xv, yv = _design(validation, s), validation.sources[s].y
        models.append(_fit_one(_design(data, s), data.sources[s].y, spec, root.substream(s), Xv, yv))
    return STLModel(spec, models)


def fit_pooling(data: MultiSourceDataset, spec: BaselineSpec, validation: MultiSourceDataset | None = None):
    """One model on all sources' rows, applied to every source."""
    if data.is_blockwise:
        raise ContractError("pooling is inapplicable to blockwise-missing data "
                            "(sources do not share a covariate space)")
    X = np.vstack([s.X for s in data.sources])
    y = np.concatenate([s.y for s in data.sources])
    Xv = yv = None
    if validation is not None:
        Xv = np.vstack([s.X for s in validation.sources])
        yv = np.concatenate([s.y for s in validation.sources])
    # same stream as STL's source 0, so pooling a single source reproduces STL
    return PooledModel(spec, _fit_one(X, y, spec, RandomStream(spec.seed).substream(0), Xv, yv), data.S)


def _mtrl_objective(params, shapes, data_rows, family, ridge):
    W, b, A, c = _unpack(params, shapes)
    total, grads = 0.0, [np.zeros_like(W), np.zeros_like(b), np.zeros_like(A), np.zeros_like(c)]
    S = len(data_rows)
    for s, (X, y) in enumerate(data_rows):
        Z = X @ W.T + b
        H = np.tanh(Z) if family == "nn" else Z
        r = H @ A[s] + c[s] - y
        n = y.size
        total += float(r @ r) / (S * n)
        g = 2.0 * r / (S * n)
        grads[2][s] = H.T @ g
        grads[3][s] = g.sum()
        dH = g[:, None] * A[s][None, :]
        dZ = dH * (1.0 - H * H) if family == "nn" else dH
        grads[0] += dZ.T @ X
        grads[1] += dZ.sum(axis=0)
    if ridge > 0:
        total += ridge * (float(np.sum(W * W)) + float(np.sum(A * A)))
        grads[0] += 2 * ridge * W
        grads[2] += 2 * ridge * A
    return total, np.concatenate([g.ravel() for g in grads])


def _unpack(params, shapes):
    out, off = [], 0
    for shp in shapes:
        size = int(np.prod(shp))
        out.append(params[off:off + size].reshape(shp))
        off += size
    return out


def fit_mtrl(data: MultiSourceDataset, spec: BaselineSpec, validation: MultiSourceDataset | None = None):
    """Shared linear or neural representation with per-source heads, trained jointly by Adam."""
    if data.is_blockwise:
        raise ContractError("MTRL needs a shared covariate space; it does not apply to blockwise data")
    S, p = data.S, data.p
    r = spec.hidden if spec.family == "nn" else spec.latent_dim
    gen = RandomStream(spec.seed).generator()
    bound_w = np.sqrt(6.0 / (p + r))
    bound_a = np.sqrt(6.0 / (r + 1))
    shapes = [(r, p), (r,), (S, r), (S,)]
    b0 = np.zeros(r)
    params = np.concatenate([gen.uniform(-bound_w, bound_w, r * p), b0,
                             gen.uniform(-bound_a, bound_a, S * r),
                             np.array([src.y.mean() for src in data.sources])])
    if spec.family == "linear":
        free = np.ones(params.size, dtype=bool)
        free[r * p:r * p + r] = False  # linear maps carry no bias; heads have intercepts
    else:
        free = np.ones(params.size, dtype=bool)
    rows = [(src.X, src.y) for src in data.sources]
    vrows = [(src.X, src.y) for src in validation.sources] if validation is not None else None
    ridge = spec.ridge if spec.family == "nn" else 0.0
    state = AdamState.zeros(int(free.sum()), spec.lr)
    best = (np.inf, params)
    waited = 0
    for step in range(1, spec.max_steps + 1):
        _, grad = _mtrl_objective(params, shapes, rows, spec.family, ridge)
        if not np.all(np.isfinite(grad)):
            raise NumericError("non-finite gradient in MTRL", {"step": step})
        state, new = adam_step(state, params[free], grad[free])
        if spec.lr_decay != 1.0:
            state.learning_rate *= spec.lr_decay
        params = params.copy()
        params[free] = new
        if vrows is not None and step % spec.eval_every == 0:
            v, _ = _mtrl_objective(params, shapes, vrows, spec.family, 0.0)
            if v < best[0]:
                best, waited = (v, params), 0
            else:
                waited += spec.eval_every
                if spec.early_stop_patience and waited >= spec.early_stop_patience:
                    break
    if vrows is not None:
        params = best[1]
    W, b, A, c = (x.copy() for x in _unpack(params, shapes))
    return MTRLModel(spec, W, b, A, c)


def fit_baseline(data, spec: BaselineSpec, validation=None) -> BaselineModel:
    fn = {"stl": fit_stl, "pooling": fit_pooling, "mtrl": fit_mtrl}[spec.method]
    return fn(data, spec, validation)


def baseline_from_dict(d: dict) -> BaselineModel:
    if d.get("kind") != "baseline":
        raise DataError("not a baseline checkpoint")
    spec = BaselineSpec(**d["spec"])
    st = d["state"]
    if spec.method == "stl":
        return STLModel(spec, [_regressor_from_dict(m) for m in st["models"]])
    if spec.method == "pooling":
        return PooledModel(spec, _regressor_from_dict(st["model"]), d["S"])
    return MTRLModel(spec, *(decode_array(st[k]) for k in ("W", "b", "heads", "intercepts")))

"""Representers and representer dictionaries.

A representer maps a covariate vector to one real number. Four families are
supported:

* ``identity``   -- ``x[index]``; no parameters.
* ``linear``     -- ``<w, x>``; trainable.
* ``orthobasis`` -- ``<b, x>`` for a fixed unit-norm ``b``; frozen by default.
* ``mlp``        -- ``w2 . act(W1 x + b1) + b2``, one hidden layer.

Each representer may read a contiguous ``view = (start, stop)`` of the input
instead of the whole vector; blockwise models use this to bind a dictionary
to one modality. All parameters live in one flat float64 vector so the
trainer can hand a single array to Adam. Forward and backward passes stack
representers that share a family and shape, so a dictionary of 30 MLPs costs
one matrix product rather than 30.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from r2learn.errors import ConfigError, ContractError, DataError, NumericError
from r2learn.numerics import RandomStream
from r2learn.serialize import decode_array, encode_array

FAMILIES = ("identity", "linear", "orthobasis", "mlp")

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "sigmoid": (lambda z: 0.5 * (1.0 + np.tanh(0.5 * z)), lambda z, a: a * (1.0 - a)),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(np.float64)),
}


@dataclass(frozen=True)
class RepresenterSpec:
    """Declarative description of one representer.

    ``weights`` optionally fixes the initial (or, when frozen, permanent) flat
    parameter vector. ``init_key`` selects the random sub-stream used for
    initialization; it defaults to the position in the dictionary, and giving
    it explicitly makes initialization independent of ordering.
    """

    family: str
    input_dim: int
    index: Optional[int] = None
    basis: Optional[tuple] = None
    hidden: int = 32
    activation: str = "tanh"
    trainable: Optional[bool] = None
    view: Optional[tuple] = None
    init_key: Optional[int] = None
    weights: Optional[tuple] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown representer family {self.family!r}; "
                              f"expected one of {FAMILIES}")
        if self.input_dim < 1:
            raise ConfigError("input_dim must be positive")
        if self.view is not None:
            start, stop = self.view
            if not 0 <= start < stop <= self.input_dim:
                raise ConfigError(f"view {self.view} outside input of dimension {self.input_dim}")
            object.__setattr__(self, "view", (int(start), int(stop)))
        q = self.width
        if self.family == "identity":
            if self.index is None or not 0 <= self.index < q:
                raise ConfigError(f"identity index {self.index} out of range for width {q}")
            if self.trainable:
                raise ConfigError("identity representers have no parameters to train")
        if self.family == "orthobasis":
            if self.basis is None or len(self.basis) != q:
                raise ConfigError(f"orthobasis needs a basis vector of length {q}")
            norm = float(np.linalg.norm(np.asarray(self.basis, dtype=np.float64)))
            if abs(norm - 1.0) > 1e-8:
                raise ConfigError(f"orthobasis vector must have unit norm, got {norm}")
            object.__setattr__(self, "basis", tuple(float(b) for b in self.basis))
        if self.family == "mlp":
            if self.hidden < 1:
                raise ConfigError("mlp hidden width must be >= 1")
            if self.activation not in _ACTIVATIONS:
                raise ConfigError(f"unknown activation {self.activation!r}")
        if self.weights is not None:
            if len(self.weights) != self.n_params:
                raise ConfigError(f"{self.family} representer expects {self.n_params} weights, "
                                  f"got {len(self.weights)}")
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))

    @property
    def width(self) -> int:
        return self.view[1] - self.view[0] if self.view else self.input_dim

    @property
    def is_trainable(self) -> bool:
        if self.trainable is not None:
            return bool(self.trainable)
        return self.family in ("linear", "mlp")

    @property
    def n_params(self) -> int:
        q = self.width
        if self.family == "identity":
            return 0
        if self.family in ("linear", "orthobasis"):
            return q
        return self.hidden * q + 2 * self.hidden + 1

    def group_key(self):
        # representers with equal keys are evaluated together
        if self.family == "mlp":
            return ("mlp", self.view, self.hidden, self.activation)
        if self.family in ("linear", "orthobasis"):
            return ("linear", self.view)
        return ("identity", self.view)

    def to_dict(self) -> dict:
        d = {"family": self.family, "input_dim": self.input_dim}
        if self.index is not None:
            d["index"] = self.index
        if self.basis is not None:
            d["basis"] = encode_array(np.asarray(self.basis))
        if self.family == "mlp":
            d["hidden"] = self.hidden
            d["activation"] = self.activation
        if self.trainable is not None:
            d["trainable"] = self.trainable
        if self.view is not None:
            d["view"] = list(self.view)
        if self.init_key is not None:
            d["init_key"] = self.init_key
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RepresenterSpec":
        d = dict(d)
        if "basis" in d:
            d["basis"] = tuple(decode_array(d["basis"]).tolist())
        if "view" in d:
            d["view"] = tuple(d["view"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise DataError(f"bad representer spec {d}: {exc}") from exc


def _glorot(gen, fan_in, fan_out, size):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-bound, bound, size=size)


def _initial_params(spec: RepresenterSpec, stream: RandomStream) -> np.ndarray:
    if spec.weights is not None:
        return np.array(spec.weights, dtype=np.float64)
    q = spec.width
    if spec.family == "identity":
        return np.zeros(0)
    if spec.family == "orthobasis":
        return np.array(spec.basis, dtype=np.float64)
    gen = stream.generator()
    if spec.family == "linear":
        return _glorot(gen, q, 1, q)
    H = spec.hidden
    W1 = _glorot(gen, q, H, (H, q))
    w2 = _glorot(gen, H, 1, H)
    return np.concatenate([W1.ravel(), np.zeros(H), w2, [0.0]])


class _Group:
    """Representers evaluated together: same family, view and shape."""

    def __init__(self, key, members, offsets, specs):
        self.key = key
        self.members = np.asarray(members, dtype=np.int64)
        spec0 = specs[members[0]]
        self.family = key[0]
        self.view = spec0.view
        if self.family == "identity":
            self.cols = np.array([specs[d].index for d in members], dtype=np.int64)
        else:
            size = spec0.n_params
            self.pidx = offsets[self.members][:, None] + np.arange(size)[None, :]
        if self.family == "mlp":
            self.hidden = spec0.hidden
            self.q = spec0.width
            self.act, self.dact = _ACTIVATIONS[spec0.activation]

    def inputs(self, X):
        if self.view is None:
            return X
        return X[:, self.view[0]:self.view[1]]

    def _mlp_parts(self, P):
        k, H, q = len(self.members), self.hidden, self.q
        W1 = P[:, :H * q].reshape(k * H, q)
        b1 = P[:, H * q:H * q + H].reshape(k * H)
        w2 = P[:, H * q + H:H * q + 2 * H]
        b2 = P[:, -1]
        return W1, b1, w2, b2

    def forward(self, params, X, cache=False):
        Xv = self.inputs(X)
        if self.family == "identity":
            return Xv[:, self.cols], None
        P = params[self.pidx]
        if self.family == "linear":
            return Xv @ P.T, None
        W1, b1, w2, b2 = self._mlp_parts(P)
        n, k, H = Xv.shape[0], len(self.members), self.hidden
        Z = Xv @ W1.T + b1
        A = self.act(Z)
        out = np.einsum("nkh,kh->nk", A.reshape(n, k, H), w2) + b2
        return out, ((Z, A) if cache else None)

    def backward(self, params, X, U, cache):
        """Gradient of ``sum_{i,j} U[i, j] * out[i, j]`` w.r.t. the group's params."""
        Xv = self.inputs(X)
        if self.family == "linear":
            return U.T @ Xv
        P = params[self.pidx]
        W1, b1, w2, b2 = self._mlp_parts(P)
        Z, A = cache
        n, k, H = Xv.shape[0], len(self.members), self.hidden
        A3 = A.reshape(n, k, H)
        g_w2 = np.einsum("nkh,nk->kh", A3, U)
        g_b2 = U.sum(axis=0)
        dZ = (U[:, :, None] * w2[None, :, :]).reshape(n, k * H) * self.dact(Z, A)
        g_W1 = (dZ.T @ Xv).reshape(k, H * self.q)
        g_b1 = dZ.sum(axis=0).reshape(k, H)
        return np.concatenate([g_W1, g_b1, g_w2, g_b2[:, None]], axis=1)


class RepresenterDictionary:
    """Ordered, immutable collection of ``D`` representers over inputs of dim ``p``.

    Parameters are read through :attr:`params`; :meth:`with_params` returns a
    new dictionary, leaving this one untouched.
    """

    def __init__(self, specs: Sequence[RepresenterSpec], params: np.ndarray):
        specs = tuple(specs)
        if not specs:
            raise ConfigError("a dictionary needs at least one representer")
        dims = {s.input_dim for s in specs}
        if len(dims) != 1:
            raise ConfigError(f"representers disagree on input dimension: {sorted(dims)}")
        self.specs = specs
        self.input_dim = dims.pop()
        sizes = np.array([s.n_params for s in specs], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        params = np.array(params, dtype=np.float64)
        if params.shape != (int(sizes.sum()),):
            raise ContractError(f"dictionary expects {int(sizes.sum())} parameters, "
                                f"got shape {params.shape}")
        params.flags.writeable = False
        self.params = params
        mask = np.zeros(params.size, dtype=bool)
        for s, off, size in zip(specs, self.offsets, sizes):
            if s.is_trainable:
                mask[off:off + size] = True
        self.trainable_mask = mask
        self.trainable_index = np.flatnonzero(mask)
        groups = {}
        for d, s in enumerate(specs):
            groups.setdefault(s.group_key(), []).append(d)
        self._groups = [_Group(k, m, self.offsets, specs) for k, m in groups.items()]

    @property
    def size(self) -> int:
        return len(self.specs)

    def __len__(self):
        return len(self.specs)

    def with_params(self, params) -> "RepresenterDictionary":
        return RepresenterDictionary(self.specs, params)

    def with_trainable(self, values) -> "RepresenterDictionary":
        p = self.params.copy()
        p[self.trainable_index] = values
        return RepresenterDictionary(self.specs, p)

    def representer_params(self, d: int) -> np.ndarray:
        off = self.offsets[d]
        return self.params[off:off + self.specs[d].n_params]

    def _check_X(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ContractError(f"expected inputs with {self.input_dim} columns, got shape {X.shape}")
        return X

    def _run(self, X, cache):
        out = np.empty((X.shape[0], self.size))
        caches = []
        for g in self._groups:
            vals, c = g.forward(self.params, X, cache)
            out[:, g.members] = vals
            caches.append(c)
        return out, caches

    def forward_batch(self, X, cache: bool = False, check: bool = True):
        """Evaluate every representer on every row of ``X`` (``n x p`` -> ``n x D``).

        With ``cache=True`` returns ``(outputs, cache)`` for :meth:`backward`.
        """
        X = self._check_X(X)
        if check and not np.all(np.isfinite(X)):
            raise NumericError("non-finite covariates passed to the dictionary")
        out, caches = self._run(X, cache)
        return (out, caches) if cache else out

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.input_dim,):
            raise ContractError(f"expected a vector of length {self.input_dim}, got shape {x.shape}")
        return self.forward_batch(x[None, :])[0]

    def backward_flat(self, X, upstream, cache=None) -> np.ndarray:
        """Gradient of ``sum_{i,d} upstream[i, d] * theta_d(X[i])`` over all parameters.

        Returned as a flat vector aligned with :attr:`params`; entries of
        frozen representers are zero.
        """
        X = self._check_X(X)
        U = np.asarray(upstream, dtype=np.float64)
        if U.shape != (X.shape[0], self.size):
            raise ContractError(f"upstream shape {U.shape} does not match "
                                f"({X.shape[0]}, {self.size})")
        if cache is None:
            _, cache = self._run(X, True)
        grad = np.zeros(self.params.size)
        for g, c in zip(self._groups, cache):
            if g.family == "identity":
                continue
            grad[g.pidx] = g.backward(self.params, X, U[:, g.members], c)
        grad[~self.trainable_mask] = 0.0
        return grad

    def backward(self, X, upstream, cache=None) -> list:
        """Per-representer gradients; frozen representers get empty arrays."""
        flat = self.backward_flat(X, upstream, cache)
        out = []
        for d, s in enumerate(self.specs):
            if s.is_trainable:
                off = self.offsets[d]
                out.append(flat[off:off + s.n_params].copy())
            else:
                out.append(np.zeros(0))
        return out

    def output_bound(self, d: int) -> float:
        """Bound on ``|theta_d(x)|`` for bounded-activation MLPs (inf otherwise)."""
        s = self.specs[d]
        if s.family != "mlp" or s.activation not in ("tanh", "sigmoid"):
            return np.inf
        p = self.representer_params(d)
        H, q = s.hidden, s.width
        w2 = p[H * q + H:H * q + 2 * H]
        return float(np.abs(w2).sum() + abs(p[-1]))

    def to_dict(self) -> dict:
        return {"schema": "r2learn.dictionary/1",
                "specs": [s.to_dict() for s in self.specs],
                "params": encode_array(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "RepresenterDictionary":
        if d.get("schema") != "r2learn.dictionary/1":
            raise DataError(f"unsupported dictionary schema {d.get('schema')!r}")
        specs = [RepresenterSpec.from_dict(s) for s in d["specs"]]
        return cls(specs, decode_array(d["params"]))


def init_dictionary(specs: Sequence[RepresenterSpec], rng: RandomStream) -> RepresenterDictionary:
    """Build a dictionary with Glorot-uniform weights and zero biases.

    Representer ``d`` draws from ``rng.substream(init_key or d)``; fixed
    representers and specs carrying ``weights`` use those values verbatim.
    """
    specs = list(specs)
    if not specs:
        raise ConfigError("a dictionary needs at least one representer")
    dims = {s.input_dim for s in specs}
    if len(dims) != 1:
        raise ConfigError(f"representers disagree on input dimension: {sorted(dims)}")
    chunks = []
    for d, s in enumerate(specs):
        key = s.init_key if s.init_key is not None else d
        chunks.append(_initial_params(s, rng.substream(key)))
    params = np.concatenate(chunks) if chunks else np.zeros(0)
    return RepresenterDictionary(specs, params)


def dictionary_specs(kind: str, input_dim: int, size: int = 30, hidden: int = 32,
                     n_linear: int | None = None, view=None, key_offset: int = 0):
    """Spec lists for common dictionaries.

    ``kind`` is ``identity`` (one per input coordinate), ``linear``, ``mlp``
    or ``mixed`` (``n_linear`` linear followed by MLPs; a third linear by
    default).
    """
    width = view[1] - view[0] if view else input_dim
    if kind == "identity":
        return [RepresenterSpec("identity", input_dim, index=j, view=view, init_key=key_offset + j)
                for j in range(width)]
    if kind == "linear":
        return [RepresenterSpec("linear", input_dim, view=view, init_key=key_offset + d)
                for d in range(size)]
    if kind == "mlp":
        return [RepresenterSpec("mlp", input_dim, hidden=hidden, view=view, init_key=key_offset + d)
                for d in range(size)]
    if kind == "mixed":
        n_lin = size // 3 if n_linear is None else n_linear
        return ([RepresenterSpec("linear", input_dim, view=view, init_key=key_offset + d)
                 for d in range(n_lin)]
                + [RepresenterSpec("mlp", input_dim, hidden=hidden, view=view,
                                   init_key=key_offset + d) for d in range(n_lin, size)])
    raise ConfigError(f"unknown dictionary kind {kind!r}")

"""Representation retrieval (R2): shared dictionary, sparse per-source learners.

Source ``s`` predicts ``f_s(x) = sum_d B[s, d] * theta_d(x)``. Training
minimizes

    (1/S) sum_s mean_i loss(y_si, f_s(x_si))
        + sum_s lambda1_s * ||B[s]||_1 + lambda2 * SIP_tau(B)

by alternating proximal-Adam steps on ``B`` with Adam steps on the
dictionary parameters.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from r2learn import _engine
from r2learn.data import MultiSourceDataset
from r2learn.errors import ConfigError, ContractError, DataError
from r2learn.numerics import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, AdamState, RandomStream
from r2learn.penalties import ZERO_TOL, SipParams
from r2learn.representers import RepresenterDictionary, RepresenterSpec, init_dictionary
from r2learn.serialize import decode_array, encode_array

MODEL_SCHEMA = "r2learn.model/1"
TRACE_COLUMNS = ("round", "train_risk", "val_risk", "sip_exact", "complexity_stat")


@dataclass(frozen=True)
class TrainConfig:
    """Penalty weights and optimization schedule for R2 and BR2 fits.

    ``lambda1`` is a scalar shared by all sources, a length-``S`` vector, or
    (BR2 only) an ``S x M`` nested list. ``modality_lambda2`` overrides
    ``sip.lambda2`` per modality in BR2. ``batch_size=None`` means full batch.
    """

    lambda1: object = 1e-3
    sip: SipParams = field(default_factory=SipParams)
    modality_lambda2: Optional[tuple] = None
    theta_steps_per_round: int = 5
    beta_steps_per_round: int = 5
    rounds: int = 400
    batch_size: Optional[int] = None
    lr_theta: float = 5e-3
    lr_beta: float = 1e-2
    adam_beta1: float = ADAM_BETA1
    adam_beta2: float = ADAM_BETA2
    adam_eps: float = ADAM_EPS
    lr_decay: float = 1.0
    early_stop_patience: int = 20
    eval_every: int = 1
    seed: int = 0
    loss: str = "squared"

    def __post_init__(self):
        if isinstance(self.sip, dict):
            object.__setattr__(self, "sip", SipParams(**self.sip))
        lam1 = np.asarray(self.lambda1, dtype=np.float64)
        if np.any(lam1 < 0) or not np.all(np.isfinite(lam1)):
            raise ConfigError("lambda1 must be finite and >= 0")
        if isinstance(self.lambda1, (list, tuple, np.ndarray)):
            object.__setattr__(self, "lambda1", _freeze(lam1.tolist()))
        if self.modality_lambda2 is not None:
            l2 = tuple(float(v) for v in self.modality_lambda2)
            if any(v < 0 for v in l2):
                raise ConfigError("modality_lambda2 entries must be >= 0")
            object.__setattr__(self, "modality_lambda2", l2)
        for name in ("beta_steps_per_round", "rounds", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.theta_steps_per_round < 0:
            raise ConfigError("theta_steps_per_round must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be positive or null")
        for name in ("lr_theta", "lr_beta", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if self.early_stop_patience < 0:
            raise ConfigError("early_stop_patience must be >= 0")
        if self.loss not in _engine.LOSSES:
            raise ConfigError(f"loss must be one of {_engine.LOSSES}, got {self.loss!r}")

    def replace(self, **changes) -> "TrainConfig":
        if "sip" in changes and isinstance(changes["sip"], dict):
            changes["sip"] = SipParams(**{**dataclasses.asdict(self.sip), **changes["sip"]})
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda1"] = _thaw(self.lambda1)
        if self.modality_lambda2 is not None:
            d["modality_lambda2"] = list(self.modality_lambda2)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training option(s): {sorted(unknown)}")
        d = dict(d)
        if "sip" in d:
            d["sip"] = SipParams(**d["sip"])
        return cls(**d)

    def lambda1_for(self, S: int) -> np.ndarray:
        lam = np.asarray(_thaw(self.lambda1), dtype=np.float64)
        if lam.ndim == 0:
            return np.full(S, float(lam))
        if lam.shape != (S,):
            raise ConfigError(f"lambda1 has shape {lam.shape}, expected scalar or ({S},)")
        return lam


def _freeze(v):
    return tuple(_freeze(x) for x in v) if isinstance(v, list) else v


def _thaw(v):
    return [_thaw(x) for x in v] if isinstance(v, tuple) else v


@dataclass
class R2Model:
    dictionary: RepresenterDictionary
    coefficients: np.ndarray
    loss_kind: str = "squared"
    config: Optional[TrainConfig] = None

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        if self.coefficients.ndim != 2 or self.coefficients.shape[1] != self.dictionary.size:
            raise ContractError(f"coefficients of shape {self.coefficients.shape} do not match "
                                f"a dictionary of size {self.dictionary.size}")
        if self.loss_kind not in _engine.LOSSES:
            raise ConfigError(f"unknown loss {self.loss_kind!r}")

    @property
    def S(self) -> int:
        return self.coefficients.shape[0]

    @property
    def D(self) -> int:
        return self.dictionary.size

    def _check_source(self, source):
        if not 0 <= source < self.S:
            raise ContractError(f"source index {source} out of range for S={self.S}")

    def predict_batch(self, source: int, X) -> np.ndarray:
        self._check_source(source)
        return self.dictionary.forward_batch(X) @ self.coefficients[source]

    def predict_proba(self, source: int, X) -> np.ndarray:
        return expit(self.predict_batch(source, X))

    def to_dict(self) -> dict:
        return {"schema": MODEL_SCHEMA, "kind": "r2", "loss_kind": self.loss_kind,
                "dictionary": self.dictionary.to_dict(),
                "coefficients": encode_array(self.coefficients),
                "config": self.config.to_dict() if self.config else None}

    @classmethod
    def from_dict(cls, d: dict) -> "R2Model":
        if d.get("schema") != MODEL_SCHEMA or d.get("kind") != "r2":
            raise DataError(f"not an R2 checkpoint (schema={d.get('schema')!r}, kind={d.get('kind')!r})")
        cfg = TrainConfig.from_dict(d["config"]) if d.get("config") else None
        return cls(RepresenterDictionary.from_dict(d["dictionary"]),
                   decode_array(d["coefficients"]), d["loss_kind"], cfg)


def predict(model: R2Model, source: int, x) -> float:
    """Score of one covariate vector for ``source`` (pre-sigmoid under cross entropy)."""
    model._check_source(source)
    return float(model.dictionary.forward(x) @ model.coefficients[source])


def _problem(data: MultiSourceDataset, S_expected=None):
    if data.is_blockwise and not data.pattern.mask.all():
        raise ContractError("R2 needs fully observed covariates; use br2 for blockwise-missing data")
    if S_expected is not None and data.S != S_expected:
        raise ContractError(f"dataset has {data.S} sources, model expects {S_expected}")
    return _engine.Problem(data, [(None, np.arange(data.S))])


def _penalty(config: TrainConfig, S: int):
    lam2 = config.sip.lambda2
    if lam2 > 0 and S < 2:
        raise ConfigError("SIP needs at least two sources; set sip.lambda2=0 for single-source fits")
    return _engine.Penalty([config.lambda1_for(S)], [lam2], config.sip.tau)


def empirical_risk(model: R2Model, data: MultiSourceDataset, config: TrainConfig) -> float:
    """Data fit plus l1 and smoothed-SIP penalties, evaluated on ``data``."""
    prob = _problem(data, model.S)
    f = prob.predict(prob.features([model.dictionary]), [model.coefficients])
    return prob.fit_value(f, model.loss_kind) + _penalty(config, model.S).value([model.coefficients])


def predictive_risk(model: R2Model, data: MultiSourceDataset) -> float:
    """Data-fit term only (what validation and model selection use)."""
    prob = _problem(data, model.S)
    return prob.fit_value(prob.predict(prob.features([model.dictionary]), [model.coefficients]),
                          model.loss_kind)


def source_rmse(model: R2Model, data: MultiSourceDataset) -> np.ndarray:
    prob = _problem(data, model.S)
    return prob.per_source_rmse(prob.predict(prob.features([model.dictionary]), [model.coefficients]))


def beta_step(model: R2Model, data, config: TrainConfig, adam_state: AdamState | None = None):
    """One proximal-Adam step on the coefficients; returns ``(coefficients, adam_state)``."""
    prob = _problem(data, model.S)
    if adam_state is None:
        adam_state = AdamState.zeros(model.coefficients.shape, config.lr_beta, config.adam_beta1,
                                     config.adam_beta2, config.adam_eps)
    Phis = prob.features([model.dictionary])
    Bs, ab = _engine.beta_update(prob, Phis, [model.coefficients], [adam_state],
                                 _penalty(config, model.S), model.loss_kind)
    return Bs[0], ab[0]


def theta_gradient(model: R2Model, data) -> np.ndarray:
    """Gradient of the data-fit term w.r.t. the trainable dictionary parameters."""
    prob = _problem(data, model.S)
    return _engine.theta_gradients(prob, [model.dictionary], [model.coefficients], model.loss_kind)[0]


def theta_step(model: R2Model, data, config: TrainConfig, adam_state: AdamState | None = None):
    """One Adam step on the dictionary; returns ``(dictionary, adam_state)``."""
    prob = _problem(data, model.S)
    if adam_state is None:
        adam_state = AdamState.zeros(model.dictionary.trainable_index.size, config.lr_theta,
                                     config.adam_beta1, config.adam_beta2, config.adam_eps)
    dicts, at = _engine.theta_update(prob, [model.dictionary], [model.coefficients],
                                     [adam_state], model.loss_kind)
    return dicts[0], at[0]


@dataclass
class Trace:
    rows: list
    best_round: int
    stopped_early: bool

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def to_csv(self, path, extra_columns=()):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            cols = list(TRACE_COLUMNS) + list(extra_columns)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])


def fit(data: MultiSourceDataset, dict_specs: Sequence[RepresenterSpec], config: TrainConfig,
        validation: MultiSourceDataset | None = None, callback=None):
    """Train an R2 model; returns ``(model, trace)``.

    With a validation set the returned parameters are those of the round with
    the lowest validation risk (penalties excluded), and training stops after
    ``early_stop_patience`` rounds without improvement.
    """
    prob = _problem(data)
    val = _problem(validation, data.S) if validation is not None else None
    rng = RandomStream(config.seed)
    dictionary = init_dictionary(dict_specs, rng.substream(0))
    if dictionary.input_dim != data.p:
        raise ConfigError(f"dictionary input dimension {dictionary.input_dim} != data dimension {data.p}")
    penalty = _penalty(config, data.S)

    def cb(rnd, dicts, Bs, row):
        callback(rnd, R2Model(dicts[0], Bs[0], config.loss, config), row)

    res = _engine.train(prob, val, [dictionary], penalty, config, cb if callback else None,
                        rng.substream(1))
    model = R2Model(res.dicts[0], res.Bs[0], config.loss, config)
    return model, Trace(res.trace, res.best_round, res.stopped_early)


def retrieved_set(model: R2Model, source: int, zero_tol: float = ZERO_TOL) -> set:
    """0-based indices of representers source ``source`` retrieves."""
    model._check_source(source)
    return set(np.flatnonzero(np.abs(model.coefficients[source]) > zero_tol).tolist())


def save_model(model, path):
    Path(path).write_text(json.dumps(model.to_dict(), indent=1))


def load_model(path):
    """Load an R2, BR2 or baseline checkpoint."""
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(d, dict):
        raise DataError(f"checkpoint {path} is not a JSON object")
    if d.get("kind") == "br2":
        from r2learn.br2 import BR2Model
        return BR2Model.from_dict(d)
    if d.get("kind") == "baseline":
        from r2learn.baselines import baseline_from_dict
        return baseline_from_dict(d)
    return R2Model.from_dict(d)

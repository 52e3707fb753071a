"""Blockwise representation retrieval (BR2) for blockwise-missing modalities.

Each modality ``m`` has its own dictionary, shared by the sources that observe
it (``O_m``). Source ``s`` predicts with the modalities it observes only:

    f_s = sum_{m in O^(s)} <Theta_m(x_m), beta_m^(s)>

Coefficients for unobserved (source, modality) pairs do not exist, and the SIP
of modality ``m`` counts sources in ``O_m`` only, with ``|O_m|`` in place of
``S`` in the normalizer.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from r2learn import _engine
from r2learn.data import MissingPattern, MultiSourceDataset
from r2learn.errors import ConfigError, ContractError, DataError
from r2learn.numerics import RandomStream
from r2learn.penalties import ZERO_TOL, integrativeness_exact
from r2learn.r2 import MODEL_SCHEMA, Trace, TrainConfig, _thaw
from r2learn.representers import RepresenterDictionary, RepresenterSpec, init_dictionary
from r2learn.serialize import decode_array, encode_array

log = logging.getLogger(__name__)


@dataclass
class BR2Model:
    dictionaries: list
    coefficients: list
    pattern: MissingPattern
    loss_kind: str = "squared"
    config: Optional[TrainConfig] = None

    def __post_init__(self):
        M = self.pattern.n_modalities
        if len(self.dictionaries) != M or len(self.coefficients) != M:
            raise ContractError(f"expected {M} dictionaries and coefficient blocks")
        for m in range(M):
            B = np.asarray(self.coefficients[m], dtype=np.float64)
            shape = (len(self.pattern.sources_observing(m)), self.dictionaries[m].size)
            if B.shape != shape:
                raise ContractError(f"modality {m} coefficients have shape {B.shape}, expected {shape}")
            self.coefficients[m] = B

    @property
    def S(self) -> int:
        return self.pattern.n_sources

    @property
    def M(self) -> int:
        return self.pattern.n_modalities

    def coefficient(self, source: int, m: int) -> np.ndarray:
        """``beta_m^(source)``; raises for an unobserved pair."""
        members = self.pattern.sources_observing(m)
        pos = np.searchsorted(members, source)
        if pos >= len(members) or members[pos] != source:
            raise ContractError(f"source {source} does not observe modality {m}; "
                                "it has no coefficients there")
        return self.coefficients[m][pos]

    def _check_blocks(self, source, blocks):
        if not 0 <= source < self.S:
            raise ContractError(f"source index {source} out of range for S={self.S}")
        want = set(self.pattern.modalities_of(source).tolist())
        got = set(int(m) for m in blocks)
        if got != want:
            raise ContractError(f"source {source} observes modalities {sorted(want)}, "
                                f"got inputs for {sorted(got)}")

    def predict_batch(self, source: int, blocks: dict) -> np.ndarray:
        """Scores for ``source`` from a mapping modality -> ``n x q_m`` covariates."""
        self._check_blocks(source, blocks)
        total = None
        for m in sorted(int(k) for k in blocks):
            out = self.dictionaries[m].forward_batch(blocks[m]) @ self.coefficient(source, m)
            total = out if total is None else total + out
        return total

    def predict_proba(self, source: int, blocks: dict) -> np.ndarray:
        return expit(self.predict_batch(source, blocks))

    def to_dict(self) -> dict:
        return {"schema": MODEL_SCHEMA, "kind": "br2", "loss_kind": self.loss_kind,
                "mask": encode_array(self.pattern.mask),
                "dictionaries": [d.to_dict() for d in self.dictionaries],
                "coefficients": [encode_array(B) for B in self.coefficients],
                "config": self.config.to_dict() if self.config else None}

    @classmethod
    def from_dict(cls, d: dict) -> "BR2Model":
        if d.get("schema") != MODEL_SCHEMA or d.get("kind") != "br2":
            raise DataError("not a BR2 checkpoint")
        cfg = TrainConfig.from_dict(d["config"]) if d.get("config") else None
        return cls([RepresenterDictionary.from_dict(x) for x in d["dictionaries"]],
                   [decode_array(B) for B in d["coefficients"]],
                   MissingPattern(decode_array(d["mask"])), d["loss_kind"], cfg)


def predict_blockwise(model: BR2Model, source: int, x_by_modality: dict) -> float:
    """Score of one sample given exactly the modalities ``source`` observes."""
    blocks = {m: np.asarray(v, dtype=np.float64)[None, :] for m, v in x_by_modality.items()}
    return float(model.predict_batch(source, blocks)[0])


def _problem(data: MultiSourceDataset, pattern: MissingPattern | None = None):
    if not data.is_blockwise:
        raise ContractError("blockwise models need a dataset with modality widths and a mask")
    if pattern is not None and data.pattern != pattern:
        raise ContractError(f"dataset pattern {data.pattern} does not match model pattern {pattern}")
    P = data.pattern
    return _engine.Problem(data, [(m, P.sources_observing(m)) for m in range(P.n_modalities)])


def _lambda1_blocks(config: TrainConfig, pattern: MissingPattern):
    S, M = pattern.mask.shape
    lam = np.asarray(_thaw(config.lambda1), dtype=np.float64)
    if lam.ndim == 0:
        lam = np.full((S, M), float(lam))
    elif lam.shape == (S,):
        lam = np.repeat(lam[:, None], M, axis=1)
    elif lam.shape != (S, M):
        raise ConfigError(f"lambda1 has shape {lam.shape}; expected scalar, ({S},) or ({S}, {M})")
    return [lam[pattern.sources_observing(m), m] for m in range(M)]


def _penalty(config: TrainConfig, pattern: MissingPattern, warn: bool = True):
    M = pattern.n_modalities
    if config.modality_lambda2 is not None:
        if len(config.modality_lambda2) != M:
            raise ConfigError(f"modality_lambda2 needs {M} entries")
        lam2 = list(config.modality_lambda2)
    else:
        lam2 = [config.sip.lambda2] * M
    sizes = [len(pattern.sources_observing(m)) for m in range(M)]
    if warn:
        lam2 = _engine.block_lambda2(lam2, sizes, [f"modality {m}" for m in range(M)])
    else:
        lam2 = [l2 if k >= 2 else 0.0 for l2, k in zip(lam2, sizes)]
    return _engine.Penalty(_lambda1_blocks(config, pattern), lam2, config.sip.tau)


def empirical_risk_blockwise(model: BR2Model, data: MultiSourceDataset, config: TrainConfig) -> float:
    prob = _problem(data, model.pattern)
    f = prob.predict(prob.features(model.dictionaries), model.coefficients)
    return prob.fit_value(f, model.loss_kind) + _penalty(config, model.pattern).value(model.coefficients)


def predictive_risk_blockwise(model: BR2Model, data: MultiSourceDataset) -> float:
    prob = _problem(data, model.pattern)
    return prob.fit_value(prob.predict(prob.features(model.dictionaries), model.coefficients),
                          model.loss_kind)


def source_rmse_blockwise(model: BR2Model, data: MultiSourceDataset) -> np.ndarray:
    prob = _problem(data, model.pattern)
    return prob.per_source_rmse(prob.predict(prob.features(model.dictionaries), model.coefficients))


def keyed_specs(dict_specs_by_modality):
    """Give every representer a globally unique ``init_key`` (running index)."""
    out, offset = [], 0
    for specs in dict_specs_by_modality:
        keyed = []
        for d, s in enumerate(specs):
            key = s.init_key if s.init_key is not None else offset + d
            keyed.append(dataclasses.replace(s, init_key=key))
        out.append(keyed)
        offset += len(specs)
    return out


def flatten_specs(dict_specs_by_modality, modality_dims):
    """Equivalent single-dictionary specs that read each modality through a view.

    Used to compare a fully observed BR2 problem with R2 on the concatenated
    covariates.
    """
    p = sum(modality_dims)
    flat, start = [], 0
    for specs, q in zip(keyed_specs(dict_specs_by_modality), modality_dims):
        for s in specs:
            if s.input_dim != q or s.view is not None:
                raise ConfigError("modality specs must take the whole modality as input")
            flat.append(dataclasses.replace(s, input_dim=p, view=(start, start + q)))
        start += q
    return flat


def fit_blockwise(data: MultiSourceDataset, dict_specs_by_modality: Sequence[Sequence[RepresenterSpec]],
                  config: TrainConfig, validation: MultiSourceDataset | None = None, callback=None):
    """Train a BR2 model; returns ``(model, trace)``.

    The trace's ``sip_by_block`` entries hold the exact SIP of each modality.
    """
    if not data.is_blockwise:
        raise ContractError("fit_blockwise needs a dataset with modality widths and a mask")
    pattern = data.pattern
    if len(dict_specs_by_modality) != pattern.n_modalities:
        raise ConfigError(f"need one dictionary per modality ({pattern.n_modalities}), "
                          f"got {len(dict_specs_by_modality)}")
    for m, specs in enumerate(dict_specs_by_modality):
        for s in specs:
            if s.input_dim != data.modality_dims[m]:
                raise ConfigError(f"modality {m} representers take {s.input_dim} inputs, "
                                  f"modality has {data.modality_dims[m]}")
    prob = _problem(data)
    val = _problem(validation, pattern) if validation is not None else None
    rng = RandomStream(config.seed)
    dicts = [init_dictionary(specs, rng.substream(0)) for specs in keyed_specs(dict_specs_by_modality)]
    penalty = _penalty(config, pattern)

    def cb(rnd, ds, Bs, row):
        callback(rnd, BR2Model(list(ds), Bs, pattern, config.loss, config), row)

    res = _engine.train(prob, val, dicts, penalty, config, cb if callback else None, rng.substream(1))
    model = BR2Model(list(res.dicts), list(res.Bs), pattern, config.loss, config)
    return model, Trace(res.trace, res.best_round, res.stopped_early)


def integrativeness_by_modality(model: BR2Model, zero_tol: float = ZERO_TOL) -> list:
    """Per modality, how many observing sources retrieve each representer."""
    return [integrativeness_exact(B, zero_tol) for B in model.coefficients]

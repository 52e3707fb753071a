"""Synthetic multi-source benchmarks and the dataset file format.

Two designs are generated:

* multi-task (:func:`gen_mtl`): ``S`` sources share covariates
  ``x ~ N(0, I_p)``; each source's response uses 5 of ``D_true`` ground-truth
  representers, the support drawn from one of five distributions ranging from
  fully shared to uniformly scattered.
* blockwise (:func:`gen_blockwise`): ``S = M = 4`` sources and modalities,
  one of three missing patterns, linear ground-truth representers given by an
  orthonormal basis per modality and 2 active representers per modality, of
  which ``I`` are shared by every source.

The ground-truth nonlinear representers are ``tanh(<w, x> + b)`` with
``||w|| = 1.5`` and ``b ~ N(0, 0.5^2)``; linear ones are ``<w, x>`` with
``||w|| = 1``. Modality covariances are AR(1) with correlations
``(0, 0.3, 0.5, 0.7)``. These are stand-ins chosen for this package, not a
published specification.

File layout (``.npz``: an uncompressed zip of ``.npy`` members with fixed
timestamps, read with ``allow_pickle=False``)::

    header                 uint8  UTF-8 JSON {schema_version, kind, setting, seed, replication}
    truth                  uint8  UTF-8 JSON ground-truth record (arrays base64 float64)
    mask                   bool   S x M (blockwise only)
    {split}/{s}/X          f8     n_s x p, masked blocks NaN
    {split}/{s}/y          f8     n_s
"""

from __future__ import annotations

import dataclasses
import io
import json
import zipfile
from dataclasses import dataclass
from typing import Optional

import numpy as np

from r2learn.data import SPLITS, MissingPattern, MultiSourceDataset, SourceData
from r2learn.errors import ConfigError, DataError
from r2learn.numerics import RandomStream
from r2learn.representers import RepresenterDictionary, RepresenterSpec
from r2learn.serialize import encode_array

SCHEMA_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)

# per distribution: candidate support indices (0-based) in a 30-representer truth
_SUPPORT_POOLS = {
    1: range(0, 5),
    2: range(0, 10),
    3: range(10, 15),
    4: range(10, 20),
}

AR1_RHO = (0.0, 0.3, 0.5, 0.7)


@dataclass(frozen=True)
class MtlSimSetting:
    support_distribution: int = 1
    coeff_sigma: float = 0.0
    S: int = 20
    p: int = 30
    D_true: int = 30
    n_train: int = 100
    n_eval: int = 1000
    support_size: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.support_distribution not in (1, 2, 3, 4, 5):
            raise ConfigError(f"support_distribution must be 1..5, got {self.support_distribution}")
        if self.coeff_sigma < 0:
            raise ConfigError("coeff_sigma must be >= 0")
        if self.D_true < 20:
            raise ConfigError("D_true must be >= 20 (distributions 3 and 4 use representers 11-20)")
        pool = self._pool()
        if self.support_size > len(pool):
            raise ConfigError(f"support_size {self.support_size} exceeds the {len(pool)} candidates "
                              f"of distribution {self.support_distribution}")
        if min(self.S, self.p, self.n_train, self.n_eval) < 1:
            raise ConfigError("S, p, n_train and n_eval must be positive")

    def _pool(self):
        if self.support_distribution == 5:
            return range(self.D_true)
        return _SUPPORT_POOLS[self.support_distribution]

    @property
    def n_linear(self) -> int:
        return self.D_true // 3


@dataclass(frozen=True)
class BlockSimSetting:
    L: int = 3
    I: int = 2
    sigma: float = 0.1
    S: int = 4
    M: int = 4
    q: int = 40
    n: int = 200
    rho: tuple = AR1_RHO
    seed: int = 0

    def __post_init__(self):
        if self.L not in (1, 2, 3):
            raise ConfigError(f"L must be 1, 2 or 3, got {self.L}")
        if self.I not in (0, 1, 2):
            raise ConfigError(f"I must be 0, 1 or 2, got {self.I}")
        if not self.sigma >= 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if (self.S, self.M) != (4, 4):
            raise ConfigError("the blockwise design is defined for S = M = 4")
        if self.q < 4 or self.n < 1:
            raise ConfigError("q must be >= 4 and n >= 1")
        object.__setattr__(self, "rho", tuple(float(r) for r in self.rho))
        if len(self.rho) != self.M or any(not -1 < r < 1 for r in self.rho):
            raise ConfigError("rho needs one correlation in (-1, 1) per modality")


@dataclass
class DatasetBundle:
    train: MultiSourceDataset
    validation: MultiSourceDataset
    test: MultiSourceDataset
    truth: dict
    header: dict

    def split(self, name: str) -> MultiSourceDataset:
        return {"train": self.train, "validation": self.validation, "test": self.test}[name]


def make_missing_pattern(L: int, S: int = 4, M: int = 4) -> MissingPattern:
    """The three 4 x 4 observation patterns; ``L`` modalities per source.

    L=1: source s observes modality s. L=2: s observes s and s+1 (mod 4).
    L=3: source s misses modality s-1 (mod 4), i.e. source 1 misses 4,
    source 2 misses 1, and so on.
    """
    if (S, M) != (4, 4) or L not in (1, 2, 3):
        raise ConfigError(f"missing patterns are defined for L in 1..3 and S = M = 4, got "
                          f"L={L}, S={S}, M={M}")
    mask = np.zeros((4, 4), dtype=bool)
    for s in range(4):
        if L == 1:
            mask[s, s] = True
        elif L == 2:
            mask[s, [s, (s + 1) % 4]] = True
        else:
            mask[s] = True
            mask[s, (s - 1) % 4] = False
    return MissingPattern(mask)


def _unit(gen, p, norm):
    v = gen.standard_normal(p)
    return norm * v / np.linalg.norm(v)


def mtl_truth_dictionary(setting: MtlSimSetting, stream: RandomStream) -> RepresenterDictionary:
    gen = stream.generator()
    p = setting.p
    specs, params = [], []
    for d in range(setting.D_true):
        if d < setting.n_linear:
            w = _unit(gen, p, 1.0)
            specs.append(RepresenterSpec("linear", p, trainable=False))
            params.append(w)
        else:
            w = _unit(gen, p, 1.5)
            b = gen.normal(0.0, 0.5)
            # tanh(<w, x> + b) as a one-unit MLP
            specs.append(RepresenterSpec("mlp", p, hidden=1, activation="tanh", trainable=False))
            params.append(np.concatenate([w, [b], [1.0], [0.0]]))
    return RepresenterDictionary(specs, np.concatenate(params))


def gen_mtl(setting: MtlSimSetting, replication: int = 0) -> DatasetBundle:
    """Train/validation/test splits plus the ground truth for one replication."""
    root = RandomStream(setting.seed, replication)
    truth_dict = mtl_truth_dictionary(setting, root.substream(0))
    gen = root.substream(1).generator()
    pool = np.array(list(setting._pool()))
    B = np.zeros((setting.S, setting.D_true))
    supports = []
    for s in range(setting.S):
        supp = np.sort(gen.choice(pool, size=setting.support_size, replace=False))
        B[s, supp] = gen.normal(1.0, setting.coeff_sigma, size=supp.size) if setting.coeff_sigma > 0 else 1.0
        supports.append(supp)

    def split(name, idx, n):
        sources = []
        for s in range(setting.S):
            g = root.substream(idx, s).generator()
            X = g.standard_normal((n, setting.p))
            y = truth_dict.forward_batch(X) @ B[s] + g.standard_normal(n)
            sources.append(SourceData(X, y))
        return MultiSourceDataset(sources, split=name)

    truth = {"kind": "mtl", "dictionary": truth_dict.to_dict(), "coefficients": encode_array(B),
             "supports": [s.tolist() for s in supports], "noise_sd": 1.0, "bayes_rmse": 1.0}
    header = _header("mtl", setting, replication)
    return DatasetBundle(split("train", 2, setting.n_train), split("validation", 3, setting.n_eval),
                         split("test", 4, setting.n_eval), truth, header)


def ar1_covariance(q: int, rho: float) -> np.ndarray:
    idx = np.arange(q)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def random_orthobasis(gen, q: int) -> np.ndarray:
    """Rows form an orthonormal basis of R^q (QR of a Gaussian matrix)."""
    Q, R = np.linalg.qr(gen.standard_normal((q, q)))
    Q = Q * np.sign(np.diag(R))[None, :]
    return np.ascontiguousarray(Q.T)


def gen_blockwise(setting: BlockSimSetting, replication: int = 0) -> DatasetBundle:
    """Blockwise-missing splits (same mask in every split) plus ground truth."""
    root = RandomStream(setting.seed, replication)
    pattern = make_missing_pattern(setting.L, setting.S, setting.M)
    S, M, q = setting.S, setting.M, setting.q
    gen = root.substream(0).generator()
    bases, shared, supports, coefs = [], [], [], []
    for m in range(M):
        bases.append(random_orthobasis(gen, q))
        pair = np.sort(gen.choice(q, size=2, replace=False))
        rest = np.setdiff1d(np.arange(q), pair)
        shared.append(pair)
        supp_m, coef_m = [], []
        for s in range(S):
            keep = np.sort(gen.choice(pair, size=setting.I, replace=False)) if setting.I else np.array([], int)
            extra = gen.choice(rest, size=2 - setting.I, replace=False)
            supp_m.append(np.concatenate([keep, extra]).astype(np.int64))
            coef_m.append(1.0 + gen.normal(0.0, setting.sigma, size=2) if setting.sigma > 0 else np.ones(2))
        supports.append(supp_m)
        coefs.append(coef_m)
    chol = [np.linalg.cholesky(ar1_covariance(q, r)) for r in setting.rho]

    def split(name, idx):
        sources = []
        for s in range(S):
            g = root.substream(idx, s).generator()
            X = np.full((setting.n, M * q), np.nan)
            signal = np.zeros(setting.n)
            for m in range(M):
                Z = g.standard_normal((setting.n, q)) @ chol[m].T
                if pattern.mask[s, m]:
                    X[:, m * q:(m + 1) * q] = Z
                    signal += (Z @ bases[m][supports[m][s]].T) @ coefs[m][s]
            y = signal + g.standard_normal(setting.n)
            sources.append(SourceData(X, y))
        return MultiSourceDataset(sources, (q,) * M, pattern, split=name)

    truth = {"kind": "blockwise", "bases": [encode_array(b) for b in bases],
             "shared_pairs": [p.tolist() for p in shared],
             "supports": [[s.tolist() for s in sm] for sm in supports],
             "coefficients": [[c.tolist() for c in cm] for cm in coefs],
             "mask": encode_array(pattern.mask), "noise_sd": 1.0, "bayes_rmse": 1.0}
    header = _header("blockwise", setting, replication)
    return DatasetBundle(split("train", 1), split("validation", 2), split("test", 3), truth, header)


def _header(kind, setting, replication):
    header = {"schema_version": SCHEMA_VERSION, "kind": kind,
              "setting": dataclasses.asdict(setting), "seed": setting.seed,
              "replication": int(replication)}
    # JSON-normalized so a header read back from disk compares equal
    return json.loads(json.dumps(header))


def setting_from_header(header: dict):
    kind = header.get("kind")
    cls = {"mtl": MtlSimSetting, "blockwise": BlockSimSetting}.get(kind)
    if cls is None:
        raise DataError(f"unknown dataset kind {kind!r}")
    s = dict(header["setting"])
    if "rho" in s:
        s["rho"] = tuple(s["rho"])
    return cls(**s)


def regenerate(header: dict) -> DatasetBundle:
    """Rebuild a bundle from its header (setting, seed, replication)."""
    setting = setting_from_header(header)
    fn = gen_mtl if header["kind"] == "mtl" else gen_blockwise
    return fn(setting, header["replication"])


def generate(setting, replication: int = 0) -> DatasetBundle:
    if isinstance(setting, MtlSimSetting):
        return gen_mtl(setting, replication)
    if isinstance(setting, BlockSimSetting):
        return gen_blockwise(setting, replication)
    raise ConfigError(f"unknown setting type {type(setting).__name__}")


def binarize(data: MultiSourceDataset) -> MultiSourceDataset:
    """Classification labels ``1{y > 0}``."""
    return data.with_sources([SourceData(s.X, (s.y > 0).astype(np.float64)) for s in data.sources])


def _json_bytes(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def write_dataset(path, bundle: DatasetBundle) -> None:
    arrays = {"header": _json_bytes(bundle.header), "truth": _json_bytes(bundle.truth)}
    if bundle.train.is_blockwise:
        arrays["mask"] = bundle.train.pattern.mask.copy()
        arrays["modality_dims"] = np.array(bundle.train.modality_dims, dtype=np.int64)
    for name in SPLITS:
        ds = bundle.split(name)
        for s, src in enumerate(ds.sources):
            arrays[f"{name}/{s}/X"] = src.X
            arrays[f"{name}/{s}/y"] = src.y
    # a fixed entry timestamp keeps files byte-identical across runs
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for key, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(key + ".npy", date_time=_ZIP_EPOCH), buf.getvalue())


def read_dataset(path) -> DatasetBundle:
    try:
        with np.load(path, allow_pickle=False) as z:
            files = {k: z[k] for k in z.files}
    except (OSError, ValueError, zipfile.BadZipFile, EOFError) as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    try:
        header = json.loads(files.pop("header").tobytes().decode("utf-8"))
        truth = json.loads(files.pop("truth").tobytes().decode("utf-8"))
    except (KeyError, ValueError) as exc:
        raise DataError(f"dataset {path} lacks a valid header: {exc}") from exc
    if header.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"dataset schema {header.get('schema_version')!r} is not supported "
                        f"(expected {SCHEMA_VERSION})")
    pattern = dims = None
    if "mask" in files:
        pattern = MissingPattern(files.pop("mask"))
        dims = tuple(int(q) for q in files.pop("modality_dims"))
    splits = {}
    for name in SPLITS:
        sources, s = [], 0
        while f"{name}/{s}/X" in files:
            sources.append(SourceData(files[f"{name}/{s}/X"], files[f"{name}/{s}/y"]))
            s += 1
        if not sources:
            raise DataError(f"dataset {path} has no {name} split")
        splits[name] = MultiSourceDataset(sources, dims, pattern, split=name)
    return DatasetBundle(splits["train"], splits["validation"], splits["test"], truth, header)


def truth_dictionary(truth: dict) -> Optional[RepresenterDictionary]:
    if truth.get("kind") != "mtl":
        return None
    return RepresenterDictionary.from_dict(truth["dictionary"])

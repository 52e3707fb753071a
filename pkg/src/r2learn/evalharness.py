"""Experiment orchestration: metrics, random-search tuning, Monte Carlo
replications and result files.

A replication generates its datasets from stream ``replication`` of the
simulation setting, tunes each method on the validation split, and reports
per-source test RMSE for the best trial. Every method of a replication uses
the same training seed and the same hyperparameter draws (each hyperparameter
has its own random sub-stream), so methods that differ in one setting are
compared on equal footing.

Output files (in ``output_dir``)::

    results.csv   replication, method, source, rmse, params_json, sip_exact,
                  complexity_stat, status, message   (source "avg" = mean over sources)
    timings.csv   replication, method, wall_ms
    trials.csv    replication, method, trial, params_json, score, error
    summary.json  mean / sd per method and source
    summary.md    the same as "mean(sd)" tables
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from r2learn import _engine, baselines, br2, r2
from r2learn.datagen import BlockSimSetting, DatasetBundle, MtlSimSetting, generate, read_dataset
from r2learn.errors import ConfigError, ExperimentError, R2Error
from r2learn.numerics import RandomStream
from r2learn.representers import dictionary_specs

log = logging.getLogger(__name__)

RESULTS_SCHEMA = "r2learn.results/1"
RESULT_COLUMNS = ("replication", "method", "source", "rmse", "params_json", "sip_exact",
                  "complexity_stat", "status", "message")
TIMING_COLUMNS = ("replication", "method", "wall_ms")
TRIAL_COLUMNS = ("replication", "method", "trial", "params_json", "score", "error")

MODELS = ("r2", "br2") + baselines.METHODS
SCALES = ("log", "uniform")

# default random-search ranges for R2 / BR2
DEFAULT_SEARCH = {
    "lambda1": ("log", 1e-4, 1.0),
    "sip.lambda2": ("log", 1e-4, 10.0),
    "sip.tau": ("uniform", 0.01, 0.5),
    "lr_theta": ("log", 1e-4, 1e-1),
}

# sub-stream keys under RandomStream(seed, replication)
_SEED_KEY = 1
_TUNE_KEY = 2


def rmse(predictions, targets) -> float:
    pred = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if pred.shape != y.shape:
        raise ConfigError(f"predictions {pred.shape} and targets {y.shape} differ in shape")
    if y.size == 0:
        raise ConfigError("rmse of an empty vector")
    return float(np.sqrt(np.mean((pred - y) ** 2)))


@dataclass(frozen=True)
class SearchDim:
    scale: str
    low: float
    high: float

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ConfigError(f"search scale must be one of {SCALES}, got {self.scale!r}")
        if not self.low <= self.high:
            raise ConfigError(f"search range [{self.low}, {self.high}] is empty")
        if self.scale == "log" and self.low <= 0:
            raise ConfigError("log-scale search ranges must be positive")

    @classmethod
    def parse(cls, value) -> "SearchDim":
        if isinstance(value, SearchDim):
            return value
        if isinstance(value, dict):
            return cls(value.get("scale", "log"), float(value["low"]), float(value["high"]))
        scale, low, high = value
        return cls(scale, float(low), float(high))

    def sample(self, gen: np.random.Generator, size: int) -> np.ndarray:
        u = gen.random(size)
        if self.scale == "log":
            lo, hi = math.log(self.low), math.log(self.high)
            return np.exp(lo + u * (hi - lo))
        return self.low + u * (self.high - self.low)


def _dim_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def sample_trials(space: dict, budget: int, stream: RandomStream) -> list:
    """``budget`` hyperparameter draws; each name has its own sub-stream."""
    if budget < 1:
        raise ConfigError("tuning budget must be >= 1")
    cols = {name: SearchDim.parse(dim).sample(stream.substream(_dim_key(name)).generator(), budget)
            for name, dim in sorted(space.items())}
    return [{name: float(cols[name][t]) for name in cols} for t in range(budget)]


def tune(space: dict, budget: int, scorer, stream: RandomStream):
    """Random search; returns ``(best_params, trials)``.

    ``scorer(params)`` returns a validation RMSE (lower is better). Ties go
    to the earlier trial. A trial that raises is logged with its error and
    scored as failed; if every trial fails, :class:`ExperimentError` is raised.
    """
    trials, best = [], None
    for t, params in enumerate(sample_trials(space, budget, stream)):
        try:
            score, error = float(scorer(params)), ""
        except (R2Error, FloatingPointError, np.linalg.LinAlgError) as exc:
            score, error = math.inf, f"{type(exc).__name__}: {exc}"
        if not np.isfinite(score) and not error:
            error = "non-finite score"
            score = math.inf
        trials.append({"trial": t, "params": params, "score": score, "error": error})
        if not error and (best is None or score < trials[best]["score"]):
            best = t
    if best is None:
        raise ExperimentError(f"all {budget} tuning trials failed; first error: {trials[0]['error']}")
    return dict(trials[best]["params"]), trials


@dataclass(frozen=True)
class MethodSpec:
    """One compared method.

    ``model`` is ``r2``, ``br2`` or a baseline (``stl``, ``pooling``,
    ``mtrl``). ``train`` holds training options (``TrainConfig`` fields for
    R2/BR2, ``BaselineSpec`` fields for baselines), ``dictionary`` the
    dictionary layout (``kind``, ``size``, ``hidden``, ``n_linear``; for BR2
    one such dictionary per modality), and ``search`` the tuned options as
    ``{dotted_name: [scale, low, high]}``.
    """

    name: str
    model: str
    family: str = "linear"
    dictionary: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    search: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"method {self.name!r}: model must be one of {MODELS}, got {self.model!r}")
        if self.model in baselines.METHODS and self.family not in baselines.FAMILIES:
            raise ConfigError(f"method {self.name!r}: family must be one of {baselines.FAMILIES}")
        if "interactions" in self.dictionary:
            raise ConfigError(f"method {self.name!r}: interaction dictionaries across modalities "
                              "are not supported; use one dictionary per modality")
        unknown = set(self.dictionary) - {"kind", "size", "hidden", "n_linear"}
        if unknown:
            raise ConfigError(f"method {self.name!r}: unknown dictionary option(s) {sorted(unknown)}")
        search = DEFAULT_SEARCH if self.search == "default" else self.search
        object.__setattr__(self, "search", {k: SearchDim.parse(v) for k, v in search.items()})
        # validate option names by building a config once
        self.build_options({k: d.low for k, d in self.search.items()}, seed=0)

    @property
    def is_baseline(self) -> bool:
        return self.model in baselines.METHODS

    def build_options(self, params: dict, seed: int):
        """Training options with the tuned ``params`` applied."""
        opts = json.loads(json.dumps(self.train))
        for name, value in params.items():
            _set_dotted(opts, name, value)
        if self.is_baseline:
            opts.update(method=self.model, family=self.family, seed=seed)
            names = {f.name for f in dataclasses.fields(baselines.BaselineSpec)}
            unknown = set(opts) - names
            if unknown:
                raise ConfigError(f"method {self.name!r}: unknown option(s) {sorted(unknown)}")
            return baselines.BaselineSpec(**opts)
        opts["seed"] = seed
        try:
            return r2.TrainConfig.from_dict(opts)
        except TypeError as exc:
            raise ConfigError(f"method {self.name!r}: {exc}") from exc

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["search"] = {k: [v.scale, v.low, v.high] for k, v in self.search.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MethodSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown method option(s): {sorted(unknown)}")
        return cls(**d)


def _set_dotted(tree: dict, name: str, value):
    keys = name.split(".")
    for k in keys[:-1]:
        tree = tree.setdefault(k, {})
    tree[keys[-1]] = value


@dataclass(frozen=True)
class ExperimentConfig:
    methods: tuple
    setting: object = None
    dataset: Optional[str] = None
    replications: int = 20
    tuning_budget: int = 30
    seed: int = 0
    output_dir: Optional[str] = None
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(
            m if isinstance(m, MethodSpec) else MethodSpec.from_dict(m) for m in self.methods))
        if not self.methods:
            raise ConfigError("an experiment needs at least one method")
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise ConfigError(f"method names must be unique, got {names}")
        if (self.setting is None) == (self.dataset is None):
            raise ConfigError("give exactly one of a simulation setting or a dataset path")
        if self.setting is not None and not isinstance(self.setting, (MtlSimSetting, BlockSimSetting)):
            raise ConfigError(f"unsupported setting type {type(self.setting).__name__}")
        if self.replications < 1 or self.tuning_budget < 1 or self.workers < 1:
            raise ConfigError("replications, tuning_budget and workers must be >= 1")


@dataclass
class FittedMethod:
    """A trained model behind a uniform evaluation interface."""

    kind: str
    model: object
    trace: object = None

    def source_rmse(self, data) -> np.ndarray:
        if self.kind == "r2":
            return r2.source_rmse(self.model, data)
        if self.kind == "br2":
            return br2.source_rmse_blockwise(self.model, data)
        return self.model.source_rmse(data)

    def diagnostics(self):
        """``(sip_exact, complexity_stat)``; NaN for baselines."""
        if self.kind == "r2":
            sips, cstat = _engine.diagnostics([self.model.coefficients])
        elif self.kind == "br2":
            sips, cstat = _engine.diagnostics(self.model.coefficients)
        else:
            return math.nan, math.nan
        return float(sum(sips)), float(cstat)


def fit_method(method: MethodSpec, bundle: DatasetBundle, params: dict, seed: int) -> FittedMethod:
    """Train ``method`` on the train split (validation drives early stopping)."""
    opts = method.build_options(params, seed)
    train, val = bundle.train, bundle.validation
    if method.is_baseline:
        return FittedMethod("baseline", baselines.fit_baseline(train, opts, val))
    d = dict(method.dictionary)
    kind, size = d.get("kind", "mixed"), d.get("size", 30)
    hidden, n_linear = d.get("hidden", 32), d.get("n_linear")
    if method.model == "r2":
        specs = dictionary_specs(kind, train.p, size, hidden, n_linear)
        model, trace = r2.fit(train, specs, opts, validation=val)
        return FittedMethod("r2", model, trace)
    if not train.is_blockwise:
        raise ConfigError(f"method {method.name!r}: br2 needs blockwise data")
    specs = [dictionary_specs(kind, q, size, hidden, n_linear) for q in train.modality_dims]
    model, trace = br2.fit_blockwise(train, specs, opts, validation=val)
    return FittedMethod("br2", model, trace)


def replication_seed(seed: int, replication: int) -> int:
    """Training seed shared by every method of a replication."""
    gen = RandomStream(seed, replication).substream(_SEED_KEY).generator()
    return int(gen.integers(0, 2**62))


def load_bundle(config: ExperimentConfig, replication: int) -> DatasetBundle:
    if config.setting is not None:
        return generate(config.setting, replication)
    return read_dataset(config.dataset)


def tune_and_fit(method: MethodSpec, bundle: DatasetBundle, budget: int, seed: int,
                 stream: RandomStream):
    """Random-search ``method`` on the validation split; returns ``(fitted, params, trials)``.

    The returned model is the best trial's fit. Training is deterministic
    given the seed, so refitting the chosen parameters reproduces it exactly.
    """
    kept = {}

    def scorer(params):
        fitted = fit_method(method, bundle, params, seed)
        score = float(np.mean(fitted.source_rmse(bundle.validation)))
        if not kept or score < kept["score"]:
            kept.update(score=score, fitted=fitted)
        return score

    if not method.search:
        scorer({})
        return kept["fitted"], {}, []
    params, trials = tune(method.search, budget, scorer, stream)
    return kept["fitted"], params, trials


def tuning_stream(seed: int, replication: int) -> RandomStream:
    return RandomStream(seed, replication).substream(_TUNE_KEY)


def run_replication(config: ExperimentConfig, method: MethodSpec, replication: int,
                    bundle: DatasetBundle | None = None):
    """Tune, train and test one method on one replication.

    Returns ``(rows, trials)``. A failing method yields a single row with
    ``status="failed"`` and the reason, never an exception.
    """
    bundle = bundle if bundle is not None else load_bundle(config, replication)
    seed = replication_seed(config.seed, replication)
    start = time.perf_counter()
    trials = []
    base = {"replication": replication, "method": method.name}
    try:
        fitted, params, trials = tune_and_fit(method, bundle, config.tuning_budget, seed,
                                              tuning_stream(config.seed, replication))
        per_source = fitted.source_rmse(bundle.test)
        sip, cstat = fitted.diagnostics()
    except (R2Error, np.linalg.LinAlgError) as exc:
        log.warning("replication %d, method %s failed: %s", replication, method.name, exc)
        wall = (time.perf_counter() - start) * 1e3
        return [dict(base, source="avg", rmse=math.nan, params_json="", sip_exact=math.nan,
                     complexity_stat=math.nan, status="failed",
                     message=f"{type(exc).__name__}: {exc}", wall_ms=wall)], trials
    wall = (time.perf_counter() - start) * 1e3
    pjson = json.dumps(params, sort_keys=True)
    common = dict(base, params_json=pjson, sip_exact=sip, complexity_stat=cstat,
                  status="ok", message="", wall_ms=wall)
    rows = [dict(common, source=str(s), rmse=float(v)) for s, v in enumerate(per_source)]
    rows.append(dict(common, source="avg", rmse=float(np.mean(per_source))))
    return rows, trials


def _run_one(args):
    config, replication = args
    bundle = load_bundle(config, replication)
    out = []
    for method in config.methods:
        log.info("replication %d: %s", replication, method.name)
        out.append(run_replication(config, method, replication, bundle))
    return replication, out


@dataclass
class ExperimentResult:
    rows: list
    trials: list
    summary: dict

    def frame(self, method: str, source: str = "avg") -> np.ndarray:
        """RMSE per replication for one method and source (NaN for failures)."""
        return np.array([r["rmse"] for r in self.rows
                         if r["method"] == method and r["source"] == source], dtype=np.float64)

    def column(self, method: str, name: str, source: str = "avg") -> np.ndarray:
        return np.array([r[name] for r in self.rows
                         if r["method"] == method and r["source"] == source], dtype=np.float64)


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run every replication (optionally across worker processes) and write the result files."""
    jobs = [(config, r) for r in range(config.replications)]
    workers = config.workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(_run_one, jobs))
    else:
        done = [_run_one(j) for j in jobs]
    rows, trials = [], []
    for replication, per_method in sorted(done, key=lambda t: t[0]):
        for method, (mrows, mtrials) in zip(config.methods, per_method):
            rows.extend(mrows)
            trials.extend(dict(t, replication=replication, method=method.name) for t in mtrials)
    result = ExperimentResult(rows, trials, summarize(rows, [m.name for m in config.methods]))
    if config.output_dir is not None:
        write_results(config.output_dir, result)
    return result


def _mean_sd(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    sd = float(np.std(v, ddof=1)) if v.size > 1 else math.nan
    return float(np.mean(v)), sd


def format_mean_sd(mean: float, sd: float, digits: int = 3) -> str:
    """``3.687(1.186)`` style cell."""
    if math.isnan(mean):
        return "NA"
    sd_txt = "NA" if math.isnan(sd) else f"{sd:.{digits}f}"
    return f"{mean:.{digits}f}({sd_txt})"


def summarize(rows: list, methods: list) -> dict:
    """Mean and sample sd of test RMSE per method and source, over successful replications."""
    out = {"schema": RESULTS_SCHEMA, "methods": {}}
    for name in methods:
        mine = [r for r in rows if r["method"] == name]
        failed = [{"replication": r["replication"], "message": r["message"]}
                  for r in mine if r["status"] != "ok"]
        ok = [r for r in mine if r["status"] == "ok"]
        sources = sorted({r["source"] for r in ok if r["source"] != "avg"}, key=int)
        entry = {"n_ok": len({r["replication"] for r in ok}), "n_failed": len(failed),
                 "failures": failed, "sources": {}}
        for src in sources + ["avg"]:
            m, sd = _mean_sd([r["rmse"] for r in ok if r["source"] == src])
            entry["sources"][src] = {"mean": m, "sd": sd}
        avg = [r for r in ok if r["source"] == "avg"]
        for key in ("sip_exact", "complexity_stat"):
            m, sd = _mean_sd([r[key] for r in avg])
            entry[key] = {"mean": m, "sd": sd}
        out["methods"][name] = entry
    return out


def summary_markdown(summary: dict) -> str:
    methods = summary["methods"]
    sources = sorted({s for e in methods.values() for s in e["sources"] if s != "avg"}, key=int)
    head = ["method", "average"] + [f"source {s}" for s in sources] + ["sip_exact", "failed"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for name, e in methods.items():
        cells = [name, format_mean_sd(**e["sources"].get("avg", {"mean": math.nan, "sd": math.nan}))]
        for s in sources:
            cells.append(format_mean_sd(**e["sources"].get(s, {"mean": math.nan, "sd": math.nan})))
        cells += [format_mean_sd(**e["sip_exact"]), str(e["n_failed"])]
        lines.append("| " + " | ".join(cells) + " |")
    return "Test RMSE, mean(sd) over replications\n\n" + "\n".join(lines) + "\n"


def _cell(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def write_results(output_dir, result: ExperimentResult) -> None:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS)
        for r in result.rows:
            w.writerow([_cell(r[c]) for c in RESULT_COLUMNS])
    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TIMING_COLUMNS)
        for r in result.rows:
            if r["source"] == "avg":
                w.writerow([r["replication"], r["method"], f"{r['wall_ms']:.1f}"])
    with open(out / "trials.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRIAL_COLUMNS)
        for t in result.trials:
            w.writerow([t["replication"], t["method"], t["trial"],
                        json.dumps(t["params"], sort_keys=True), _cell(t["score"]), t["error"]])
    (out / "summary.json").write_text(json.dumps(_jsonable(result.summary), indent=1, sort_keys=True))
    (out / "summary.md").write_text(summary_markdown(result.summary))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def read_results(path) -> list:
    """Rows of a ``results.csv`` with numeric fields parsed."""
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            r["replication"] = int(r["replication"])
            for k in ("rmse", "sip_exact", "complexity_stat"):
                r[k] = float(r[k]) if r[k] else math.nan
            rows.append(r)
    return rows


def default_workers() -> int:
    """Worker count from ``R2LEARN_WORKERS`` (default 1)."""
    raw = os.environ.get("R2LEARN_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"R2LEARN_WORKERS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError("R2LEARN_WORKERS must be >= 1")
    return n

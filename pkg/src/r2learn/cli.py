"""Command-line interface: ``r2learn {simulate,train,evaluate,benchmark,inspect}``.

Configs are YAML or JSON documents (see ``examples/configs`` in the README).
Unknown keys are rejected with the nearest valid key suggested, and
``key=value`` overrides are applied after the file. Every command writes the
fully resolved config and a provenance record next to its outputs. Logs go
to stderr; data goes to files (``inspect`` also prints its table).

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error,
5 internal error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import difflib
import hashlib
import io
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import scipy
import yaml

import r2learn
from r2learn import baselines, br2, datagen, evalharness, r2
from r2learn.errors import ConfigError, DataError, R2Error
from r2learn.penalties import (
    SipParams,
    complexity_stat,
    gamma_smoothed,
    integrativeness_exact,
    sip_exact,
)

log = logging.getLogger("r2learn")

TOP_KEYS = ("setting", "dataset", "methods", "replications", "tuning", "seed", "output",
            "workers", "train", "dictionary")
DEFAULT_OUTPUT = "r2learn-out"
SETTINGS = {"mtl": datagen.MtlSimSetting, "blockwise": datagen.BlockSimSetting}
DICTIONARY_DEFAULTS = {"kind": "mixed", "size": 30, "hidden": 32, "n_linear": None}
# values that may be a scalar or a list of numbers
_LISTY = {"lambda1", "modality_lambda2", "rho"}


def _suggest(key, valid):
    close = difflib.get_close_matches(str(key), [str(v) for v in valid], n=1, cutoff=0.5)
    return f"; did you mean {close[0]!r}?" if close else f"; valid keys: {sorted(valid)}"


def _reject_unknown(d, valid, path):
    for key in d:
        if key not in valid:
            where = f"{path}.{key}" if path else str(key)
            raise ConfigError(f"{where}: unknown key{_suggest(key, valid)}")


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _coerce(value, default, path, key):
    """Check ``value`` against the type of ``default`` (numeric strings become floats)."""
    where = f"{path}.{key}" if path else key
    if key in _LISTY:
        if value is None and default is None:
            return value
        if _is_number(value) or (isinstance(value, list) and all(
                _is_number(v) or (isinstance(v, list) and all(_is_number(u) for u in v)) for v in value)):
            return value
        raise ConfigError(f"{where}: expected a number or a list of numbers, got {value!r}")
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: expected true/false, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if isinstance(default, float):
        if _is_number(value):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if isinstance(default, str):
        if isinstance(value, str):
            return value
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def _check_section(d, defaults: dict, path):
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(d).__name__}")
    _reject_unknown(d, defaults, path)
    return {k: _coerce(v, defaults[k], path, k) for k, v in d.items()}


def _field_defaults(cls, skip=()):
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        else:
            out[f.name] = f.default_factory() if f.default_factory is not dataclasses.MISSING else None
    return out


_TRAIN_DEFAULTS = _field_defaults(r2.TrainConfig, skip=("seed", "sip"))
_SIP_DEFAULTS = _field_defaults(SipParams)
_BASELINE_DEFAULTS = _field_defaults(baselines.BaselineSpec, skip=("method", "family", "seed"))


def _check_train(d, path):
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a mapping")
    if "seed" in d:
        raise ConfigError(f"{path}.seed: training seeds derive from the top-level 'seed'")
    _reject_unknown(d, list(_TRAIN_DEFAULTS) + ["sip"], path)
    out = {k: _coerce(v, _TRAIN_DEFAULTS[k], path, k) for k, v in d.items() if k != "sip"}
    if "sip" in d:
        out["sip"] = _check_section(d["sip"], _SIP_DEFAULTS, f"{path}.sip")
    return out


def _deep_merge(base: dict, top: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in top.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _train_full(partial: dict) -> dict:
    """All TrainConfig options (defaults filled), without the seed."""
    full = r2.TrainConfig().to_dict()
    full.pop("seed")
    return _deep_merge(full, partial)


def _parse_value(text: str):
    for parse in (json.loads, yaml.safe_load):
        try:
            return parse(text)
        except (ValueError, yaml.YAMLError):
            continue
    return text


def apply_override(tree: dict, assignment: str) -> None:
    """Apply ``dotted.key=value``; list items are addressed by index (``methods.0.name``).

    A path that starts with a training option (``lambda1``, ``sip.lambda2``,
    ...) rather than a top-level key is read as ``train.<path>``.
    """
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    if parts[0] not in TOP_KEYS:
        if parts[0] in _TRAIN_DEFAULTS or parts[0] == "sip":
            parts = ["train"] + parts
        else:
            raise ConfigError(f"override {key}: unknown key{_suggest(parts[0], TOP_KEYS)}")
    node = tree
    for i, part in enumerate(parts[:-1]):
        nxt = parts[i + 1]
        if isinstance(node, list):
            try:
                node = node[int(part)]
            except (ValueError, IndexError) as exc:
                raise ConfigError(f"override {key}: bad list index {part!r}") from exc
            continue
        if part not in node or node[part] is None:
            node[part] = [] if nxt.isdigit() else {}
        node = node[part]
    last = parts[-1]
    value = _parse_value(text)
    if isinstance(node, list):
        try:
            node[int(last)] = value
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"override {key}: bad list index {last!r}") from exc
    else:
        node[last] = value


@dataclasses.dataclass
class RunConfig:
    """A parsed, validated config; ``resolved`` is the echoed document."""

    resolved: dict
    setting: object
    dataset: str | None
    methods: list
    replications: int
    tuning_budget: int
    seed: int
    output: str
    workers: int

    def experiment(self) -> evalharness.ExperimentConfig:
        if not self.methods:
            raise ConfigError("methods: at least one method is required")
        return evalharness.ExperimentConfig(
            tuple(self.methods), self.setting, self.dataset, self.replications,
            self.tuning_budget, self.seed, self.output, self.workers)

    def method(self, name: str | None) -> evalharness.MethodSpec:
        if not self.methods:
            raise ConfigError("methods: at least one method is required")
        if name is None:
            return self.methods[0]
        names = [m.name for m in self.methods]
        if name not in names:
            raise ConfigError(f"--method {name!r} is not configured{_suggest(name, names)}")
        return self.methods[names.index(name)]


def _resolve_setting(d):
    if d is None:
        return None, None
    if not isinstance(d, dict) or "kind" not in d:
        raise ConfigError("setting: expected a mapping with 'kind' (mtl or blockwise)")
    kind = d["kind"]
    if kind not in SETTINGS:
        raise ConfigError(f"setting.kind: unknown kind {kind!r}{_suggest(kind, SETTINGS)}")
    cls = SETTINGS[kind]
    fields = {k: v for k, v in d.items() if k != "kind"}
    checked = _check_section(fields, _field_defaults(cls), "setting")
    if "rho" in checked:
        checked["rho"] = tuple(checked["rho"])
    setting = cls(**checked)
    resolved = {"kind": kind, **dataclasses.asdict(setting)}
    if "rho" in resolved:
        resolved["rho"] = list(resolved["rho"])
    return setting, resolved


def _resolve_method(i, d, train_defaults, dict_defaults):
    path = f"methods[{i}]"
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a mapping")
    valid = ("name", "model", "family", "dictionary", "train", "search")
    _reject_unknown(d, valid, path)
    for req in ("name", "model"):
        if req not in d:
            raise ConfigError(f"{path}.{req}: missing required field")
    model = d["model"]
    if model not in evalharness.MODELS:
        raise ConfigError(f"{path}.model: unknown model {model!r}{_suggest(model, evalharness.MODELS)}")
    out = {"name": str(d["name"]), "model": model}
    search = d.get("search", {})
    if search == "default":
        search = {k: list(v) for k, v in evalharness.DEFAULT_SEARCH.items()}
    if not isinstance(search, dict):
        raise ConfigError(f"{path}.search: expected a mapping or 'default'")
    if model in baselines.METHODS:
        out["family"] = d.get("family", "linear")
        if "dictionary" in d:
            raise ConfigError(f"{path}.dictionary: baselines take no dictionary")
        out["train"] = _deep_merge(_BASELINE_DEFAULTS,
                                   _check_section(d.get("train", {}), _BASELINE_DEFAULTS, f"{path}.train"))
        valid_search = list(_BASELINE_DEFAULTS)
    else:
        if "family" in d:
            raise ConfigError(f"{path}.family: only baselines have a family")
        out["dictionary"] = _deep_merge(
            dict_defaults, _check_section(d.get("dictionary", {}), DICTIONARY_DEFAULTS, f"{path}.dictionary"))
        out["train"] = _train_full(_deep_merge(train_defaults, _check_train(d.get("train", {}),
                                                                            f"{path}.train")))
        valid_search = [k for k in _TRAIN_DEFAULTS] + [f"sip.{k}" for k in _SIP_DEFAULTS]
    for key, dim in search.items():
        if key not in valid_search:
            raise ConfigError(f"{path}.search.{key}: unknown option{_suggest(key, valid_search)}")
        try:
            evalharness.SearchDim.parse(dim)
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"{path}.search.{key}: expected [scale, low, high], got {dim!r}") from exc
    dims = {k: evalharness.SearchDim.parse(v) for k, v in search.items()}
    out["search"] = {k: [d.scale, d.low, d.high] for k, d in dims.items()}
    return out


def parse_config(path=None, overrides=()) -> RunConfig:
    """Load, override, validate and resolve a config (``path=None`` starts empty)."""
    tree = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            tree = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML/JSON: {exc}") from exc
        tree = {} if tree is None else tree
        if not isinstance(tree, dict):
            raise ConfigError(f"config {path}: top level must be a mapping")
    for assignment in overrides:
        apply_override(tree, assignment)
    _reject_unknown(tree, TOP_KEYS, "")

    setting, setting_resolved = _resolve_setting(tree.get("setting"))
    dataset = tree.get("dataset")
    if dataset is not None and not isinstance(dataset, str):
        raise ConfigError("dataset: expected a file path")
    if setting is not None and dataset is not None:
        raise ConfigError("give either 'setting' or 'dataset', not both")
    tuning = _check_section(tree.get("tuning", {}), {"budget": 30, "strategy": "random_search"}, "tuning")
    if tuning.get("strategy", "random_search") != "random_search":
        raise ConfigError(f"tuning.strategy: only 'random_search' is supported, got {tuning['strategy']!r}")
    top = _check_section({k: tree[k] for k in ("replications", "seed", "output", "workers") if k in tree},
                         {"replications": 20, "seed": 0, "output": DEFAULT_OUTPUT, "workers": 1}, "")
    train_defaults = _check_train(tree.get("train", {}), "train")
    dict_defaults = _deep_merge(DICTIONARY_DEFAULTS,
                                _check_section(tree.get("dictionary", {}), DICTIONARY_DEFAULTS, "dictionary"))
    raw_methods = tree.get("methods", [])
    if not isinstance(raw_methods, list):
        raise ConfigError("methods: expected a list")
    methods_resolved = [_resolve_method(i, m, train_defaults, dict_defaults)
                        for i, m in enumerate(raw_methods)]
    try:
        methods = [evalharness.MethodSpec.from_dict(m) for m in methods_resolved]
    except TypeError as exc:
        raise ConfigError(f"methods: {exc}") from exc

    workers = top.get("workers")
    if workers is None:
        workers = evalharness.default_workers()
    resolved = {
        "setting": setting_resolved,
        "dataset": dataset,
        "methods": methods_resolved,
        "replications": top.get("replications", 20),
        "tuning": {"budget": tuning.get("budget", 30), "strategy": "random_search"},
        "seed": top.get("seed", 0),
        "output": top.get("output", DEFAULT_OUTPUT),
        "workers": workers,
    }
    if resolved["replications"] < 1 or resolved["tuning"]["budget"] < 1 or workers < 1:
        raise ConfigError("replications, tuning.budget and workers must be >= 1")
    return RunConfig(resolved, setting, dataset, methods, resolved["replications"],
                     resolved["tuning"]["budget"], resolved["seed"], resolved["output"], workers)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_provenance(out: Path, command: str, args, cfg: RunConfig | None, inputs=(), extra=None):
    """Resolved config, seeds, versions and input hashes for exact reruns."""
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "argv": list(args.argv),
        "config_file": str(args.config) if args.config else None,
        "overrides": list(args.overrides),
        "resolved_config": cfg.resolved if cfg is not None else None,
        "seed": cfg.seed if cfg is not None else None,
        "versions": {"r2learn": r2learn.__version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__, "pyyaml": yaml.__version__},
        "inputs": {str(p): _sha256(p) for p in inputs},
    }
    if extra:
        record.update(extra)
    (out / "provenance.json").write_text(json.dumps(record, indent=1, sort_keys=True))
    if cfg is not None:
        (out / "resolved_config.yaml").write_text(yaml.safe_dump(cfg.resolved, sort_keys=False))


def _output_dir(args, cfg) -> Path:
    if args.output:
        return Path(args.output)
    return Path(cfg.output if cfg is not None else DEFAULT_OUTPUT)


def _load_config(args):
    return parse_config(args.config, args.overrides)


def cmd_simulate(args):
    cfg = _load_config(args)
    if cfg.setting is None:
        raise ConfigError("simulate needs a 'setting' section")
    out = _output_dir(args, cfg)
    data_dir = out / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    reps = [args.replication] if args.replication is not None else range(cfg.replications)
    files = {}
    for r in reps:
        path = data_dir / f"rep{r:03d}.npz"
        datagen.write_dataset(path, datagen.generate(cfg.setting, r))
        files[str(path)] = _sha256(path)
        log.info("wrote %s", path)
    write_provenance(out, "simulate", args, cfg, extra={"outputs": files})
    return 0


def _bundle_for_training(args, cfg):
    if args.dataset or cfg.dataset:
        path = args.dataset or cfg.dataset
        bundle = datagen.read_dataset(path)
        return bundle, int(bundle.header.get("replication", 0)), [path]
    if cfg.setting is None:
        raise ConfigError("train needs a 'dataset' path or a 'setting'")
    r = args.replication or 0
    return datagen.generate(cfg.setting, r), r, []


def cmd_train(args):
    cfg = _load_config(args)
    method = cfg.method(args.method)
    bundle, replication, inputs = _bundle_for_training(args, cfg)
    out = _output_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    seed = evalharness.replication_seed(cfg.seed, replication)
    fitted, params, trials = evalharness.tune_and_fit(
        method, bundle, cfg.tuning_budget, seed, evalharness.tuning_stream(cfg.seed, replication))
    r2.save_model(fitted.model, out / "model.json")
    if fitted.trace is not None:
        fitted.trace.to_csv(out / "trace.csv")
    if trials:
        with open(out / "trials.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("trial", "params_json", "score", "error"))
            for t in trials:
                w.writerow((t["trial"], json.dumps(t["params"], sort_keys=True), repr(t["score"]), t["error"]))
    val = fitted.source_rmse(bundle.validation)
    log.info("%s: validation RMSE %.4f", method.name, float(np.mean(val)))
    write_provenance(out, "train", args, cfg, inputs,
                     extra={"method": method.name, "replication": replication,
                            "training_seed": seed, "chosen_params": params})
    return 0


def _fitted_kind(model):
    if isinstance(model, r2.R2Model):
        return "r2"
    if isinstance(model, br2.BR2Model):
        return "br2"
    return "baseline"


def cmd_evaluate(args):
    cfg = _load_config(args) if (args.config or args.overrides) else None
    dataset = args.dataset or (cfg.dataset if cfg else None)
    if not args.checkpoint or not dataset:
        raise ConfigError("evaluate needs --checkpoint and --dataset")
    model = r2.load_model(args.checkpoint)
    bundle = datagen.read_dataset(dataset)
    data = bundle.split(args.split)
    fitted = evalharness.FittedMethod(_fitted_kind(model), model)
    try:
        per_source = fitted.source_rmse(data)
    except ValueError as exc:  # numpy shape errors from a mismatched model
        raise DataError(f"checkpoint does not fit dataset {dataset}: {exc}") from exc
    sip, cstat = fitted.diagnostics()
    out = _output_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("split", "source", "rmse"))
        for s, v in enumerate(per_source):
            w.writerow((args.split, s, repr(float(v))))
        w.writerow((args.split, "avg", repr(float(np.mean(per_source)))))
    metrics = {"split": args.split, "rmse_by_source": [float(v) for v in per_source],
               "rmse_avg": float(np.mean(per_source)),
               "sip_exact": None if np.isnan(sip) else sip,
               "complexity_stat": None if np.isnan(cstat) else cstat}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1))
    log.info("%s RMSE %.4f", args.split, metrics["rmse_avg"])
    write_provenance(out, "evaluate", args, cfg, [args.checkpoint, dataset])
    return 0


def cmd_benchmark(args):
    cfg = _load_config(args)
    out = _output_dir(args, cfg)
    cfg.output = str(out)
    cfg.resolved["output"] = str(out)
    exp = cfg.experiment()
    inputs = [cfg.dataset] if cfg.dataset else []
    write_provenance(out, "benchmark", args, cfg, inputs)
    result = evalharness.run_experiment(exp)
    failed = sum(e["n_failed"] for e in result.summary["methods"].values())
    if failed:
        log.warning("%d method/replication runs failed; see summary.json", failed)
    sys.stderr.write(evalharness.summary_markdown(result.summary))
    return 0


INSPECT_COLUMNS = ("modality", "representer", "gamma", "gamma_smoothed", "sip_exact", "complexity_stat")


def inspect_rows(model, tau: float):
    """Per-representer integrativeness table of an R2 or BR2 model."""
    if isinstance(model, r2.R2Model):
        blocks = [model.coefficients]
    elif isinstance(model, br2.BR2Model):
        blocks = model.coefficients
    else:
        raise DataError("inspect needs an R2 or BR2 checkpoint")
    rows = []
    for m, B in enumerate(blocks):
        gamma = integrativeness_exact(B)
        gsm = gamma_smoothed(B, tau)
        sip = sip_exact(gamma, B.shape[0]) if B.shape[0] >= 2 else float("nan")
        cstat = complexity_stat(gamma)
        for d in range(B.shape[1]):
            rows.append((m, d, int(gamma[d]), float(gsm[d]), sip, cstat))
    return rows


def cmd_inspect(args):
    if not args.checkpoint:
        raise ConfigError("inspect needs --checkpoint")
    model = r2.load_model(args.checkpoint)
    tau = args.tau
    if tau is None:
        cfg_tau = getattr(getattr(model, "config", None), "sip", None)
        tau = cfg_tau.tau if cfg_tau is not None else SipParams().tau
    rows = inspect_rows(model, tau)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(INSPECT_COLUMNS)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    sys.stdout.write(buf.getvalue())
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        (out / "inspect.csv").write_text(buf.getvalue())
        write_provenance(out, "inspect", args, None, [args.checkpoint], extra={"tau": tau})
    return 0


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "evaluate": cmd_evaluate,
            "benchmark": cmd_benchmark, "inspect": cmd_inspect}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="r2learn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"r2learn {r2learn.__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", help="YAML or JSON config file")
        p.add_argument("-o", "--output", help="output directory (default: config 'output')")
        p.add_argument("-v", "--verbose", action="count", default=0)
        p.add_argument("-q", "--quiet", action="store_true")
        p.add_argument("overrides", nargs="*", metavar="KEY=VALUE", help="config overrides")
        if name in ("simulate", "train"):
            p.add_argument("--replication", type=int, help="replication (stream) id")
        if name in ("train", "evaluate"):
            p.add_argument("--dataset", help="dataset file (.npz)")
        if name == "train":
            p.add_argument("--method", help="name of the configured method to train (default: first)")
        if name in ("evaluate", "inspect"):
            p.add_argument("--checkpoint", help="model checkpoint (.json)")
        if name == "evaluate":
            p.add_argument("--split", default="test", choices=datagen.SPLITS)
        if name == "inspect":
            p.add_argument("--tau", type=float, help="tau for the smoothed integrativeness")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s",
                        force=True)
    try:
        return COMMANDS[args.command](args)
    except R2Error as exc:
        log.error("%s", exc)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the internal exit code
        log.exception("internal error: %s", exc)
        return 5


if __name__ == "__main__":
    sys.exit(main())

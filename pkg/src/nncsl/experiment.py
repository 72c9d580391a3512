"""Experiment configuration, validation and the per-seed output files.

An experiment file is JSON. Every key is optional; missing keys take the
values in :data:`DEFAULTS`. The ``train`` section accepts any
:class:`~nncsl.trainer.TrainConfig` field except ``method``, ``seed`` and
``buffer_size``, which live at the top level because they are swept or
reported per run.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import metrics
from .data import load_csv, make_synthetic, split_stream
from .errors import ConfigError, NNCSLError, ParameterError, ProtocolError, SplitError
from .model import save_checkpoint
from .trainer import METHODS, TrainConfig, run_stream

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "NNCSL_OUTPUT_ROOT"

SYNTHETIC_DEFAULTS = {
    "kind": "gaussian_blobs",
    "classes": 10,
    "per_class": 200,
    "dim": 16,
    "noise": 0.6,
    "spread": 1.0,
    "modes": 3,
}
CSV_DEFAULTS = {"kind": "csv", "path": None, "has_header": True, "label_column": -1, "standardize": True}

DEFAULTS = {
    "dataset": SYNTHETIC_DEFAULTS,
    "num_tasks": 5,
    "label_ratio": 0.05,
    "test_fraction": 0.25,
    "buffer_size": 50,
    "methods": ["nncsl"],
    "seeds": [0, 1, 2, 3, 4],
    "train": {"epochs_per_task": 20},
    "output_dir": "runs",
    "dump_embeddings": False,
    "checkpoints": False,
}

_TOP_LEVEL_ONLY = ("method", "seed", "buffer_size")
_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _expect(value, kinds, field, what):
    if isinstance(value, bool) and bool not in kinds:
        raise ConfigError(f"expected {what}, got {value!r}", field)
    if not isinstance(value, kinds):
        raise ConfigError(f"expected {what}, got {value!r}", field)
    return value


def _number(value, field, minimum=None, integer=False):
    kinds = (int,) if integer else (int, float)
    _expect(value, kinds, field, "an integer" if integer else "a number")
    if not math.isfinite(value):
        raise ConfigError("must be finite", field)
    if minimum is not None and value < minimum:
        raise ConfigError(f"must be at least {minimum}", field)
    return value


def _resolve_dataset(raw):
    if raw is None:
        raw = {}
    _expect(raw, (dict,), "dataset", "an object")
    kind = raw.get("kind", SYNTHETIC_DEFAULTS["kind"])
    if kind == "csv":
        out = dict(CSV_DEFAULTS)
    elif kind in ("gaussian_blobs", "concentric_rings"):
        out = dict(SYNTHETIC_DEFAULTS)
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}", "dataset.kind")
    unknown = set(raw) - set(out)
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", "dataset")
    out.update(raw)
    if kind == "csv":
        path = out["path"]
        _expect(path, (str,), "dataset.path", "a file path")
        if not Path(path).is_file():
            raise ConfigError(f"file {path!r} does not exist", "dataset.path")
        _expect(out["has_header"], (bool,), "dataset.has_header", "true or false")
        _expect(out["standardize"], (bool,), "dataset.standardize", "true or false")
        _expect(out["label_column"], (int, str), "dataset.label_column", "a column index or name")
    else:
        for key, minimum in (("classes", 2), ("per_class", 4), ("dim", 2), ("modes", 1)):
            _number(out[key], f"dataset.{key}", minimum, integer=True)
        for key in ("noise", "spread"):
            _number(out[key], f"dataset.{key}", 0)
    return out


def _resolve_train(raw):
    _expect(raw, (dict,), "train", "an object")
    out = dict(DEFAULTS["train"])
    for key, value in raw.items():
        field = f"train.{key}"
        if key in _TOP_LEVEL_ONLY:
            raise ConfigError("set this at the top level of the experiment", field)
        if key not in _TRAIN_FIELDS:
            raise ConfigError("unknown training option", field)
        out[key] = value
    # the eps < tau constraint is reported by validate() together with the
    # other cross-field checks, so check everything else against safe values
    probe = dict(out)
    for key in ("eps", "tau"):
        _number(probe.get(key, _TRAIN_FIELDS[key].default), field=f"train.{key}")
    if not 0 < probe.get("eps", _TRAIN_FIELDS["eps"].default) < probe.get("tau", _TRAIN_FIELDS["tau"].default):
        probe["eps"], probe["tau"] = _TRAIN_FIELDS["eps"].default, _TRAIN_FIELDS["tau"].default
    try:
        cfg = TrainConfig(**probe)
    except ParameterError as exc:
        raise ConfigError(str(exc), "train") from None
    except TypeError as exc:
        raise ConfigError(str(exc), "train") from None
    resolved = cfg.to_dict()
    resolved.update({k: out[k] for k in ("eps", "tau") if k in out})
    for key in _TOP_LEVEL_ONLY:
        resolved.pop(key)
    return resolved


def resolve_config(raw):
    """Fill defaults and type-check an experiment description.

    Raises :class:`ConfigError` naming the offending field.
    """
    _expect(raw, (dict,), "<root>", "a JSON object")
    raw = dict(raw)
    if "method" in raw:
        if "methods" in raw:
            raise ConfigError("give either method or methods", "method")
        raw["methods"] = [raw.pop("method")]
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", "<root>")
    out = copy.deepcopy(DEFAULTS)
    out.update({k: v for k, v in raw.items() if k not in ("dataset", "train")})
    out["dataset"] = _resolve_dataset(raw.get("dataset"))
    out["train"] = _resolve_train(raw.get("train", {}))

    _number(out["num_tasks"], "num_tasks", 1, integer=True)
    _number(out["label_ratio"], "label_ratio")
    if not 0 < out["label_ratio"] <= 1:
        raise ConfigError("must be in (0, 1]", "label_ratio")
    _number(out["test_fraction"], "test_fraction", 0)
    if not out["test_fraction"] < 1:
        raise ConfigError("must be below 1", "test_fraction")
    _number(out["buffer_size"], "buffer_size", 0, integer=True)
    _expect(out["methods"], (list,), "methods", "a list of method names")
    if not out["methods"]:
        raise ConfigError("at least one method is required", "methods")
    for i, m in enumerate(out["methods"]):
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {list(METHODS)}", f"methods[{i}]")
    if len(set(out["methods"])) != len(out["methods"]):
        raise ConfigError("duplicate method", "methods")
    _expect(out["seeds"], (list,), "seeds", "a list of integers")
    if not out["seeds"]:
        raise ConfigError("at least one seed is required", "seeds")
    for i, s in enumerate(out["seeds"]):
        _number(s, f"seeds[{i}]", 0, integer=True)
    if len(set(out["seeds"])) != len(out["seeds"]):
        raise ConfigError("duplicate seed", "seeds")
    _expect(out["output_dir"], (str,), "output_dir", "a directory path")
    _expect(out["dump_embeddings"], (bool,), "dump_embeddings", "true or false")
    _expect(out["checkpoints"], (bool,), "checkpoints", "true or false")
    return out


def load_config(path, overrides=None):
    """Read ``path`` (or start from ``{}`` when ``path`` is None) and apply overrides.

    ``overrides`` maps dotted keys such as ``train.tau`` to values.
    """
    raw = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {str(path)!r} not found", "<file>") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}", "<file>") from None
    if not isinstance(raw, dict):
        raise ConfigError("expected a JSON object", "<root>")
    for key, value in (overrides or {}).items():
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError("cannot override inside a non-object", key)
        node[parts[-1]] = value
    return resolve_config(raw)


def config_hash(resolved):
    """Short digest of everything that influences results (not where they go)."""
    payload = {k: v for k, v in resolved.items() if k != "output_dir"}
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def method_config(resolved, method):
    out = copy.deepcopy(resolved)
    out["methods"] = [method]
    return out


def train_config(resolved, method, seed):
    return TrainConfig.from_dict(
        {**resolved["train"], "method": method, "seed": seed, "buffer_size": resolved["buffer_size"]}
    )


def build_dataset(resolved, seed):
    ds_cfg = resolved["dataset"]
    if ds_cfg["kind"] == "csv":
        return load_csv(ds_cfg["path"], ds_cfg["has_header"], ds_cfg["label_column"], ds_cfg["standardize"])
    params = {k: v for k, v in ds_cfg.items() if k != "kind"}
    return make_synthetic(ds_cfg["kind"], seed=seed, **params)


def build_stream(resolved, seed):
    """Dataset and class-incremental split for one seed.

    Synthetic data is redrawn per seed; a CSV file is fixed and only its
    split changes.
    """
    return split_stream(
        build_dataset(resolved, seed),
        resolved["num_tasks"],
        resolved["label_ratio"],
        seed=seed,
        test_fraction=resolved["test_fraction"],
    )


def validate(resolved):
    """Constraint violations that would stop a run; empty when the config is usable."""
    problems = []
    train = resolved["train"]
    if not 0 < train["eps"] < train["tau"]:
        problems.append(f"train.tau: need 0 < eps < tau (eps={train['eps']}, tau={train['tau']})")
    try:
        dataset = build_dataset(resolved, resolved["seeds"][0])
    except NNCSLError as exc:
        problems.append(f"dataset: {exc}")
        return problems
    T = resolved["num_tasks"]
    if dataset.class_count % T:
        problems.append(f"num_tasks: {dataset.class_count} classes cannot be split into {T} equal tasks")
        return problems
    try:
        split_stream(dataset, T, resolved["label_ratio"], seed=resolved["seeds"][0],
                     test_fraction=resolved["test_fraction"])
    except (SplitError, ProtocolError, ParameterError) as exc:
        problems.append(f"label_ratio: {exc}")
    return problems


def _write_rows(path, header, rows, digest):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash={digest}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def seed_dir(root, method, seed):
    return Path(root) / method / f"seed_{seed}"


def run_one(resolved, method, seed, root):
    """Train one (method, seed) pair and write its files; returns the summary payload."""
    cfg_dict = method_config(resolved, method)
    digest = config_hash(cfg_dict)
    cfg = train_config(resolved, method, seed)
    stream = build_stream(resolved, seed)
    out = seed_dir(root, method, seed)
    out.mkdir(parents=True, exist_ok=True)

    on_task_end = None
    if resolved["checkpoints"]:
        def on_task_end(t, state):
            save_checkpoint(state.model, out / f"checkpoint_task{t}.json",
                            extra={"config_hash": digest, "task": t})

    log.info("running %s seed %d (config %s)", method, seed, digest)
    result = run_stream(cfg, stream, learning_curve=True, on_task_end=on_task_end)
    metrics.write_matrix_csv(result.matrix, out / "matrix.csv", config_hash=digest)
    _write_rows(
        out / "learning_curve.csv",
        ["task", "epoch", "unlabeled_train_accuracy"],
        [[c["task"], c["epoch"], repr(c["accuracy"])] for c in result.learning_curve],
        digest,
    )
    if resolved["dump_embeddings"]:
        ds = stream.dataset
        model = result.state.model
        _, proj, _ = model.forward(ds.features)
        _write_rows(
            out / "embeddings.csv",
            ["sample_id", "class"] + [f"h{k}" for k in range(proj.shape[1])],
            [[i, int(y)] + [repr(float(v)) for v in row]
             for i, (y, row) in enumerate(zip(ds.labels, proj.data))],
            digest,
        )
    return metrics.write_summary_json(
        result.matrix,
        out / "summary.json",
        config=cfg_dict,
        config_hash=digest,
        extra={"method": method, "seed": seed, "labeled_train_accuracy": result.labeled_train_acc},
    )


def _mean_stdev(values):
    values = [v for v in values if v is not None]
    if not values:
        return None
    stdev = statistics.stdev(values) if len(values) > 1 else 0.0
    return {"mean": statistics.fmean(values), "stdev": stdev, "values": values}


def aggregate(summaries, method, digest):
    """Mean and sample standard deviation of each metric across seeds."""
    summaries = sorted(summaries, key=lambda s: s["seed"])
    out = {"method": method, "config_hash": digest, "seeds": [s["seed"] for s in summaries]}
    for key in ("acc", "fwt", "bwt", "bwt_excluding_first"):
        out[key] = _mean_stdev([s.get(key) for s in summaries])
    finals = np.array([s["per_task_final"] for s in summaries])
    out["per_task_final_mean"] = finals.mean(axis=0).tolist()
    return out


def write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def output_root(resolved, override=None):
    """Flag beats environment beats config file."""
    return Path(override or os.environ.get(OUTPUT_ROOT_ENV) or resolved["output_dir"])


def run_experiment(resolved, root, jobs=1):
    """Run every method over every seed; returns ``{method: aggregate}``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_json(root / "resolved_config.json", {**resolved, "config_hash": config_hash(resolved)})
    pairs = [(m, s) for m in resolved["methods"] for s in resolved["seeds"]]
    if jobs > 1 and len(pairs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_one, resolved, m, s, root) for m, s in pairs]
            results = [f.result() for f in futures]
    else:
        results = [run_one(resolved, m, s, root) for m, s in pairs]
    by_method = {}
    for (method, _), summary in zip(pairs, results):
        by_method.setdefault(method, []).append(summary)
    aggregates = {}
    for method, summaries in by_method.items():
        agg = aggregate(summaries, method, config_hash(method_config(resolved, method)))
        write_json(root / method / "aggregate.json", agg)
        aggregates[method] = agg
    return aggregates


def collect(root):
    """Re-read per-seed outputs under ``root``; metrics are recomputed from the matrix CSVs."""
    root = Path(root)
    found = {}
    for summary_path in sorted(root.glob("*/seed_*/summary.json")):
        with open(summary_path, encoding="utf-8") as fh:
            summary = json.load(fh)
        rm = metrics.read_matrix_csv(summary_path.parent / "matrix.csv")
        rm.r = np.array([np.nan if v is None else v for v in summary["random_baseline"]])
        recomputed = metrics.summary(rm)
        recomputed["seed"] = summary["seed"]
        method = summary["method"]
        found.setdefault(method, {"hash": summary["config_hash"], "runs": []})
        if found[method]["hash"] != summary["config_hash"]:
            raise ConfigError(f"mixed config hashes under {root / method}", method)
        found[method]["runs"].append(recomputed)
    return {m: aggregate(v["runs"], m, v["hash"]) for m, v in found.items()}

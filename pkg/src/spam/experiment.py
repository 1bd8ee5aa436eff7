"""Config-driven pipeline shared by the CLI and the hyperparameter search.

A run config is a JSON document::

    {
      "dataset": {"csv": "...", "schema": "...", "name": "california_housing", "split_seed": 0},
      "model":   {"ranks": [100], "neural": {"arch": "deep", "subnets": 1}},
      "train":   {"lr0": 0.01, "weight_decay": 1e-4, "epochs": 1000, ...},
      "seed": 0
    }

``dataset`` may instead hold ``{"synthetic": {"kind": ..., "n": ..., "seed": ...}}``.
Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import copy
import json
import os
import tempfile
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .data_metrics import (
    DatasetSplit,
    NormStats,
    RawTable,
    Schema,
    load_csv,
    make_split,
    metrics_record,
    task_metric,
)
from .errors import SchemaError
from .neural_feats import FeatureNetBank, bank_from_dict, bank_to_dict, init_bank
from .optimize import TASK_LOSS, TrainConfig, TrainResult, predict_logits, train
from .poly_core import RankSpec, SpamParams, init_params, params_from_dict, params_to_dict

DEFAULT_EPOCHS = {"california_housing": 1000, "fico": 1000, "covtype": 500}


def load_config(path) -> dict:
    path = Path(path)
    with open(path) as fh:
        cfg = json.load(fh)
    cfg.setdefault("_base_dir", str(path.resolve().parent))
    return cfg


def resolve_path(cfg: dict, p: str) -> Path:
    p = Path(p)
    if p.is_absolute():
        return p
    return Path(cfg.get("_base_dir", ".")) / p


def set_dotted(cfg: dict, key: str, value) -> None:
    """``set_dotted(cfg, "train.lr0", 0.1)`` creating intermediate dicts."""
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


# ---------------------------------------------------------------------------
# datasets


def synthetic_table(kind: str, n: int = 2000, d: int = 2, seed: int = 0) -> Tuple[RawTable, str, int]:
    """Small generated problems with a known answer.

    ``sqrt_product``: ``y = 3 sqrt(x1 x2) + 0.5``; ``linear``: ``y = w.x + b``
    with ``w = 1..d`` scaled; ``memorize``: random targets; ``binary`` and
    ``multiclass``: labels from a fixed random quadratic score.
    """
    rng = np.random.default_rng(seed)
    X = rng.random((n, d))
    names = [f"x{i}" for i in range(d)]
    if kind == "sqrt_product":
        y = 3.0 * np.sqrt(X[:, 0] * X[:, 1]) + 0.5
        return RawTable(X, y, names), "regression", 1
    if kind == "linear":
        w = np.linspace(-1.0, 1.0, d)
        return RawTable(X, X @ w + 0.25, names), "regression", 1
    if kind == "memorize":
        return RawTable(X, rng.normal(size=n), names), "regression", 1
    if kind in ("binary", "multiclass"):
        C = 2 if kind == "binary" else 3
        W = rng.normal(size=(C, d))
        A = rng.normal(size=(C, d))
        score = X @ W.T + (np.sqrt(X) @ A.T) ** 2 + 0.3 * rng.normal(size=(n, C))
        y = np.argmax(score, axis=1)
        return RawTable(X, y.astype(np.int64), names), kind, (1 if kind == "binary" else C)
    raise ValueError(f"unknown synthetic dataset kind {kind!r}")


@lru_cache(maxsize=8)
def _cached_csv(csv_path: str, schema_path: str, mtime: float):
    schema = Schema.load(schema_path)
    return load_csv(csv_path, schema), schema


def load_dataset(cfg: dict) -> DatasetSplit:
    ds = cfg.get("dataset")
    if not ds:
        raise SchemaError("config has no 'dataset' section")
    split_seed = int(ds.get("split_seed", cfg.get("seed", 0)))
    if "synthetic" in ds:
        spec = ds["synthetic"]
        table, task, C = synthetic_table(
            spec["kind"], int(spec.get("n", 2000)), int(spec.get("d", 2)), int(spec.get("seed", 0))
        )
        return make_split(table, task, split_seed, C, "y")
    csv_path = resolve_path(cfg, ds["csv"])
    schema_path = resolve_path(cfg, ds["schema"])
    for p in (csv_path, schema_path):
        if not p.exists():
            raise FileNotFoundError(f"dataset file not found: {p}")
    table, schema = _cached_csv(str(csv_path), str(schema_path), os.path.getmtime(csv_path))
    return make_split(table, schema.task, split_seed, schema.num_classes, schema.target)


# ---------------------------------------------------------------------------
# model construction and training


def train_config(cfg: dict, task: str) -> TrainConfig:
    opts = dict(cfg.get("train", {}))
    opts.setdefault("loss_kind", TASK_LOSS[task])
    opts.setdefault("seed", int(cfg.get("seed", 0)))
    if "epochs" not in opts:
        opts["epochs"] = DEFAULT_EPOCHS.get(cfg.get("dataset", {}).get("name", ""), 100)
    return TrainConfig(**opts)


def build_model(cfg: dict, data: DatasetSplit, seed: int) -> Tuple[SpamParams, Optional[FeatureNetBank]]:
    model = cfg.get("model", {})
    spec = RankSpec.from_ranks(model.get("ranks", []))
    neural = model.get("neural")
    bank = None
    d = data.num_features
    if neural:
        bank = init_bank(
            neural.get("arch", "deep"),
            d,
            spec.degree,
            int(neural.get("subnets", 1)),
            seed=seed + 1,
            tied=bool(neural.get("tied", False)),
        )
        d = bank.output_dim
    init = model.get("init", {})
    convex = bool(cfg.get("train", {}).get("convex_mode", False))
    params = init_params(
        d,
        data.num_classes,
        spec,
        seed=seed,
        basis_scale=float(init.get("basis_scale", 1.0)),
        singular_scale=float(init.get("singular_scale", 0.1)),
        nonnegative=convex,
    )
    if data.task == "regression" and not convex:
        params.bias[:] = float(np.mean(data.y_train))
    elif data.task == "regression":
        params.bias[:] = max(float(np.mean(data.y_train)), 0.0)
    if neural:
        params.mode_flags["neural"] = True
    return params, bank


@dataclass
class RunOutcome:
    result: TrainResult
    data: DatasetSplit
    train_config: TrainConfig
    metrics: dict
    val_metric: float


def evaluate(params: SpamParams, bank: Optional[FeatureNetBank], data: DatasetSplit, split: str) -> float:
    X, y = data.part(split)
    return task_metric(data.task, predict_logits(params, X, bank), y)


def run_training(cfg: dict, on_epoch=None, data: Optional[DatasetSplit] = None) -> RunOutcome:
    data = load_dataset(cfg) if data is None else data
    tcfg = train_config(cfg, data.task)
    params, bank = build_model(cfg, data, tcfg.seed)
    result = train(params, data, tcfg, bank, on_epoch=on_epoch)
    test_value = evaluate(result.params, result.bank, data, "test")
    metrics = metrics_record(data.task, test_value, len(data.y_test), tcfg.seed)
    return RunOutcome(result, data, tcfg, metrics, result.best_val)


# ---------------------------------------------------------------------------
# model files


def model_document(params: SpamParams, bank: Optional[FeatureNetBank], data: Optional[DatasetSplit] = None) -> dict:
    doc = params_to_dict(params)
    if bank is not None:
        doc["feature_nets"] = bank_to_dict(bank)
    if data is not None:
        doc["task"] = data.task
        doc["preprocessing"] = {
            "norm_stats": data.norm_stats.to_dict(),
            "feature_names": list(data.feature_names),
            "target": data.target,
        }
    return doc


def read_model(path) -> Tuple[SpamParams, Optional[FeatureNetBank], dict]:
    with open(path) as fh:
        doc = json.load(fh)
    params = params_from_dict(doc)
    bank = bank_from_dict(doc["feature_nets"]) if doc.get("feature_nets") else None
    return params, bank, doc


def raw_feature_count(params: SpamParams, bank: Optional[FeatureNetBank]) -> int:
    return bank.num_features if bank is not None else params.num_features


def norm_stats_of(doc: dict) -> Optional[NormStats]:
    pre = doc.get("preprocessing")
    return NormStats.from_dict(pre["norm_stats"]) if pre else None


def write_atomic(path, text: str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=True) + "\n"


def merged(cfg: dict, overrides: dict) -> dict:
    out = copy.deepcopy(cfg)
    for key, value in overrides.items():
        set_dotted(out, key, value)
    return out

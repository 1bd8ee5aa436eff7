"""Dataset ingestion, [0, 1] scaling, 70/10/20 splits, minibatching and metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, MetricError, SchemaError

TASKS = ("regression", "binary", "multiclass")
DEFAULT_MISSING = ("", "NA", "N/A", "NaN", "nan", "?", "null", "None")


@dataclass
class Schema:
    """Column layout of a CSV file.

    ``columns`` lists feature columns in order; each entry has ``name``, and
    ``type`` either ``"numeric"`` or ``"categorical"`` (with ``categories``).
    For classification ``classes`` gives the target labels in class-index order.
    """

    columns: List[dict]
    target: str
    task: str
    classes: Optional[List[str]] = None
    header: bool = True
    missing_tokens: Tuple[str, ...] = DEFAULT_MISSING
    all_columns: Optional[List[str]] = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise SchemaError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.task != "regression" and not self.classes:
            raise SchemaError("classification schemas must list 'classes'")
        if self.task == "binary" and len(self.classes) != 2:
            raise SchemaError("binary task needs exactly two classes")
        for col in self.columns:
            if col.get("type", "numeric") == "categorical" and not col.get("categories"):
                raise SchemaError(f"categorical column {col['name']!r} must list categories")
        if not self.header and not self.all_columns:
            raise SchemaError("header-less files need 'all_columns' to name every field")

    @classmethod
    def from_dict(cls, doc: dict) -> "Schema":
        return cls(
            columns=[c if isinstance(c, dict) else {"name": c} for c in doc["columns"]],
            target=doc["target"],
            task=doc["task"],
            classes=[str(c) for c in doc["classes"]] if doc.get("classes") is not None else None,
            header=doc.get("header", True),
            missing_tokens=tuple(doc.get("missing_tokens", DEFAULT_MISSING)),
            all_columns=doc.get("all_columns"),
        )

    @classmethod
    def load(cls, path) -> "Schema":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def feature_names(self) -> List[str]:
        """Expanded names, one per model input (one-hot columns get ``name=category``)."""
        names = []
        for col in self.columns:
            if col.get("type", "numeric") == "categorical":
                names += [f"{col['name']}={c}" for c in col["categories"]]
            else:
                names.append(col["name"])
        return names

    @property
    def num_classes(self) -> int:
        return 1 if self.task != "multiclass" else len(self.classes)


@dataclass
class RawTable:
    X: np.ndarray
    y: np.ndarray
    feature_names: List[str]


def load_csv(path, schema: Schema) -> RawTable:
    """Parse ``path`` according to ``schema``.

    Missing values are an error (no imputation); unknown categories and
    unparseable numbers raise :class:`DataError` with 1-based data-row numbers.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if schema.header:
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"{path}: empty file") from None
            header = [h.strip() for h in header]
        else:
            header = list(schema.all_columns)
        wanted = [c["name"] for c in schema.columns] + [schema.target]
        missing_cols = [c for c in wanted if c not in header]
        if missing_cols:
            raise SchemaError(f"{path}: header lacks columns {missing_cols}")
        pos = {name: header.index(name) for name in wanted}
        missing = set(schema.missing_tokens)
        class_index = {c: i for i, c in enumerate(schema.classes or [])}
        rows, targets = [], []
        for rowno, record in enumerate(reader, start=1):
            if not record:
                continue
            if len(record) != len(header):
                raise DataError(
                    f"{path}: row {rowno} has {len(record)} fields, expected {len(header)}", row=rowno
                )
            values = []
            for col in schema.columns:
                name = col["name"]
                cell = record[pos[name]].strip()
                if cell in missing:
                    raise DataError(f"{path}: missing value in row {rowno}, column {name!r}", row=rowno, column=name)
                if col.get("type", "numeric") == "categorical":
                    cats = [str(c) for c in col["categories"]]
                    if cell not in cats:
                        raise DataError(
                            f"{path}: unknown category {cell!r} in row {rowno}, column {name!r}",
                            row=rowno,
                            column=name,
                        )
                    onehot = [0.0] * len(cats)
                    onehot[cats.index(cell)] = 1.0
                    values += onehot
                else:
                    try:
                        values.append(float(cell))
                    except ValueError:
                        raise DataError(
                            f"{path}: cannot parse {cell!r} as a number in row {rowno}, column {name!r}",
                            row=rowno,
                            column=name,
                        ) from None
            cell = record[pos[schema.target]].strip()
            if cell in missing:
                raise DataError(
                    f"{path}: missing target in row {rowno}", row=rowno, column=schema.target
                )
            if schema.task == "regression":
                try:
                    targets.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}: cannot parse target {cell!r} in row {rowno}", row=rowno, column=schema.target
                    ) from None
            else:
                if cell not in class_index:
                    # tolerate numeric spellings such as "1.0" for class "1"
                    try:
                        alt = str(int(float(cell)))
                    except ValueError:
                        alt = None
                    if alt not in class_index:
                        raise DataError(
                            f"{path}: unknown class label {cell!r} in row {rowno}",
                            row=rowno,
                            column=schema.target,
                        )
                    cell = alt
                targets.append(class_index[cell])
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    X = np.array(rows, dtype=np.float64)
    dtype = np.float64 if schema.task == "regression" else np.int64
    if not np.all(np.isfinite(X)):
        bad = int(np.argwhere(~np.isfinite(X))[0, 0]) + 1
        raise DataError(f"{path}: non-finite value in row {bad}", row=bad)
    return RawTable(X, np.array(targets, dtype=dtype), schema.feature_names())


# ---------------------------------------------------------------------------
# splitting and scaling


def split_70_10_20(n: int, seed: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shuffled (train, val, test) indices; floor sizes for val/test, rest to train."""
    if n < 10:
        raise ValueError(f"need at least 10 rows to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_val, n_test = n // 10, n // 5
    test = np.sort(perm[:n_test])
    val = np.sort(perm[n_test : n_test + n_val])
    train = np.sort(perm[n_test + n_val :])
    return train, val, test


@dataclass(frozen=True)
class NormStats:
    minimum: np.ndarray
    maximum: np.ndarray

    def transform(self, X, clip: bool = True) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        span = self.maximum - self.minimum
        constant = span == 0
        out = (X - self.minimum) / np.where(constant, 1.0, span)
        out[:, constant] = 0.0
        return np.clip(out, 0.0, 1.0) if clip else out

    def inverse(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=np.float64) * (self.maximum - self.minimum) + self.minimum

    def to_dict(self) -> dict:
        return {"min": self.minimum.tolist(), "max": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, doc) -> "NormStats":
        return cls(np.array(doc["min"], dtype=np.float64), np.array(doc["max"], dtype=np.float64))


def normalize_minmax(raw, train_indices) -> Tuple[np.ndarray, NormStats]:
    """Scale every column with the train rows' min/max; other rows are clipped to [0, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    train_indices = np.asarray(train_indices)
    if train_indices.size == 0:
        raise ValueError("train_indices must be nonempty")
    train = raw[train_indices]
    stats = NormStats(train.min(axis=0), train.max(axis=0))
    return stats.transform(raw), stats


@dataclass
class DatasetSplit:
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    norm_stats: NormStats
    task: str
    num_classes: int = 1
    feature_names: List[str] = field(default_factory=list)
    target: str = ""

    @property
    def num_features(self) -> int:
        return self.X_train.shape[1]

    def part(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, f"X_{name}"), getattr(self, f"y_{name}")


def make_split(
    table: RawTable, task: str, seed: int, num_classes: int = 1, target: str = ""
) -> DatasetSplit:
    train, val, test = split_70_10_20(len(table.y), seed)
    Z, stats = normalize_minmax(table.X, train)
    return DatasetSplit(
        Z[train], table.y[train], Z[val], table.y[val], Z[test], table.y[test],
        stats, task, num_classes, list(table.feature_names), target,
    )


def minibatches(n: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    """Index batches for one epoch, reshuffled per ``(seed, epoch)``; last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# metrics


def rmse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape or pred.size == 0:
        raise MetricError(f"rmse needs equal nonempty lengths, got {pred.size} and {target.size}")
    return math.sqrt(float(np.mean((pred - target) ** 2)))


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate; tied scores share their average rank."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC is undefined unless both classes are present")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy_top1(logits, labels) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels).ravel()
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise MetricError(f"logits {logits.shape} do not match {labels.size} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise MetricError("label out of range")
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return float(np.mean(np.argmax(logits, axis=1) == labels))


METRIC_NAMES = {"regression": "rmse", "binary": "auroc", "multiclass": "accuracy"}


def task_metric(task: str, logits, labels) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if task == "regression":
        return rmse(logits[:, 0], labels)
    if task == "binary":
        return auroc(logits[:, 0], labels)
    return accuracy_top1(logits, labels)


def higher_is_better(task: str) -> bool:
    return task != "regression"


def metrics_record(task: str, value: float, n_test: int, seed: int) -> Dict[str, object]:
    return {"task": task, "metric_name": METRIC_NAMES[task], "value": value, "n_test": n_test, "seed": seed}

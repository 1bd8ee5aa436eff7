"""Random hyperparameter search with deterministic, schedule-independent trials."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .data_metrics import higher_is_better
from .experiment import load_dataset, merged, run_training

log = logging.getLogger(__name__)

RANK_SET = (25, 50, 100, 200, 250, 400, 500, 750, 800, 1000, 1200, 1400, 1600)

# keys are dotted paths into a run config
DEFAULT_SPACE = {
    "train.lr0": {"log_uniform": [1e-7, 1e2]},
    "train.weight_decay": {"log_uniform": [1e-13, 1e1]},
    "train.lambda_dropout_p": {"uniform": [0.0, 1.0]},
    "model.ranks": {"choice": [[r] for r in RANK_SET]},
}


def order3_rank_choices() -> List[List[int]]:
    """Every ``[r2, r3]`` from the product of the order-2 rank set with itself."""
    return [[a, b] for a in RANK_SET for b in RANK_SET]


@dataclass
class SearchSpace:
    """Sampling rule per config key: ``log_uniform``, ``uniform`` ([lo, hi)) or ``choice``."""

    rules: Dict[str, dict] = field(default_factory=lambda: dict(DEFAULT_SPACE))

    def __post_init__(self):
        for key, rule in self.rules.items():
            if len(rule) != 1:
                raise ValueError(f"{key}: exactly one sampling rule expected, got {sorted(rule)}")
            (kind, arg), = rule.items()
            if kind in ("log_uniform", "uniform"):
                lo, hi = arg
                if not lo < hi:
                    raise ValueError(f"{key}: empty interval [{lo}, {hi}]")
                if kind == "log_uniform" and lo <= 0:
                    raise ValueError(f"{key}: log-uniform bounds must be positive")
            elif kind == "choice":
                if not arg:
                    raise ValueError(f"{key}: empty choice set")
            else:
                raise ValueError(f"{key}: unknown sampling rule {kind!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "SearchSpace":
        rules = dict(doc)
        if rules.pop("order3_ranks", False):
            rules["model.ranks"] = {"choice": order3_rank_choices()}
        return cls(rules)

    @classmethod
    def load(cls, path) -> "SearchSpace":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def sample(self, rng: np.random.Generator) -> dict:
        out = {}
        for key in sorted(self.rules):
            (kind, arg), = self.rules[key].items()
            if kind == "log_uniform":
                lo, hi = arg
                out[key] = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
            elif kind == "uniform":
                out[key] = float(rng.uniform(arg[0], arg[1]))
            else:
                out[key] = arg[int(rng.integers(len(arg)))]
        return out


@dataclass
class TrialRecord:
    trial_id: int
    config: dict
    seed: int
    val_metric: float = math.nan
    test_metric: float = math.nan
    wall_time: float = 0.0
    status: str = "ok"
    error: str = ""


@dataclass
class SearchResult:
    trials: List[TrialRecord]
    best: Optional[TrialRecord]
    task: str


def trial_plan(space: SearchSpace, n_trials: int, seed: int) -> List[tuple]:
    """``(trial_id, seed, sampled config)`` per trial, from the master seed alone."""
    plan = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n_trials)):
        trial_seed = int(child.generate_state(1)[0] % (2**31 - 1))
        plan.append((i, trial_seed, space.sample(np.random.default_rng(child))))
    return plan


def run_search(
    base_cfg: dict,
    space: SearchSpace,
    n_trials: int,
    parallelism: int = 1,
    seed: int = 0,
    runner: Optional[Callable[[dict], tuple]] = None,
) -> SearchResult:
    """Train ``n_trials`` sampled configs and pick the best by validation metric.

    ``runner(cfg) -> (val_metric, test_metric)`` defaults to full training.
    Failed trials are recorded with ``status="failed"``.
    """
    data = load_dataset(base_cfg)
    task = data.task
    split_seed = int(base_cfg["dataset"].get("split_seed", base_cfg.get("seed", 0)))

    def default_runner(cfg):
        outcome = run_training(cfg, data=data)
        return outcome.val_metric, outcome.metrics["value"]

    runner = runner or default_runner

    def run_one(item):
        trial_id, trial_seed, sampled = item
        cfg = merged(base_cfg, sampled)
        cfg["seed"] = trial_seed
        # trials share one split; pin it so the trial config reproduces alone
        cfg["dataset"]["split_seed"] = split_seed
        cfg.setdefault("train", {})["seed"] = trial_seed
        record = TrialRecord(trial_id, sampled, trial_seed)
        start = time.perf_counter()
        try:
            record.val_metric, record.test_metric = (float(v) for v in runner(cfg))
            if not (math.isfinite(record.val_metric) and math.isfinite(record.test_metric)):
                raise FloatingPointError("non-finite metric")
        except Exception as err:  # a failed trial must not end the search
            record.status = "failed"
            record.error = f"{type(err).__name__}: {err}"
            record.val_metric = record.test_metric = math.nan
        record.wall_time = time.perf_counter() - start
        log.info("trial %d %s val=%s test=%s (%.1fs)", trial_id, record.status,
                 record.val_metric, record.test_metric, record.wall_time)
        return record

    plan = trial_plan(space, n_trials, seed)
    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            trials = list(pool.map(run_one, plan))
    else:
        trials = [run_one(item) for item in plan]
    ok = [t for t in trials if t.status == "ok"]
    best = None
    if ok:
        sign = -1.0 if higher_is_better(task) else 1.0
        best = min(ok, key=lambda t: (sign * t.val_metric, t.trial_id))
    return SearchResult(trials, best, task)


TRIAL_COLUMNS = ["trial_id", "seed", "status", "val_metric", "test_metric", "wall_time", "config", "error"]


def trials_csv(trials: List[TrialRecord], include_time: bool = True) -> str:
    buf = io.StringIO()
    cols = TRIAL_COLUMNS if include_time else [c for c in TRIAL_COLUMNS if c != "wall_time"]
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for t in trials:
        row = {
            "trial_id": t.trial_id,
            "seed": t.seed,
            "status": t.status,
            "val_metric": repr(t.val_metric),
            "test_metric": repr(t.test_metric),
            "wall_time": f"{t.wall_time:.3f}",
            "config": json.dumps(t.config, sort_keys=True),
            "error": t.error,
        }
        writer.writerow({k: row[k] for k in cols})
    return buf.getvalue()

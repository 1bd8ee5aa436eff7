"""Command-line entry point: ``spam {train,eval,explain,verify,spectra,search}``.

Machine-readable results go to stdout and to files under ``--out``; progress
and diagnostics go to stderr. Failures print one JSON object
``{"error": {"kind": ..., "message": ...}}`` and exit nonzero.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import experiment as ex
from .data_metrics import metrics_record
from .errors import DataError, SchemaError, SpamError, UnsupportedOrderError
from .neural_feats import neural_explain
from .poly_core import explain, sorted_spectra, spectral_fit
from .search import SearchSpace, run_search, trials_csv
from .verify import run_verify

log = logging.getLogger("spam")

EXIT_FAILURE = 1
EXIT_IO = 2
EXIT_SCHEMA = 3


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _config(args) -> dict:
    """Config file with ``--set`` and ``--seed`` applied on top."""
    cfg = ex.load_config(args.config) if args.config else {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise SchemaError(f"--set expects key=value, got {item!r}")
        ex.set_dotted(cfg, key.strip(), _parse_value(value))
    if args.seed is not None:
        cfg["seed"] = args.seed
        if "seed" in cfg.get("train", {}):
            cfg["train"]["seed"] = args.seed
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(text: str) -> None:
    sys.stdout.write(text)
    sys.stdout.flush()


# ---------------------------------------------------------------------------
# verbs


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    history: List[str] = []

    def on_epoch(rec):
        history.append(json.dumps(rec, sort_keys=True))
        log.info("epoch %d loss %.6g val %.6g", rec["epoch"], rec["train_loss"], rec["val_metric"])

    outcome = ex.run_training(cfg, on_epoch=on_epoch)
    doc = ex.model_document(outcome.result.params, outcome.result.bank, outcome.data)
    doc["train_config"] = outcome.train_config.to_dict()
    doc["best_epoch"] = outcome.result.best_epoch
    metrics = ex.dumps(outcome.metrics)
    ex.write_atomic(out / "model.json", ex.dumps(doc))
    ex.write_atomic(out / "history.jsonl", "".join(line + "\n" for line in history))
    ex.write_atomic(out / "metrics.json", metrics)
    _emit(metrics)
    return 0


def _load_model_for(args):
    params, bank, doc = ex.read_model(args.model)
    return params, bank, doc


def cmd_eval(args) -> int:
    cfg = _config(args)
    params, bank, doc = _load_model_for(args)
    data = ex.load_dataset(cfg)
    expected = ex.raw_feature_count(params, bank)
    if data.num_features != expected:
        raise SchemaError(f"model expects {expected} features, dataset has {data.num_features}")
    if doc.get("task") and doc["task"] != data.task:
        raise SchemaError(f"model was trained for {doc['task']}, dataset task is {data.task}")
    value = ex.evaluate(params, bank, data, args.split)
    seed = int(doc.get("train_config", {}).get("seed", cfg.get("seed", 0)))
    record = metrics_record(data.task, value, len(data.part(args.split)[1]), seed)
    record["split"] = args.split
    text = ex.dumps(record)
    if args.out:
        ex.write_atomic(_out_dir(args) / f"metrics_{args.split}.json", text)
    _emit(text)
    return 0


def _explain_input(args, doc, num_features: int) -> np.ndarray:
    if args.row is not None:
        x = np.array([float(v) for v in args.row.split(",")], dtype=np.float64)
        if x.shape != (num_features,):
            raise SchemaError(f"--row has {x.size} values, model expects {num_features}")
        stats = ex.norm_stats_of(doc)
        if stats is not None and not args.normalized:
            x = stats.transform(x[None, :])[0]
        return x
    if args.row_index is None:
        raise SchemaError("explain needs --row or --row-index (with --config)")
    data = ex.load_dataset(_config(args))
    X, _ = data.part(args.split)
    if X.shape[1] != num_features:
        raise SchemaError(f"model expects {num_features} features, dataset has {X.shape[1]}")
    return X[args.row_index]


def explanation_rows(expl, top_e: int) -> List[list]:
    """Bias row, the ``top_e`` largest terms, then one residual row for the rest."""
    rows = [["bias", "", "", expl.bias]]
    head, tail = expl.terms[:top_e], expl.terms[top_e:]
    for t in head:
        i = t.indices[0]
        j = t.indices[1] if len(t.indices) > 1 else ""
        rows.append([t.kind, i, j, t.contribution])
    if tail or top_e == 0:
        rows.append(["residual", "", "", math.fsum(t.contribution for t in tail)])
    return rows


def cmd_explain(args) -> int:
    params, bank, doc = _load_model_for(args)
    if params.degree > 2:
        raise UnsupportedOrderError(f"explanations need a model of degree <= 2, got {params.degree}")
    x = _explain_input(args, doc, ex.raw_feature_count(params, bank))
    if bank is not None:
        expl = neural_explain(params, bank, x, args.class_index)
    else:
        expl = explain(params, x, args.class_index)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["kind", "i", "j", "contribution"])
    for kind, i, j, value in explanation_rows(expl, args.top_e):
        writer.writerow([kind, i, j, repr(float(value))])
    text = buf.getvalue()
    if args.out:
        ex.write_atomic(_out_dir(args) / "explanation.csv", text)
    log.info("logit %.17g (class %d)", expl.logit, expl.class_index)
    _emit(text)
    return 0


def cmd_verify(args) -> int:
    report = run_verify(args.max_d, args.max_k, args.trials, args.seed if args.seed is not None else 0)
    if not args.full_report:
        report = {k: v for k, v in report.items() if k != "forward_cases"}
    text = ex.dumps(report)
    if args.out:
        ex.write_atomic(_out_dir(args) / "verify.json", text)
    _emit(text)
    return 0 if report["passed"] else EXIT_FAILURE


def cmd_spectra(args) -> int:
    params, _, _ = _load_model_for(args)
    if params.degree < 2:
        raise UnsupportedOrderError("an order-1 model has no singular-value spectrum")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["order", "class", "j", "magnitude"])
    fits = {}
    for order in params.rank_spec.orders:
        spectra = sorted_spectra(params, order)
        for c, spectrum in enumerate(spectra):
            for j, value in enumerate(spectrum, start=1):
                writer.writerow([order, c, j, repr(float(value))])
        fit = spectral_fit(spectra)
        fits[str(order)] = {"c1": fit.c1, "c2": fit.c2, "gamma": fit.gamma, "residual": fit.residual,
                            "classes": len(spectra)}
    out = _out_dir(args)
    ex.write_atomic(out / "spectra.csv", buf.getvalue())
    text = ex.dumps(fits)
    ex.write_atomic(out / "spectral_fit.json", text)
    _emit(text)
    return 0


def cmd_search(args) -> int:
    cfg = _config(args)
    space = SearchSpace.load(args.space) if args.space else SearchSpace()
    seed = int(cfg.get("seed", 0))
    result = run_search(cfg, space, args.trials, args.parallelism, seed)
    out = _out_dir(args)
    ex.write_atomic(out / "trials.csv", trials_csv(result.trials))
    if result.best is None:
        raise SpamError(f"all {len(result.trials)} trials failed; see trials.csv")
    best = result.best
    doc = {
        "task": result.task,
        "trial_id": best.trial_id,
        "seed": best.seed,
        "sampled": best.config,
        "val_metric": best.val_metric,
        "test_metric": best.test_metric,
        "config": {k: v for k, v in ex.merged(cfg, best.config).items() if not k.startswith("_")},
        "n_trials": len(result.trials),
        "n_failed": sum(t.status != "ok" for t in result.trials),
    }
    doc["config"]["seed"] = best.seed
    ds = doc["config"]["dataset"]
    ds["split_seed"] = int(cfg["dataset"].get("split_seed", seed))
    # the base directory key is dropped, so make file paths standalone
    for key in ("csv", "schema"):
        if key in ds:
            ds[key] = str(ex.resolve_path(cfg, ds[key]))
    text = ex.dumps(doc)
    ex.write_atomic(out / "best.json", text)
    _emit(text)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser, out_default: Optional[str] = "runs/latest") -> None:
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--threads", type=int, help="cap BLAS threads")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a dotted config key, e.g. train.lr0=0.01 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spam", description="Scalable polynomial additive models")
    parser.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="recompute the task metric of a saved model")
    _common(p, None)
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="per-term contributions to one logit")
    _common(p, None)
    p.add_argument("--model", required=True)
    p.add_argument("--row", help="comma-separated raw feature values")
    p.add_argument("--normalized", action="store_true", help="--row is already scaled to [0, 1]")
    p.add_argument("--row-index", type=int, help="row of --split from the config dataset")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--class", dest="class_index", type=int, default=0)
    p.add_argument("--top-e", type=int, default=10)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("verify", help="low-rank vs dense oracle and gradient checks")
    _common(p, None)
    p.add_argument("--max-d", type=int, default=6)
    p.add_argument("--max-k", type=int, default=3)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--full-report", action="store_true", help="include every forward case")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("spectra", help="sorted singular values and decay fit")
    _common(p)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_spectra)

    p = sub.add_parser("search", help="random hyperparameter search")
    _common(p)
    p.add_argument("--space", help="JSON search space (default: the built-in grid)")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--parallelism", type=int, default=1)
    p.set_defaults(func=cmd_search)
    return parser


def _error_kind(err: BaseException):
    if isinstance(err, (SchemaError, DataError)):
        return err.kind, EXIT_SCHEMA
    if isinstance(err, SpamError):
        return err.kind, EXIT_FAILURE
    if isinstance(err, (OSError, json.JSONDecodeError)):
        return "io", EXIT_IO
    if isinstance(err, (KeyError, TypeError, ValueError)):
        return "config", EXIT_FAILURE
    return "internal", EXIT_FAILURE


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.threads:
        from threadpoolctl import threadpool_limits

        limits = threadpool_limits(limits=args.threads)
    else:
        limits = contextlib.nullcontext()
    try:
        with limits:
            return args.func(args)
    except Exception as err:
        kind, code = _error_kind(err)
        log.debug("command failed", exc_info=True)
        payload = {"kind": kind, "message": str(err), "type": type(err).__name__}
        for attr in ("row", "column", "diagnostics"):
            if getattr(err, attr, None) is not None:
                payload[attr] = getattr(err, attr)
        _emit(json.dumps({"error": payload}, sort_keys=True, default=str) + "\n")
        return code


if __name__ == "__main__":
    sys.exit(main())

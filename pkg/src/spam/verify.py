"""Oracle harness: low-rank evaluation vs dense expansion, and gradient checks."""

from __future__ import annotations

import itertools
from typing import Callable, Optional

import numpy as np

from .neural_feats import init_bank
from .optimize import LOSS_KINDS, grad_check
from .poly_core import RankSpec, SpamParams, eval_expanded, expand_full, init_params, poly_forward

FORWARD_TOL = 1e-9
GRAD_TOL = 1e-4


def random_params(rng: np.random.Generator, d: int, degree: int, num_classes: int = 1, max_rank: int = 3) -> SpamParams:
    spec = RankSpec.from_ranks(rng.integers(1, max_rank + 1, size=degree - 1).tolist())
    params = init_params(d, num_classes, spec, seed=int(rng.integers(2**31)), singular_scale=1.0)
    params.bias[:] = rng.normal(size=num_classes)
    params.order1[...] = rng.normal(size=params.order1.shape)
    return params


def _grad_case(rng, degree, loss_kind, neural, max_d):
    d = int(min(max_d, 3))
    C = 3 if loss_kind == "softmax-cross-entropy" else 1
    n = 6
    X = rng.random((n, d))
    if loss_kind == "mse":
        y = rng.normal(size=n)
    elif loss_kind == "binary-logistic":
        y = rng.integers(0, 2, size=n)
    else:
        y = rng.integers(0, C, size=n)
    bank = None
    width = d
    if neural:
        bank = init_bank("deep", d, degree, subnets=1, seed=int(rng.integers(2**31)))
        width = bank.output_dim
    params = random_params(rng, width, degree, C, max_rank=2 * C * width)
    err = grad_check(params, X, y, loss_kind, bank=bank, seed=int(rng.integers(2**31)))
    return err


def run_verify(
    max_d: int = 6,
    max_k: int = 3,
    trials: int = 100,
    seed: int = 0,
    forward: Optional[Callable] = None,
    grad: bool = True,
) -> dict:
    """Compare the low-rank path with the dense oracle on random instances.

    ``forward`` substitutes the evaluation under test (defaults to
    :func:`poly_forward`); it exists so the harness itself can be checked
    against a deliberately broken contraction.
    """
    forward = forward or poly_forward
    rng = np.random.default_rng(seed)
    worst_forward = 0.0
    cases = []
    for _ in range(trials):
        d = int(rng.integers(1, max_d + 1))
        k = int(rng.integers(1, max_k + 1))
        params = random_params(rng, d, k)
        x = rng.random(d)
        dev = abs(forward(params, x) - eval_expanded(expand_full(params), x))
        worst_forward = max(worst_forward, dev)
        cases.append({"d": d, "k": k, "ranks": list(params.rank_spec.ranks), "deviation": dev})
    grad_cases = []
    if grad and trials > 0:
        for degree, loss_kind, neural in itertools.product(range(1, max_k + 1), LOSS_KINDS, (False, True)):
            err = _grad_case(rng, degree, loss_kind, neural, max_d)
            grad_cases.append({"degree": degree, "loss": loss_kind, "neural": neural, "max_rel_error": err})
    worst_grad = max((c["max_rel_error"] for c in grad_cases), default=0.0)
    passed = worst_forward <= FORWARD_TOL and worst_grad <= GRAD_TOL
    return {
        "passed": bool(passed),
        "trials": trials,
        "forward_max_deviation": worst_forward,
        "forward_tolerance": FORWARD_TOL,
        "gradient_max_rel_error": worst_grad,
        "gradient_tolerance": GRAD_TOL,
        "forward_cases": cases,
        "gradient_cases": grad_cases,
    }

"""Training: losses, regularizers, lambda-dropout, AdamW with cosine annealing.

Gradients are computed by an explicit reverse pass over the closed-form
polynomial and the per-feature nets; no autodiff framework is involved.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .data_metrics import DatasetSplit, higher_is_better, minibatches, task_metric
from .errors import NonFiniteError
from .neural_feats import FeatureNetBank, activation_pattern, bank_backward, bank_features
from .poly_core import SpamParams, order_inputs, forward_batch, rescale_features

log = logging.getLogger(__name__)

LOSS_KINDS = ("mse", "binary-logistic", "softmax-cross-entropy")
TASK_LOSS = {"regression": "mse", "binary": "binary-logistic", "multiclass": "softmax-cross-entropy"}
MAX_BATCH = 1024


@dataclass
class TrainConfig:
    lr0: float = 1e-2
    eta_min: float = 0.0
    weight_decay: float = 0.0
    beta_reg: float = 0.0
    lambda_dropout_p: float = 0.0
    epochs: int = 100
    batch_size: int = 1024
    seed: int = 0
    convex_mode: bool = False
    loss_kind: str = "mse"
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    checkpoint: str = "best_val"  # or "last"

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if self.eta_min < 0 or self.weight_decay < 0 or self.beta_reg < 0:
            raise ValueError("eta_min, weight_decay and beta_reg must be >= 0")
        if not 0 <= self.lambda_dropout_p < 1:
            raise ValueError(f"lambda_dropout_p must be in [0, 1), got {self.lambda_dropout_p}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 1 <= self.batch_size <= MAX_BATCH:
            raise ValueError(f"batch_size must be in [1, {MAX_BATCH}], got {self.batch_size}")
        if self.checkpoint not in ("best_val", "last"):
            raise ValueError(f"checkpoint must be 'best_val' or 'last', got {self.checkpoint!r}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["adam_betas"] = list(self.adam_betas)
        return out


# ---------------------------------------------------------------------------
# losses and penalties


def _signed_labels(target):
    y = np.asarray(target, dtype=np.float64).ravel()
    if not np.all(np.isin(y, (-1.0, 0.0, 1.0))):
        raise ValueError("binary labels must be in {0, 1} or {-1, +1}")
    return np.where(y == 0, -1.0, y)


def _class_labels(target, num_classes):
    y = np.asarray(target).ravel()
    if y.size and (np.any(y != np.round(y)) or y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"class labels must be integers in [0, {num_classes})")
    return y.astype(np.int64)


def loss_and_grad(kind: str, logits, target) -> Tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient w.r.t. ``logits`` (shape ``(n, C)``)."""
    Z = np.asarray(logits, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[:, None]
    n = Z.shape[0]
    if kind == "mse":
        y = np.asarray(target, dtype=np.float64).reshape(n, -1)
        diff = Z - y
        return float(np.mean(diff**2)), 2.0 * diff / diff.size
    if kind == "binary-logistic":
        y = _signed_labels(target)
        margin = y * Z[:, 0]
        value = float(np.mean(np.logaddexp(0.0, -margin)))
        grad = np.zeros_like(Z)
        # d/dz log(1 + exp(-y z)) = -y * sigmoid(-y z)
        grad[:, 0] = -y * np.exp(-np.logaddexp(0.0, margin)) / n
        return value, grad
    if kind == "softmax-cross-entropy":
        y = _class_labels(target, Z.shape[1])
        shifted = Z - Z.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1))
        log_prob = shifted[np.arange(n), y] - log_norm
        probs = np.exp(shifted - log_norm[:, None])
        probs[np.arange(n), y] -= 1.0
        return float(-np.mean(log_prob)), probs / n
    raise ValueError(f"unknown loss kind {kind!r}")


def loss(kind: str, prediction, target) -> float:
    return loss_and_grad(kind, prediction, target)[0]


def l1_basis_penalty(params: SpamParams) -> float:
    """Sum of absolute values of every higher-order basis entry."""
    return float(sum(np.abs(params.bases[l]).sum() for l in params.rank_spec.orders))


def dropout_scales(shapes: Dict[int, tuple], p: float, rng: np.random.Generator) -> Dict[int, np.ndarray]:
    """Inverted-dropout multipliers: 0 with probability ``p``, else ``1/(1-p)``."""
    keep = 1.0 - p
    return {l: (rng.random(shape) < keep) / keep for l, shape in shapes.items()}


def lambda_dropout(values, p: float, rng: np.random.Generator, training: bool = True):
    """Zero each singular value with probability ``p`` and rescale the survivors.

    Accepts one array or a dict of arrays keyed by order. Identity at
    inference time and for ``p == 0``.
    """
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return values
    if isinstance(values, dict):
        scales = dropout_scales({l: v.shape for l, v in values.items()}, p, rng)
        return {l: v * scales[l] for l, v in values.items()}
    arr = np.asarray(values, dtype=np.float64)
    return arr * dropout_scales({0: arr.shape}, p, rng)[0]


def cosine_lr(t: int, T: int, lr0: float, eta_min: float = 0.0) -> float:
    return eta_min + 0.5 * (lr0 - eta_min) * (1.0 + math.cos(math.pi * t / T))


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0
    horizon: int = 0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def for_arrays(cls, arrays: Dict[str, np.ndarray], horizon: int = 0, betas=(0.9, 0.999), eps=1e-8):
        return cls(
            {k: np.zeros_like(a) for k, a in arrays.items()},
            {k: np.zeros_like(a) for k, a in arrays.items()},
            0,
            horizon,
            tuple(betas),
            eps,
        )


def adamw_step(
    state: OptimizerState,
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    lr: float,
    weight_decay: float = 0.0,
    convex_mode: bool = False,
) -> OptimizerState:
    """One bias-corrected Adam step with decoupled weight decay, in place.

    Arrays in ``params`` are updated in place. In convex mode every entry is
    projected onto the nonnegative orthant afterwards.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = np.argwhere(~np.isfinite(g))[0].tolist()
            raise NonFiniteError(
                f"non-finite gradient in {name} at {bad} (step {state.t + 1})",
                {"parameter": name, "index": bad, "step": state.t + 1},
            )
    state.t += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, theta in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        theta *= 1.0 - lr * weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if convex_mode:
            np.maximum(theta, 0.0, out=theta)
    return state


# ---------------------------------------------------------------------------
# gradients


def model_arrays(params: SpamParams, bank: Optional[FeatureNetBank] = None) -> Dict[str, np.ndarray]:
    arrays = params.arrays()
    if bank is not None:
        arrays.update(bank.arrays())
    return arrays


def _use_gram(params: SpamParams, l: int) -> bool:
    """Order 2 with ``C * d <= r`` is cheaper through ``d x d`` Gram matrices."""
    return l == 2 and params.num_classes * params.num_features <= params.rank_spec.rank(l)


def _order2_coefficients(U: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Per-class ``U^T diag(lam_c) U``, shape ``(C, d, d)``."""
    return (U.T[None] * lam[:, None, :]) @ U


def _forward_split(params: SpamParams, inputs, singular, gram) -> Tuple[np.ndarray, Dict[int, np.ndarray]]:
    """Logits plus the basis projections of the orders evaluated directly."""
    logits = inputs[1] @ params.order1.T + params.bias
    proj = {}
    for l in params.rank_spec.orders:
        F = inputs[l]
        if l in gram:
            A = _order2_coefficients(params.bases[l], singular[l])
            logits = logits + np.einsum("nd,cde,ne->nc", F, A, F)
        else:
            proj[l] = F @ params.bases[l].T
            logits = logits + proj[l] ** l @ singular[l].T
    return logits, proj


def objective_and_grads(
    params: SpamParams,
    X,
    y,
    loss_kind: str,
    bank: Optional[FeatureNetBank] = None,
    beta_reg: float = 0.0,
    scales: Optional[Dict[int, np.ndarray]] = None,
    features: Optional[Dict[int, np.ndarray]] = None,
):
    """Mean loss + ``beta_reg * ||U||_1`` and its gradient for every array.

    ``scales`` are lambda-dropout multipliers; ``features`` may carry
    precomputed rescaled inputs for the linear model.
    """
    caches = None
    if bank is not None:
        features, caches = bank_features(bank, X, params.degree, return_cache=True)
    singular = params.singular
    if scales is not None:
        singular = {l: params.singular[l] * scales[l] for l in params.rank_spec.orders}
    inputs = order_inputs(params, np.asarray(X, dtype=np.float64), features)
    gram = {l for l in params.rank_spec.orders if _use_gram(params, l)}
    logits, proj = _forward_split(params, inputs, singular, gram)
    value, G = loss_and_grad(loss_kind, logits, y)
    grads = {"bias": G.sum(axis=0), "order1": G.T @ inputs[1]}
    feature_grads = {1: G @ params.order1} if bank is not None else None
    for l in params.rank_spec.orders:
        F, U, lam = inputs[l], params.bases[l], singular[l]
        if l in gram:
            # sum_n G_nc F_n F_n^T carries everything the order-2 gradients need
            M = (F.T[None] * G.T[:, None, :]) @ F
            UM = U[None] @ M
            d_sing = np.einsum("crd,rd->cr", UM, U)
            d_bases = 2.0 * np.einsum("cr,crd->rd", lam, UM)
            if bank is not None:
                A = _order2_coefficients(U, lam)
                feature_grads[l] = 2.0 * np.einsum("nc,cde,ne->nd", G, A, F)
        else:
            Z = proj[l]
            d_sing = G.T @ Z**l
            dZ = (G @ lam) * (l * Z ** (l - 1))
            d_bases = dZ.T @ F
            if bank is not None:
                feature_grads[l] = dZ @ U
        if scales is not None:
            d_sing = d_sing * scales[l]
        grads[f"singular/{l}"] = d_sing
        if beta_reg:
            d_bases = d_bases + beta_reg * np.sign(U)
        grads[f"bases/{l}"] = d_bases
    if beta_reg:
        value += beta_reg * sum(float(np.abs(params.bases[l]).sum()) for l in params.rank_spec.orders)
    if bank is not None:
        for name, arr in bank.arrays().items():
            grads[name] = np.zeros_like(arr)
        for order, dF in feature_grads.items():
            for name, g in bank_backward(bank, order, caches[order], dF).items():
                grads[name] += g
    return value, grads, logits


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: SpamParams
    bank: Optional[FeatureNetBank]
    history: List[dict]
    best_epoch: int
    best_val: float


def predict_logits(params: SpamParams, X, bank: Optional[FeatureNetBank] = None, chunk: int = 8192) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    out = []
    for i in range(0, max(len(X), 1), chunk):
        Xb = X[i : i + chunk]
        feats = bank_features(bank, Xb, params.degree) if bank is not None else None
        out.append(forward_batch(params, Xb, features=feats))
    return np.vstack(out) if out else np.zeros((0, params.num_classes))


def _precomputed_features(params, X):
    return {l: rescale_features(X, l) for l in range(1, params.degree + 1)}


def train(
    params: SpamParams,
    data: DatasetSplit,
    cfg: TrainConfig,
    bank: Optional[FeatureNetBank] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Minibatch AdamW with cosine annealing; returns the best-validation (or last) checkpoint.

    The inputs are copied, never mutated. Each step draws lambda-dropout
    masks, evaluates loss plus L1 basis penalty, back-propagates, and takes one
    AdamW step at the cosine-annealed rate (then projects in convex mode).
    """
    params = params.copy()
    bank = bank.copy() if bank is not None else None
    if cfg.convex_mode:
        params.mode_flags["convex_mode"] = True
    arrays = model_arrays(params, bank)
    n = len(data.y_train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    horizon = steps_per_epoch * cfg.epochs
    state = OptimizerState.for_arrays(arrays, horizon, cfg.adam_betas, cfg.adam_eps)
    dropout_rng = np.random.default_rng([cfg.seed, 7])
    shapes = {l: params.singular[l].shape for l in params.rank_spec.orders}
    train_feats = _precomputed_features(params, data.X_train) if bank is None else None
    maximize = higher_is_better(data.task)

    history = []
    best = (None, None, -1, math.nan)
    step = 0
    for epoch in range(cfg.epochs):
        total, lr = 0.0, cfg.lr0
        for batch_index, idx in enumerate(minibatches(n, cfg.batch_size, cfg.seed, epoch)):
            scales = None
            if cfg.lambda_dropout_p > 0 and shapes:
                scales = dropout_scales(shapes, cfg.lambda_dropout_p, dropout_rng)
            feats = {l: F[idx] for l, F in train_feats.items()} if train_feats is not None else None
            value, grads, _ = objective_and_grads(
                params, data.X_train[idx], data.y_train[idx], cfg.loss_kind, bank, cfg.beta_reg, scales, feats
            )
            if not math.isfinite(value):
                raise NonFiniteError(
                    f"non-finite training loss at epoch {epoch}, batch {batch_index}",
                    {"epoch": epoch, "batch_index": batch_index, "step": step, "loss": value},
                )
            lr = cosine_lr(step, horizon, cfg.lr0, cfg.eta_min)
            try:
                adamw_step(state, arrays, grads, lr, cfg.weight_decay, cfg.convex_mode)
            except NonFiniteError as err:
                err.diagnostics.update(epoch=epoch, batch_index=batch_index)
                raise
            total += value * len(idx)
            step += 1
        val_logits = predict_logits(params, data.X_val, bank)
        if np.all(np.isfinite(val_logits)):
            val_metric = task_metric(data.task, val_logits, data.y_val)
        else:
            val_metric = math.nan
        record = {"epoch": epoch, "train_loss": total / n, "val_metric": val_metric, "lr": lr}
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if math.isfinite(val_metric) and (
            best[0] is None or (val_metric > best[3] if maximize else val_metric < best[3])
        ):
            best = (params.copy(), bank.copy() if bank is not None else None, epoch, val_metric)
    if cfg.checkpoint == "last":
        return TrainResult(params, bank, history, cfg.epochs - 1, history[-1]["val_metric"])
    if best[0] is None:
        raise NonFiniteError("validation metric was never finite", {"epochs": cfg.epochs})
    return TrainResult(best[0], best[1], history, best[2], best[3])


# ---------------------------------------------------------------------------
# verification


def grad_check(
    params: SpamParams,
    X,
    y,
    loss_kind: str,
    bank: Optional[FeatureNetBank] = None,
    beta_reg: float = 0.0,
    fraction: float = 0.05,
    min_count: int = 10,
    h: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Largest relative error between reverse-mode and central-difference gradients.

    A random ``fraction`` of all scalar parameters (at least ``min_count``) is
    probed. Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    parameters with vanishing gradient from dividing rounding noise by ~0.
    Probes whose +/-h stencil flips a feature-net activation (ReLU or the
    clipped exponential unit) straddle a kink and are left out.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    params = params.copy()
    bank = bank.copy() if bank is not None else None
    arrays = model_arrays(params, bank)
    _, grads, _ = objective_and_grads(params, X, y, loss_kind, bank, beta_reg)

    def f():
        return objective_and_grads(params, X, y, loss_kind, bank, beta_reg)[0]

    def pattern():
        return activation_pattern(bank, X, params.degree) if bank is not None else b""

    base_pattern = pattern()

    names = sorted(arrays)
    sizes = np.array([arrays[k].size for k in names])
    total = int(sizes.sum())
    count = min(total, max(min_count, math.ceil(fraction * total)))
    picks = np.random.default_rng(seed).choice(total, size=count, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in np.sort(picks):
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[which]
        arr = arrays[name].reshape(-1)
        pos = int(flat - offsets[which])
        saved = arr[pos]
        arr[pos] = saved + h
        up, up_pattern = f(), pattern()
        arr[pos] = saved - h
        down, down_pattern = f(), pattern()
        arr[pos] = saved
        if up_pattern != base_pattern or down_pattern != base_pattern:
            continue
        numeric = (up - down) / (2 * h)
        analytic = float(grads[name].reshape(-1)[pos])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
    return worst

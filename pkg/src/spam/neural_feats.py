"""Per-feature networks that replace the rescaled inputs of each order.

Every original feature gets its own small fully connected net mapping one
scalar to ``s`` outputs. Nets for all ``d`` features of one order are stored
stacked, so a layer holds weights of shape ``(d, fan_in, fan_out)`` and runs as
one batched contraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .errors import ShapeError, UnsupportedOrderError
from .poly_core import (
    DIAGONAL,
    NEURAL_PAIRWISE,
    NEURAL_UNARY,
    Explanation,
    SpamParams,
    decompose_terms,
    forward_batch,
    pairwise_coefficients,
)

ARCHITECTURES = {
    # hidden widths, hidden activation
    "deep": ([64, 64, 32], "relu"),
    "wide": ([1024], "exu"),
}


@dataclass
class Layer:
    weight: np.ndarray  # (d, fan_in, fan_out)
    bias: np.ndarray  # (d, fan_out)
    activation: str  # "relu", "exu" or "linear"


@dataclass
class FeatureNetBank:
    """Stacked per-feature nets, one list of layers per order.

    With ``tied`` set, every order shares the order-1 layers.
    """

    num_features: int
    subnets: int
    nets: Dict[int, List[Layer]]
    arch: str = "custom"
    tied: bool = False
    degree: int = field(default=0)

    def __post_init__(self):
        if not self.degree:
            self.degree = max(self.nets)

    @property
    def output_dim(self) -> int:
        return self.num_features * self.subnets

    def layers(self, order: int) -> List[Layer]:
        return self.nets[1] if self.tied else self.nets[order]

    def column_feature(self) -> np.ndarray:
        """Original feature index of every expanded column."""
        return np.repeat(np.arange(self.num_features), self.subnets)

    def arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for order, layers in sorted(self.nets.items()):
            for i, layer in enumerate(layers):
                out[f"nets/{order}/{i}/weight"] = layer.weight
                out[f"nets/{order}/{i}/bias"] = layer.bias
        return out

    def copy(self) -> "FeatureNetBank":
        nets = {
            o: [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in layers]
            for o, layers in self.nets.items()
        }
        return FeatureNetBank(self.num_features, self.subnets, nets, self.arch, self.tied, self.degree)

    def net_param_count(self, order: int = 1) -> int:
        """Scalars in the net of a single feature at ``order``."""
        return sum(l.weight[0].size + l.bias[0].size for l in self.layers(order))


def init_bank(
    arch: str,
    d: int,
    degree: int,
    subnets: int = 1,
    seed: int = 0,
    tied: bool = False,
) -> FeatureNetBank:
    """Fan-in scaled uniform initialization, deterministic in ``seed``."""
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown feature-net architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
    hidden, act = ARCHITECTURES[arch]
    widths = [1] + list(hidden) + [subnets]
    rng = np.random.default_rng(seed)
    nets = {}
    for order in [1] if tied else range(1, degree + 1):
        layers = []
        for li, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = 1.0 / math.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(d, fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=(d, fan_out))
            last = li == len(widths) - 2
            layer_act = "linear" if last else act
            if layer_act == "exu":
                # shift points spread over the unit interval
                b = rng.uniform(0.0, 1.0, size=(d, fan_out))
            layers.append(Layer(w, b, layer_act))
        nets[order] = layers
    return FeatureNetBank(d, subnets, nets, arch, tied, degree)


def identity_bank(d: int, degree: int) -> FeatureNetBank:
    """Single linear layer with weight 1 and bias 0 per feature and order."""
    nets = {
        order: [Layer(np.ones((d, 1, 1)), np.zeros((d, 1)), "linear")]
        for order in range(1, degree + 1)
    }
    return FeatureNetBank(d, 1, nets, "identity", False, degree)


def _layer_forward(layer: Layer, H: np.ndarray):
    if layer.activation == "exu":
        # exp(w) * (x - b): the shift sits before the (positive) scale
        pre = np.exp(layer.weight[:, 0, :])[None] * (H - layer.bias[None])
        return np.clip(pre, 0.0, 1.0), pre
    pre = np.einsum("ndi,dio->ndo", H, layer.weight) + layer.bias[None]
    if layer.activation == "relu":
        return np.maximum(pre, 0.0), pre
    return pre, pre


def bank_forward(bank: FeatureNetBank, order: int, X, return_cache: bool = False):
    """Batched feature map ``(n, d) -> (n, d*s)`` in feature-major column order."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != bank.num_features:
        raise ShapeError(f"expected (n, {bank.num_features}) inputs, got {X.shape}")
    H = X[:, :, None]
    cache = [H]
    for layer in bank.layers(order):
        H, pre = _layer_forward(layer, H)
        cache.append(pre)
        cache.append(H)
    out = H.reshape(X.shape[0], -1)
    if return_cache:
        return out, cache
    return out


def bank_backward(bank: FeatureNetBank, order: int, cache, grad_out: np.ndarray) -> Dict[str, np.ndarray]:
    """Gradients of the net weights at ``order`` given ``d loss / d output``."""
    layers = bank.layers(order)
    key_order = 1 if bank.tied else order
    n = grad_out.shape[0]
    G = grad_out.reshape(n, bank.num_features, bank.subnets)
    grads = {}
    for li in range(len(layers) - 1, -1, -1):
        layer = layers[li]
        H_in, pre = cache[2 * li], cache[2 * li + 1]
        if layer.activation == "relu":
            G = G * (pre > 0)
        elif layer.activation == "exu":
            G = G * ((pre > 0) & (pre < 1))
        name = f"nets/{key_order}/{li}"
        if layer.activation == "exu":
            scale = np.exp(layer.weight[:, 0, :])
            diff = H_in - layer.bias[None]
            grads[f"{name}/weight"] = np.einsum("ndo,ndo->do", G, diff * scale[None])[:, None, :]
            grads[f"{name}/bias"] = -np.einsum("ndo->do", G * scale[None])
            G = np.einsum("ndo,do->nd", G, scale)[:, :, None]
        else:
            grads[f"{name}/weight"] = np.einsum("ndi,ndo->dio", H_in, G)
            grads[f"{name}/bias"] = G.sum(axis=0)
            G = np.einsum("ndo,dio->ndi", G, layer.weight)
    return grads


def activation_pattern(bank: FeatureNetBank, X, degree: int) -> bytes:
    """Packed on/off state of every kinked unit; equal bytes mean the same linear piece."""
    bits = []
    for order in range(1, degree + 1):
        _, cache = bank_forward(bank, order, X, return_cache=True)
        for layer, pre in zip(bank.layers(order), cache[1::2]):
            if layer.activation == "relu":
                bits.append(pre > 0)
            elif layer.activation == "exu":
                bits.append(pre > 0)
                bits.append(pre < 1)
    if not bits:
        return b""
    return np.packbits(np.concatenate([b.ravel() for b in bits])).tobytes()


def feature_map_forward(bank: FeatureNetBank, order: int, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (bank.num_features,):
        raise ShapeError(f"x has shape {x.shape}, expected ({bank.num_features},)")
    return bank_forward(bank, order, x[None, :])[0]


def bank_features(bank: FeatureNetBank, X, degree: int, return_cache: bool = False):
    """Inputs for every order of a degree-``degree`` model."""
    feats, caches = {}, {}
    for order in range(1, degree + 1):
        if return_cache:
            feats[order], caches[order] = bank_forward(bank, order, X, return_cache=True)
        else:
            feats[order] = bank_forward(bank, order, X)
    return (feats, caches) if return_cache else feats


def _check_dims(params: SpamParams, bank: FeatureNetBank):
    if params.num_features != bank.output_dim:
        raise ShapeError(
            f"model expects {params.num_features} inputs but the bank produces {bank.output_dim}"
        )


def neural_forward_batch(params: SpamParams, bank: FeatureNetBank, X) -> np.ndarray:
    _check_dims(params, bank)
    return forward_batch(params, X, features=bank_features(bank, X, params.degree))


def neural_spam_forward(params: SpamParams, bank: FeatureNetBank, x):
    """Logit (``C == 1``) or logits for one raw input; no geometric rescaling."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (bank.num_features,):
        raise ShapeError(f"x has shape {x.shape}, expected ({bank.num_features},)")
    logits = neural_forward_batch(params, bank, x[None, :])[0]
    return float(logits[0]) if params.num_classes == 1 else logits


def neural_explain(params: SpamParams, bank: FeatureNetBank, x, class_index: int = 0) -> Explanation:
    """Per original feature and feature pair, with subnet terms summed in."""
    if params.degree > 2:
        raise UnsupportedOrderError(
            f"exact per-term decomposition exists only for degree <= 2, model has degree {params.degree}"
        )
    _check_dims(params, bank)
    if not 0 <= class_index < params.num_classes:
        raise IndexError(f"class_index {class_index} out of range for C={params.num_classes}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (bank.num_features,):
        raise ShapeError(f"x has shape {x.shape}, expected ({bank.num_features},)")
    feats = bank_features(bank, x[None, :], params.degree)
    coef = pairwise_coefficients(params, class_index) if params.degree == 2 else None
    terms = decompose_terms(
        params.order1[class_index],
        feats[1][0],
        coef,
        feats[2][0] if params.degree == 2 else None,
        bank.num_features,
        NEURAL_UNARY,
        NEURAL_PAIRWISE,
    )
    logit = float(forward_batch(params, x[None, :], features=feats)[0, class_index])
    return Explanation(float(params.bias[class_index]), terms, logit, class_index)


def bank_to_dict(bank: FeatureNetBank) -> dict:
    return {
        "d": bank.num_features,
        "subnets": bank.subnets,
        "arch": bank.arch,
        "tied": bank.tied,
        "degree": bank.degree,
        "nets": {
            str(order): [
                {"activation": l.activation, "weight": l.weight.tolist(), "bias": l.bias.tolist()}
                for l in layers
            ]
            for order, layers in sorted(bank.nets.items())
        },
    }


def bank_from_dict(doc: dict) -> FeatureNetBank:
    nets = {
        int(order): [
            Layer(
                np.array(l["weight"], dtype=np.float64),
                np.array(l["bias"], dtype=np.float64),
                l["activation"],
            )
            for l in layers
        ]
        for order, layers in doc["nets"].items()
    }
    return FeatureNetBank(
        int(doc["d"]), int(doc["subnets"]), nets, doc.get("arch", "custom"), bool(doc.get("tied")), int(doc["degree"])
    )

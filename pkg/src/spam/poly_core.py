"""Low-rank polynomial additive models: parameters, evaluation and explanations.

A model of degree ``k`` scores an input ``x`` (``d`` features) for class ``c`` as::

    b_c + <u1_c, x> + sum_{l=2..k} sum_i lam_{l,i,c} * <u_{l,i}, xt_l> ** l

where ``xt_l = sign(x) * |x| ** (1/l)`` and the bases ``u_{l,i}`` are shared by
all classes. Every evaluation here runs in float64.
"""

from __future__ import annotations

import itertools
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateSpectrumError, OracleCapError, ShapeError, UnsupportedOrderError

FORMAT_VERSION = 1
DEFAULT_ORACLE_CAP = 10**7
DEFAULT_TAU = 1e-6
GAMMA_GRID = (1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0)


@dataclass(frozen=True)
class RankSpec:
    """Polynomial degree and the ranks of orders 2..degree (order 1 has rank 1)."""

    degree: int
    ranks: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
        if int(self.degree) != self.degree or self.degree < 1:
            raise ValueError(f"degree must be an integer >= 1, got {self.degree!r}")
        if len(self.ranks) != self.degree - 1:
            raise ValueError(
                f"degree {self.degree} needs {self.degree - 1} ranks, got {len(self.ranks)}"
            )
        if any(r < 1 for r in self.ranks):
            raise ValueError(f"ranks must be >= 1, got {self.ranks}")

    @classmethod
    def from_ranks(cls, ranks: Sequence[int]) -> "RankSpec":
        """Build from ``[r2, ..., rk]``; an empty list is the linear model."""
        return cls(len(ranks) + 1, tuple(ranks))

    @property
    def orders(self) -> range:
        """Higher orders carried by the model (2..degree)."""
        return range(2, self.degree + 1)

    def rank(self, order: int) -> int:
        if order == 1:
            return 1
        return self.ranks[order - 2]

    def cumulative_rank(self) -> int:
        return 1 + sum(self.ranks)


@dataclass
class SpamParams:
    """Full model state.

    ``bases[l]`` has shape ``(r_l, d)`` and is shared across classes;
    ``singular[l]`` has shape ``(C, r_l)`` and is class specific.
    """

    num_features: int
    num_classes: int
    rank_spec: RankSpec
    bias: np.ndarray
    order1: np.ndarray
    bases: Dict[int, np.ndarray] = field(default_factory=dict)
    singular: Dict[int, np.ndarray] = field(default_factory=dict)
    mode_flags: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.order1 = np.asarray(self.order1, dtype=np.float64)
        self.bases = {int(l): np.asarray(v, dtype=np.float64) for l, v in self.bases.items()}
        self.singular = {int(l): np.asarray(v, dtype=np.float64) for l, v in self.singular.items()}
        self.validate()

    def validate(self) -> None:
        d, C, spec = self.num_features, self.num_classes, self.rank_spec
        if d < 1 or C < 1:
            raise ShapeError(f"need d >= 1 and C >= 1, got d={d}, C={C}")
        _expect_shape("bias", self.bias, (C,))
        _expect_shape("order1", self.order1, (C, d))
        if set(self.bases) != set(spec.orders) or set(self.singular) != set(spec.orders):
            raise ShapeError(
                f"orders present {sorted(self.bases)}/{sorted(self.singular)} "
                f"do not match degree {spec.degree}"
            )
        for l in spec.orders:
            _expect_shape(f"bases[{l}]", self.bases[l], (spec.rank(l), d))
            _expect_shape(f"singular[{l}]", self.singular[l], (C, spec.rank(l)))

    @property
    def degree(self) -> int:
        return self.rank_spec.degree

    def arrays(self) -> Dict[str, np.ndarray]:
        """Named views of every trainable array (mutating them mutates the model)."""
        out = {"bias": self.bias, "order1": self.order1}
        for l in self.rank_spec.orders:
            out[f"bases/{l}"] = self.bases[l]
            out[f"singular/{l}"] = self.singular[l]
        return out

    def copy(self) -> "SpamParams":
        return SpamParams(
            self.num_features,
            self.num_classes,
            self.rank_spec,
            self.bias.copy(),
            self.order1.copy(),
            {l: v.copy() for l, v in self.bases.items()},
            {l: v.copy() for l, v in self.singular.items()},
            dict(self.mode_flags),
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays().values())

    def size(self) -> int:
        return sum(a.size for a in self.arrays().values())


def _expect_shape(name, arr, shape):
    if arr.shape != tuple(shape):
        raise ShapeError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")


def zeros_params(d: int, num_classes: int, rank_spec: RankSpec) -> SpamParams:
    return SpamParams(
        d,
        num_classes,
        rank_spec,
        np.zeros(num_classes),
        np.zeros((num_classes, d)),
        {l: np.zeros((rank_spec.rank(l), d)) for l in rank_spec.orders},
        {l: np.zeros((num_classes, rank_spec.rank(l))) for l in rank_spec.orders},
    )


def init_params(
    d: int,
    num_classes: int,
    rank_spec: RankSpec,
    seed: int = 0,
    basis_scale: float = 1.0,
    singular_scale: float = 0.1,
    nonnegative: bool = False,
) -> SpamParams:
    """Random initialization used before training.

    Bias and order-1 weights start at zero. Bases are Gaussian with
    variance ``basis_scale**2 / d`` so that ``<u, xt>`` stays O(1) on unit-box
    inputs; singular values are Gaussian with std ``singular_scale / sqrt(r)``.
    ``nonnegative`` takes absolute values, for convex-mode training.
    """
    rng = np.random.default_rng(seed)
    params = zeros_params(d, num_classes, rank_spec)
    for l in rank_spec.orders:
        r = rank_spec.rank(l)
        params.bases[l][...] = rng.normal(0.0, basis_scale / math.sqrt(d), size=(r, d))
        params.singular[l][...] = rng.normal(0.0, singular_scale / math.sqrt(r), size=(num_classes, r))
    if nonnegative:
        for arr in params.arrays().values():
            np.abs(arr, out=arr)
    return params


# ---------------------------------------------------------------------------
# evaluation


def rescale_features(x, order: int) -> np.ndarray:
    """Signed ``1/order`` power of every entry; ``order == 1`` returns ``x`` as is."""
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    x = np.asarray(x, dtype=np.float64)
    if order == 1:
        return x
    if order == 2:
        return np.sign(x) * np.sqrt(np.abs(x))
    if order == 3:
        return np.cbrt(x)
    return np.sign(x) * np.abs(x) ** (1.0 / order)


def order_inputs(params: SpamParams, X: np.ndarray, features=None) -> Dict[int, np.ndarray]:
    if features is not None:
        return features
    return {l: rescale_features(X, l) for l in range(1, params.degree + 1)}


def forward_batch(params: SpamParams, X, features=None, singular=None, return_cache=False):
    """Logits for a batch, shape ``(n, C)``.

    ``features`` maps each order to the matrix fed to that order in place of
    the rescaled inputs (used by the neural variant). ``singular`` overrides
    the class-specific values, e.g. with a dropout mask applied.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"expected a 2-d batch, got shape {X.shape}")
    inputs = order_inputs(params, X, features)
    for l, F in inputs.items():
        if F.shape[1] != params.num_features:
            raise ShapeError(
                f"order {l} input has {F.shape[1]} columns, model expects {params.num_features}"
            )
    singular = params.singular if singular is None else singular
    logits = inputs[1] @ params.order1.T + params.bias
    projections = {}
    powers = {}
    for l in params.rank_spec.orders:
        Z = inputs[l] @ params.bases[l].T
        P = Z**l
        logits = logits + P @ singular[l].T
        projections[l] = Z
        powers[l] = P
    if return_cache:
        return logits, {"inputs": inputs, "proj": projections, "powers": powers, "singular": singular}
    return logits


def poly_forward_multiclass(params: SpamParams, x) -> np.ndarray:
    """Per-class logits for one input; projections onto each basis are shared."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.num_features,):
        raise ShapeError(f"x has shape {x.shape}, expected ({params.num_features},)")
    logits = params.bias + params.order1 @ x
    for l in params.rank_spec.orders:
        proj = params.bases[l] @ rescale_features(x, l)
        logits = logits + params.singular[l] @ proj**l
    return logits


def poly_forward(params: SpamParams, x) -> float:
    if params.num_classes != 1:
        raise ShapeError(f"poly_forward needs a single-output model, got C={params.num_classes}")
    return float(poly_forward_multiclass(params, x)[0])


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# dense oracle


@dataclass
class ExpandedPolynomial:
    """Dense form: ``tensors[l]`` is the symmetric order-``l`` weight tensor."""

    bias: float
    tensors: Dict[int, np.ndarray]

    @property
    def num_features(self) -> int:
        return self.tensors[1].shape[0]


def oracle_cap() -> int:
    return int(float(os.environ.get("SPAM_ORACLE_CAP", DEFAULT_ORACLE_CAP)))


def expand_full(params: SpamParams, cap: Optional[int] = None) -> ExpandedPolynomial:
    """Materialize every order as a dense tensor.

    Entries are computed once per sorted multi-index and copied to all its
    permutations, so the result is symmetric bit for bit.
    """
    if params.num_classes != 1:
        raise ShapeError("expand_full needs a single-output model")
    d, k = params.num_features, params.degree
    cap = oracle_cap() if cap is None else cap
    if d**k > cap:
        raise OracleCapError(f"dense expansion needs {d}**{k} = {d**k} cells, cap is {cap}")
    tensors = {1: params.order1[0].copy()}
    for l in params.rank_spec.orders:
        W = np.zeros((d,) * l)
        for lam, u in zip(params.singular[l][0], params.bases[l]):
            outer = u
            for _ in range(l - 1):
                outer = np.multiply.outer(outer, u)
            W += lam * outer
        idx = np.sort(np.indices((d,) * l).reshape(l, -1), axis=0)
        tensors[l] = W[tuple(idx)].reshape((d,) * l)
    return ExpandedPolynomial(float(params.bias[0]), tensors)


def eval_expanded(poly: ExpandedPolynomial, x) -> float:
    """Contract each dense tensor against its rescaled input, one index tuple at a time."""
    x = np.asarray(x, dtype=np.float64)
    d = poly.num_features
    if x.shape != (d,):
        raise ShapeError(f"x has shape {x.shape}, expected ({d},)")
    total = poly.bias
    for l, W in sorted(poly.tensors.items()):
        if W.shape != (d,) * l:
            raise ShapeError(f"order {l} tensor has shape {W.shape}")
        xt = rescale_features(x, l)
        for index in itertools.product(range(d), repeat=l):
            term = W[index]
            for i in index:
                term *= xt[i]
            total += term
    return float(total)


# ---------------------------------------------------------------------------
# explanations


UNARY = "unary"
DIAGONAL = "diagonal"
PAIRWISE = "pairwise"
NEURAL_UNARY = "neural-unary"
NEURAL_PAIRWISE = "neural-pairwise"


@dataclass(frozen=True)
class Term:
    kind: str
    indices: Tuple[int, ...]
    contribution: float


@dataclass
class Explanation:
    """Additive decomposition of one logit. ``bias + sum(contributions) == logit``."""

    bias: float
    terms: List[Term]
    logit: float
    class_index: int

    def total(self) -> float:
        return self.bias + math.fsum(t.contribution for t in self.terms)

    def completeness_error(self) -> float:
        """``|bias + sum - logit|`` relative to ``max(1, |logit|)``."""
        return abs(self.total() - self.logit) / max(1.0, abs(self.logit))


def pairwise_coefficients(params: SpamParams, class_index: int = 0) -> np.ndarray:
    """Symmetric ``(d, d)`` matrix ``sum_i lam_{2,i,c} u_{2,i} u_{2,i}^T``."""
    if params.degree < 2:
        return np.zeros((params.num_features, params.num_features))
    U = params.bases[2]
    return (U.T * params.singular[2][class_index]) @ U


def _check_class(params, class_index):
    if not 0 <= class_index < params.num_classes:
        raise IndexError(f"class_index {class_index} out of range for C={params.num_classes}")


def decompose_terms(
    unary_weights: np.ndarray,
    unary_values: np.ndarray,
    coef: Optional[np.ndarray],
    pair_values: Optional[np.ndarray],
    groups: int,
    unary_kind: str,
    pair_kind: str,
) -> List[Term]:
    """Group-aggregated unary, diagonal and pairwise terms.

    ``unary_values`` and ``pair_values`` have ``groups * s`` entries laid out
    group-major; every block of ``s`` columns belongs to one original feature.
    """
    s = len(unary_values) // groups
    unary = (unary_weights * unary_values).reshape(groups, s).sum(axis=1)
    terms = [Term(unary_kind, (i,), float(unary[i])) for i in range(groups)]
    if coef is not None:
        # block (i, j) of coef * v v^T, summed over the s x s subnet pairs
        M = coef * np.outer(pair_values, pair_values)
        blocks = M.reshape(groups, s, groups, s).sum(axis=(1, 3))
        terms += [Term(DIAGONAL, (i,), float(blocks[i, i])) for i in range(groups)]
        for i, j in itertools.combinations(range(groups), 2):
            terms.append(Term(pair_kind, (i, j), float(blocks[i, j] + blocks[j, i])))
    terms.sort(key=lambda t: -abs(t.contribution))
    return terms


def explain(params: SpamParams, x, class_index: int = 0) -> Explanation:
    """Exact per-term contributions to one logit of a degree <= 2 model.

    Unary terms are ``u1_i * x_i``; the diagonal term of feature ``i`` is
    ``A_ii * x_i``; each unordered pair carries both halves,
    ``2 * A_ij * sqrt(x_i * x_j)``, where ``A`` is :func:`pairwise_coefficients`.
    """
    if params.degree > 2:
        raise UnsupportedOrderError(
            f"exact per-term decomposition exists only for degree <= 2, model has degree {params.degree}"
        )
    _check_class(params, class_index)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.num_features,):
        raise ShapeError(f"x has shape {x.shape}, expected ({params.num_features},)")
    coef = pairwise_coefficients(params, class_index) if params.degree == 2 else None
    terms = decompose_terms(
        params.order1[class_index],
        x,
        coef,
        rescale_features(x, 2),
        params.num_features,
        UNARY,
        PAIRWISE,
    )
    logit = float(poly_forward_multiclass(params, x)[class_index])
    return Explanation(float(params.bias[class_index]), terms, logit, class_index)


class InteractionCensus(NamedTuple):
    pairs: frozenset
    fraction: float


def active_interactions(params: SpamParams, class_index: int = 0, tau: float = DEFAULT_TAU) -> InteractionCensus:
    """Unordered feature pairs whose aggregated pairwise coefficient exceeds ``tau``."""
    if params.degree < 2:
        raise UnsupportedOrderError("active interactions need a model of degree >= 2")
    _check_class(params, class_index)
    d = params.num_features
    coef = np.abs(pairwise_coefficients(params, class_index))
    rows, cols = np.nonzero(np.triu(coef > tau, k=1))
    pairs = frozenset(zip(rows.tolist(), cols.tolist()))
    total = d * (d - 1) // 2
    return InteractionCensus(pairs, len(pairs) / total if total else 0.0)


def param_count(d: int, num_classes: int, rank_spec: RankSpec, shared: bool = True) -> int:
    """Number of scalars in a model with shared (or per-class) higher-order bases."""
    r = sum(rank_spec.ranks)
    C = num_classes
    if shared:
        return C * (1 + d) + C * r + d * r
    return C * (1 + d + r * (d + 1))


# ---------------------------------------------------------------------------
# spectra


@dataclass(frozen=True)
class SpectralFit:
    """``|lam_j| ~ c1 * exp(-c2 * j**gamma)``; ``residual`` is the log-domain RMS error."""

    c1: float
    c2: float
    gamma: float
    residual: float


def _fit_fixed_gamma(j, log_lam, gamma):
    A = np.column_stack([np.ones_like(j), -(j**gamma)])
    coef, *_ = np.linalg.lstsq(A, log_lam, rcond=None)
    resid = log_lam - A @ coef
    return coef, math.sqrt(float(np.mean(resid**2)))


def _golden_section(f, lo, hi, tol=1e-7, max_iter=200):
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    e = a + inv_phi * (b - a)
    fc, fe = f(c), f(e)
    for _ in range(max_iter):
        if b - a < tol:
            break
        if fc <= fe:
            b, e, fe = e, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, e, fe
            e = a + inv_phi * (b - a)
            fe = f(e)
    return (a + b) / 2.0


def spectral_fit(spectra: Sequence[Sequence[float]]) -> SpectralFit:
    """Fit the exponential decay model to one or more spectra.

    Each spectrum is sorted by magnitude (descending) and indexed from 1.
    Zero entries carry no log-domain information and are skipped. For a fixed
    ``gamma`` the fit is linear in ``(ln c1, c2)``; ``gamma`` is chosen on a
    coarse grid and then refined by golden-section search.
    """
    js, logs = [], []
    for seq in spectra:
        mags = np.sort(np.abs(np.asarray(seq, dtype=np.float64)))[::-1]
        idx = np.arange(1, len(mags) + 1, dtype=np.float64)
        keep = mags > 0
        js.append(idx[keep])
        logs.append(np.log(mags[keep]))
    j = np.concatenate(js) if js else np.zeros(0)
    log_lam = np.concatenate(logs) if logs else np.zeros(0)
    if j.size < 3:
        raise DegenerateSpectrumError(f"need at least 3 nonzero singular values, got {j.size}")

    def residual(g):
        return _fit_fixed_gamma(j, log_lam, g)[1]

    best = min(GAMMA_GRID, key=residual)
    lo, hi = max(1.0, best - 0.5), best + 0.5
    gamma = _golden_section(residual, lo, hi)
    if residual(best) <= residual(gamma):
        gamma = best
    (log_c1, c2), res = _fit_fixed_gamma(j, log_lam, gamma)
    return SpectralFit(float(math.exp(log_c1)), float(c2), float(gamma), float(res))


def sorted_spectra(params: SpamParams, order: int) -> List[np.ndarray]:
    """Per-class ``|lam|`` at ``order``, sorted descending."""
    if order not in params.singular:
        raise UnsupportedOrderError(f"model has no order-{order} terms")
    return [np.sort(np.abs(row))[::-1] for row in params.singular[order]]


# ---------------------------------------------------------------------------
# serialization


def params_to_dict(params: SpamParams) -> dict:
    spec = params.rank_spec
    return {
        "format_version": FORMAT_VERSION,
        "d": params.num_features,
        "C": params.num_classes,
        "rank_spec": {"degree": spec.degree, "ranks": list(spec.ranks)},
        "bias": params.bias.tolist(),
        "order1": params.order1.tolist(),
        "bases": {str(l): params.bases[l].tolist() for l in spec.orders},
        "singular": {str(l): params.singular[l].tolist() for l in spec.orders},
        "mode_flags": dict(params.mode_flags),
    }


def _array(value) -> np.ndarray:
    try:
        return np.array(value, dtype=np.float64)
    except ValueError as err:
        raise ShapeError(f"ragged array in model file: {err}") from None


def params_from_dict(doc: dict) -> SpamParams:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format_version {version!r}")
    spec = RankSpec(int(doc["rank_spec"]["degree"]), tuple(doc["rank_spec"]["ranks"]))
    d, C = int(doc["d"]), int(doc["C"])
    params = SpamParams(
        d,
        C,
        spec,
        _array(doc["bias"]),
        _array(doc["order1"]),
        {int(l): _array(v) for l, v in doc["bases"].items()},
        {int(l): _array(v) for l, v in doc["singular"].items()},
        dict(doc.get("mode_flags", {})),
    )
    if not params.is_finite():
        raise ValueError("model file contains non-finite parameters")
    return params

"""
Feature interaction layer.

Four modes share one code path:

  PLAIN    l = <w,x> + Σ_{i<j} <e_i, e_j>
  PLAIN3   PLAIN plus Σ_{i<j<t} <e_i, e_j, e_t>
  SEARCH   l = <w,x> + Σ α_ij · BN(<e_i, e_j>)        (α learned by GRDA)
  RETRAIN  l = <w,x> + Σ α_ij · G_ij · BN(<e_i, e_j>) (gates fixed, α by Adam)

BN here is non-affine (scale 1, shift 0) and per interaction column.  In
RETRAIN both BN and α weighting can be switched off for ablations.  Closed
gates are skipped, never computed-then-zeroed, so their α gradient is exactly
zero.

``<a, b, c>`` is the sum over coordinates of ``a[k] * b[k] * c[k]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from .data_model import InteractionId, Order, enumerate_interactions, field_index_matrix
from .errors import ModeError, SchemaError

DEFAULT_ALPHA_INIT = 0.7
DEFAULT_BN_EPS = 1e-5
DEFAULT_BN_MOMENTUM = 0.99


class InteractionMode(Enum):
    PLAIN = "plain"
    PLAIN3 = "plain3"
    SEARCH = "search"
    RETRAIN = "retrain"


class BNMode(Enum):
    TRAIN = "train"
    EVAL = "eval"


def order_key(order: Order) -> str:
    return order.name.lower()


def _check_length(arr: np.ndarray, m: int, order: Order, what: str) -> None:
    expected = len(enumerate_interactions(m, order))
    if arr.shape != (expected,):
        raise SchemaError(
            f"{what} for {order_key(order)}s over {m} fields needs {expected} entries, got {arr.shape}"
        )


# ---------------------------------------------------------------------------
# Architecture parameters and gates
# ---------------------------------------------------------------------------

@dataclass
class ArchitectureParams:
    field_count: int
    alpha: Dict[Order, np.ndarray]

    def __post_init__(self):
        for order, arr in self.alpha.items():
            self.alpha[order] = np.asarray(arr, dtype=np.float64)
            _check_length(self.alpha[order], self.field_count, order, "alpha")
            if not np.isfinite(self.alpha[order]).all():
                raise SchemaError(f"alpha for {order_key(order)}s contains non-finite values")

    @property
    def coverage(self) -> Tuple[Order, ...]:
        return tuple(sorted(self.alpha, key=lambda o: o.value))

    @classmethod
    def constant(
        cls, field_count: int, coverage: Tuple[Order, ...], value: float = DEFAULT_ALPHA_INIT
    ) -> "ArchitectureParams":
        return cls(field_count, {
            o: np.full(len(enumerate_interactions(field_count, o)), float(value)) for o in coverage
        })

    def ids(self, order: Order) -> List[InteractionId]:
        return enumerate_interactions(self.field_count, order)

    def items(self, order: Order):
        return zip(self.ids(order), self.alpha[order])


@dataclass
class GateSet:
    field_count: int
    gates: Dict[Order, np.ndarray]

    def __post_init__(self):
        for order, arr in self.gates.items():
            self.gates[order] = np.asarray(arr, dtype=bool)
            _check_length(self.gates[order], self.field_count, order, "gates")

    @property
    def coverage(self) -> Tuple[Order, ...]:
        return tuple(sorted(self.gates, key=lambda o: o.value))

    @classmethod
    def all_open(cls, field_count: int, coverage: Tuple[Order, ...]) -> "GateSet":
        return cls(field_count, {
            o: np.ones(len(enumerate_interactions(field_count, o)), dtype=bool) for o in coverage
        })

    def open_indices(self, order: Order) -> np.ndarray:
        return np.flatnonzero(self.gates[order])

    def open_ids(self, order: Order) -> List[InteractionId]:
        ids = enumerate_interactions(self.field_count, order)
        return [ids[k] for k in self.open_indices(order)]

    def open_count(self, order: Order) -> int:
        return int(self.gates[order].sum())

    def kept_fraction(self, order: Order) -> float:
        total = self.gates[order].size
        return self.open_count(order) / total if total else 0.0


def extract_gates(alpha_star: ArchitectureParams) -> GateSet:
    """Open exactly the interactions whose α is not exactly zero."""
    return GateSet(alpha_star.field_count, {o: a != 0.0 for o, a in alpha_star.alpha.items()})


# ---------------------------------------------------------------------------
# Batch normalisation (non-affine)
# ---------------------------------------------------------------------------

@dataclass
class BNState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = DEFAULT_BN_MOMENTUM
    eps: float = DEFAULT_BN_EPS

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ModeError(f"BN momentum must be in (0, 1), got {self.momentum}")
        if self.eps <= 0:
            raise ModeError(f"BN epsilon must be > 0, got {self.eps}")

    @classmethod
    def fresh(cls, width: int, momentum: float = DEFAULT_BN_MOMENTUM, eps: float = DEFAULT_BN_EPS) -> "BNState":
        return cls(np.zeros(width), np.ones(width), momentum, eps)

    def select(self, cols: np.ndarray) -> "BNState":
        return BNState(self.running_mean[cols].copy(), self.running_var[cols].copy(), self.momentum, self.eps)

    def absorb(self, cols: np.ndarray, sub: "BNState") -> None:
        self.running_mean[cols] = sub.running_mean
        self.running_var[cols] = sub.running_var


@dataclass
class BNCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    batch_stats: bool


def bn_forward(
    x: np.ndarray,
    mode: BNMode,
    state: BNState,
    update_stats: bool = True,
    use_batch_stats: bool = False,
) -> Tuple[np.ndarray, BNCache]:
    """Normalise each column of ``(B, K)`` *x*.

    TRAIN uses the batch mean and biased variance and, when *update_stats*,
    folds them into the running averages.  EVAL uses the running averages
    unless *use_batch_stats* is set.
    """
    if mode is BNMode.TRAIN or use_batch_stats:
        if mode is BNMode.TRAIN and x.shape[0] < 2:
            raise SchemaError(f"Batch normalisation in training needs >= 2 rows, got {x.shape[0]}")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        if mode is BNMode.TRAIN and update_stats:
            m = state.momentum
            state.running_mean = m * state.running_mean + (1.0 - m) * mean
            state.running_var = m * state.running_var + (1.0 - m) * var
        xhat = (x - mean) * inv_std
        return xhat, BNCache(xhat, inv_std, batch_stats=True)

    inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = (x - state.running_mean) * inv_std
    return xhat, BNCache(xhat, inv_std, batch_stats=False)


def bn_backward(dy: np.ndarray, cache: BNCache) -> np.ndarray:
    if not cache.batch_stats:
        return dy * cache.inv_std
    b = dy.shape[0]
    xhat = cache.xhat
    return cache.inv_std / b * (b * dy - dy.sum(axis=0) - xhat * (dy * xhat).sum(axis=0))


# ---------------------------------------------------------------------------
# Products
# ---------------------------------------------------------------------------

def pairwise_products(E: np.ndarray, idx: Optional[np.ndarray] = None) -> np.ndarray:
    """``(B, C)`` inner products of the field pairs in *idx* (all pairs by default)."""
    if idx is None:
        idx = field_index_matrix(enumerate_interactions(E.shape[1], Order.PAIR))
    return np.einsum("bcd,bcd->bc", E[:, idx[:, 0]], E[:, idx[:, 1]])


def triple_products(E: np.ndarray, idx: Optional[np.ndarray] = None) -> np.ndarray:
    if idx is None:
        idx = field_index_matrix(enumerate_interactions(E.shape[1], Order.TRIPLE), Order.TRIPLE)
    return np.einsum("bcd,bcd,bcd->bc", E[:, idx[:, 0]], E[:, idx[:, 1]], E[:, idx[:, 2]])


def products(E: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return pairwise_products(E, idx) if idx.shape[1] == 2 else triple_products(E, idx)


def products_backward(E: np.ndarray, idx: np.ndarray, dP: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``E`` of ``Σ dP * products(E, idx)``."""
    dE = np.zeros_like(E)
    order = idx.shape[1]
    for pos in range(order):
        others = [idx[:, q] for q in range(order) if q != pos]
        partner = E[:, others[0]]
        for col in others[1:]:
            partner = partner * E[:, col]
        np.add.at(dE, (slice(None), idx[:, pos]), dP[:, :, None] * partner)
    return dE


# ---------------------------------------------------------------------------
# Layer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSettings:
    mode: InteractionMode
    orders: Tuple[Order, ...] = (Order.PAIR,)
    bn: bool = True
    use_alpha: bool = True

    @property
    def bn_active(self) -> bool:
        return self.bn and self.mode in (InteractionMode.SEARCH, InteractionMode.RETRAIN)

    @property
    def alpha_active(self) -> bool:
        if self.mode is InteractionMode.SEARCH:
            return True
        return self.mode is InteractionMode.RETRAIN and self.use_alpha


def check_mode(
    settings: LayerSettings,
    alpha: Optional[Dict[Order, np.ndarray]],
    gates: Optional[GateSet],
    bn_states: Optional[Dict[Order, BNState]],
) -> None:
    mode, orders = settings.mode, settings.orders
    if mode is InteractionMode.PLAIN and orders != (Order.PAIR,):
        raise ModeError("PLAIN mode covers pairs only; use PLAIN3 for triples")
    if mode is InteractionMode.PLAIN3 and orders != (Order.PAIR, Order.TRIPLE):
        raise ModeError("PLAIN3 mode covers pairs and triples")
    if mode in (InteractionMode.PLAIN, InteractionMode.PLAIN3):
        if alpha:
            raise ModeError(f"{mode.name} mode takes no architecture parameters")
        if gates is not None:
            raise ModeError(f"{mode.name} mode takes no gates")
    if settings.alpha_active and (alpha is None or any(o not in alpha for o in orders)):
        raise ModeError(f"{mode.name} mode needs alpha for {', '.join(order_key(o) for o in orders)}")
    if mode is InteractionMode.RETRAIN and (gates is None or any(o not in gates.gates for o in orders)):
        raise ModeError("RETRAIN mode needs gates for every covered order")
    if settings.bn_active and (bn_states is None or any(o not in bn_states for o in orders)):
        raise ModeError(f"{mode.name} mode with batch norm needs BN state for every covered order")


@dataclass
class LayerOutput:
    linear: np.ndarray
    terms: Dict[Order, np.ndarray]
    total: np.ndarray

    def term_matrix(self) -> np.ndarray:
        """Weighted products of every order side by side, pairs first."""
        parts = [self.terms[o] for o in sorted(self.terms, key=lambda o: o.value)]
        return np.concatenate(parts, axis=1) if parts else np.zeros((self.linear.shape[0], 0))


@dataclass
class _OrderCache:
    idx: np.ndarray
    open: np.ndarray
    width: int
    z: np.ndarray
    weight: np.ndarray
    bn: Optional[BNCache] = None


@dataclass
class LayerCache:
    E: np.ndarray
    orders: Dict[Order, _OrderCache] = field(default_factory=dict)


@dataclass
class LayerGrads:
    E: np.ndarray
    linear: np.ndarray
    alpha: Dict[Order, np.ndarray]


def interaction_layer_forward(
    E: np.ndarray,
    linear: np.ndarray,
    settings: LayerSettings,
    alpha: Optional[Dict[Order, np.ndarray]] = None,
    gates: Optional[GateSet] = None,
    bn_states: Optional[Dict[Order, BNState]] = None,
    train: bool = False,
    update_stats: bool = False,
    use_batch_stats: bool = False,
) -> Tuple[LayerOutput, LayerCache]:
    """Interaction layer over ``(B, m, d)`` embeddings *E*.

    *linear* is the already-computed ``<w, x> + b`` per row; it passes through
    untouched so heads can use it as a separate coordinate.
    """
    check_mode(settings, alpha, gates, bn_states)
    m = E.shape[1]
    cache = LayerCache(E)
    terms: Dict[Order, np.ndarray] = {}
    total = linear.copy()

    for order in settings.orders:
        ids = enumerate_interactions(m, order)
        open_cols = gates.open_indices(order) if gates is not None and order in gates.gates else np.arange(len(ids))
        idx = field_index_matrix(ids, order)[open_cols]
        z = products(E, idx)

        bn_cache = None
        if settings.bn_active:
            state = bn_states[order]
            sub = state.select(open_cols)
            z, bn_cache = bn_forward(
                z, BNMode.TRAIN if train else BNMode.EVAL, sub,
                update_stats=update_stats, use_batch_stats=use_batch_stats,
            )
            if train and update_stats:
                state.absorb(open_cols, sub)

        weight = alpha[order][open_cols] if settings.alpha_active else np.ones(open_cols.size)
        weighted = z * weight
        terms[order] = weighted
        total = total + weighted.sum(axis=1)
        cache.orders[order] = _OrderCache(idx, open_cols, len(ids), z, weight, bn_cache)

    return LayerOutput(linear, terms, total), cache


def interaction_layer_backward(
    cache: LayerCache,
    d_linear: np.ndarray,
    d_terms: Dict[Order, np.ndarray],
) -> LayerGrads:
    """Backpropagate per-term gradients ``(B, K_o)``; closed α entries get exactly 0."""
    dE = np.zeros_like(cache.E)
    d_alpha: Dict[Order, np.ndarray] = {}
    for order, oc in cache.orders.items():
        dT = d_terms[order]
        full = np.zeros(oc.width)
        full[oc.open] = (dT * oc.z).sum(axis=0)
        d_alpha[order] = full
        dz = dT * oc.weight
        dP = bn_backward(dz, oc.bn) if oc.bn is not None else dz
        dE += products_backward(cache.E, oc.idx, dP)
    return LayerGrads(dE, d_linear, d_alpha)

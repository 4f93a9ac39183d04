"""
Optimisers.

* Adam (bias-corrected) for network weights.  Embedding and linear tables
  receive `SparseRows` gradients and are updated lazily: only rows present
  in the gradient move, and only their moments change.
* GRDA for architecture parameters.  After ``t`` steps with summed gradient
  ``S``::

      u     = α0 - γ S
      g(t)  = c · γ^½ · (t γ)^μ
      α     = sign(u) · max(|u| - g(t), 0)

  which is the exact minimiser of ``α·(γS - α0) + g|α| + α²/2`` per
  coordinate.  The growing threshold drives unimportant α to exact zeros.

  `budget_grda_lr` picks γ from the search's step budget so that g passes
  |α0| on the last step.

`joint_step` applies both from one forward/backward evaluation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from .data_model import MiniBatch
from .embedding import SparseRows
from .errors import ConfigError, ModeError, NonFiniteGradientError
from .interaction import InteractionMode
from .network import FactorizationModel, ForwardPass, Gradient, backward, forward, loss

logger = logging.getLogger(__name__)

DEFAULT_LR = 1e-3
DEFAULT_BETA1 = 0.9
DEFAULT_BETA2 = 0.999
DEFAULT_EPS = 1e-8
DEFAULT_GRDA_LR = 1.0
DEFAULT_GRDA_C = 0.005
DEFAULT_GRDA_MU = 0.6
# budgeted γ: threshold reaches this multiple of |α0| on the last step
DEFAULT_GRDA_REACH = 2.0
# γ · 1/4 (the loss curvature bound of one normalised column) stays <= 1
MAX_BUDGET_GRDA_LR = 4.0


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = DEFAULT_LR
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    eps: float = DEFAULT_EPS
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"Adam learning rate must be > 0, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"Adam betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ConfigError(f"Adam epsilon must be > 0, got {self.eps}")


def _check_finite(grads: Dict[str, Gradient]) -> None:
    for name, g in grads.items():
        values = g.values if isinstance(g, SparseRows) else g
        if not np.isfinite(values).all():
            raise NonFiniteGradientError(name)


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, Gradient],
    state: AdamState,
    names: Optional[Iterable[str]] = None,
) -> Dict[str, np.ndarray]:
    """One Adam step over *names* (default: every gradient) applied to *params* in place.

    Every gradient is checked before anything is written, so a non-finite
    gradient leaves parameters and moments untouched.
    """
    names = list(grads) if names is None else list(names)
    selected = {n: grads[n] for n in names}
    _check_finite(selected)

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t

    for name, g in selected.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if isinstance(g, SparseRows):
            live = np.any(g.values.reshape(g.values.shape[0], -1) != 0, axis=1)
            rows, gv = g.rows[live], g.values[live]
            m[rows] = b1 * m[rows] + (1.0 - b1) * gv
            v[rows] = b2 * v[rows] + (1.0 - b2) * gv * gv
            p[rows] -= state.lr * (m[rows] / c1) / (np.sqrt(v[rows] / c2) + state.eps)
        else:
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# GRDA
# ---------------------------------------------------------------------------

@dataclass
class GrdaState:
    lr: float = DEFAULT_GRDA_LR
    c: float = DEFAULT_GRDA_C
    mu: float = DEFAULT_GRDA_MU
    step: int = 0
    accumulator: Dict[str, np.ndarray] = field(default_factory=dict)
    initial: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.c < 0:
            raise ConfigError(f"GRDA c must be >= 0, got {self.c}")
        if self.lr <= 0:
            raise ConfigError(f"GRDA learning rate must be > 0, got {self.lr}")

    @classmethod
    def start(
        cls,
        alphas: Dict[str, np.ndarray],
        lr: float = DEFAULT_GRDA_LR,
        c: float = DEFAULT_GRDA_C,
        mu: float = DEFAULT_GRDA_MU,
    ) -> "GrdaState":
        """Snapshot α0 and zero the accumulators."""
        return cls(
            lr=lr, c=c, mu=mu,
            accumulator={n: np.zeros_like(a, dtype=np.float64) for n, a in alphas.items()},
            initial={n: np.array(a, dtype=np.float64) for n, a in alphas.items()},
        )

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(self.initial)

    def threshold(self, t: Optional[int] = None) -> float:
        return grda_threshold(self.step if t is None else t, self.lr, self.c, self.mu)


def grda_threshold(t: int, lr: float, c: float, mu: float) -> float:
    return c * lr ** 0.5 * (t * lr) ** mu


def budget_grda_lr(
    steps: int,
    alpha0: float,
    c: float = DEFAULT_GRDA_C,
    mu: float = DEFAULT_GRDA_MU,
    reach: float = DEFAULT_GRDA_REACH,
    cap: float = MAX_BUDGET_GRDA_LR,
) -> float:
    """γ for a search of *steps* GRDA steps starting from α of size *alpha0*.

    Solves ``c · γ^(1/2 + μ) · steps^μ = reach · |alpha0|`` so that, by the
    last step, an α whose gradients have netted out to zero is exactly zero.
    The result is clipped to *cap*.
    """
    if c <= 0:
        raise ConfigError(f"A budgeted GRDA learning rate needs c > 0, got {c}")
    if steps < 1:
        raise ConfigError(f"A budgeted GRDA learning rate needs at least one step, got {steps}")
    if alpha0 == 0:
        return cap
    lr = (reach * abs(alpha0) / (c * steps ** mu)) ** (1.0 / (0.5 + mu))
    return min(lr, cap)


def soft_threshold(u: np.ndarray, g: float) -> np.ndarray:
    return np.sign(u) * np.maximum(np.abs(u) - g, 0.0)


def grda_step(
    alphas: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: GrdaState,
) -> Dict[str, np.ndarray]:
    """Fold *grads* (taken at the current α) into the accumulators and return new α.

    The step counter advances once per call however many tensors it covers.
    """
    _check_finite({n: grads[n] for n in state.names})
    state.step += 1
    g = state.threshold()
    out = {}
    for name in state.names:
        state.accumulator[name] = state.accumulator[name] + grads[name]
        u = state.initial[name] - state.lr * state.accumulator[name]
        out[name] = soft_threshold(u, g)
        if name in alphas:
            alphas[name][...] = out[name]
    return out


# ---------------------------------------------------------------------------
# Combined steps
# ---------------------------------------------------------------------------

def train_step(
    model: FactorizationModel,
    batch: MiniBatch,
    adam: AdamState,
    grda: Optional[GrdaState] = None,
) -> Tuple[float, ForwardPass]:
    """Forward, backward and update.  Tensors GRDA owns are excluded from Adam."""
    fp = forward(model, batch, train=True)
    value = loss(fp.logits, batch.labels)
    grads = backward(model, fp)

    grda_names = set(grda.names) if grda is not None else set()
    adam_names = [n for n in model.trainable() if n not in grda_names and n in grads]
    # both checks run before either optimiser writes
    _check_finite({n: grads[n] for n in adam_names})
    if grda is not None:
        _check_finite({n: grads[n] for n in grda.names})

    adam_step(model.params, grads, adam, adam_names)
    if grda is not None:
        grda_step(model.params, {n: grads[n] for n in grda.names}, grda)
    return value, fp


def joint_step(
    model: FactorizationModel,
    batch: MiniBatch,
    adam: AdamState,
    grda: GrdaState,
) -> Tuple[float, ForwardPass]:
    """One-level search step: Adam on weights and GRDA on α from one gradient evaluation."""
    if model.config.mode is not InteractionMode.SEARCH:
        raise ModeError(f"joint_step needs a SEARCH model, got {model.config.mode.name}")
    return train_step(model, batch, adam, grda)

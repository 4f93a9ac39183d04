"""
Factorization models: embedding + interaction layer + output head.

Heads
-----
FM      ŷ = σ(l_fm)
FM3     ŷ = σ(l_fm) with triples in the interaction layer
DEEPFM  ŷ = σ(l_fm + MLP(flatten(E)))
IPNN    ŷ = σ(MLP([flatten(E), <w,x> + b, weighted products]))

All parameters live in one flat ``params`` dict keyed by name:

    emb.<f>          (n_f, d) embedding table of field f
    lin.<f>          (n_f,)   linear weights of field f
    bias             (1,)
    alpha.pair       (C(m,2),)   SEARCH / RETRAIN only
    alpha.triple     (C(m,3),)
    mlp.<l>.weight   (in, out)
    mlp.<l>.bias     (out,)

Gradients use the same names; embedding and linear gradients are `SparseRows`.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Dict, List, Optional, Set, Tuple, Union

import numpy as np
from scipy.special import expit

from .data_model import FieldSchema, MiniBatch, Order, enumerate_interactions
from .embedding import (
    EmbeddingTable,
    SparseRows,
    accumulate_batch_grad,
    embed_batch,
    linear_grad,
    linear_term,
)
from .errors import ConfigError, ModeError, SchemaError
from .interaction import (
    DEFAULT_ALPHA_INIT,
    DEFAULT_BN_EPS,
    DEFAULT_BN_MOMENTUM,
    ArchitectureParams,
    BNCache,
    BNMode,
    BNState,
    GateSet,
    InteractionMode,
    LayerCache,
    LayerOutput,
    LayerSettings,
    bn_backward,
    bn_forward,
    interaction_layer_backward,
    interaction_layer_forward,
    order_key,
)

Gradient = Union[np.ndarray, SparseRows]


class Head(Enum):
    FM = "fm"
    FM3 = "fm3"
    DEEPFM = "deepfm"
    IPNN = "ipnn"


class Activation(Enum):
    RELU = "relu"
    IDENTITY = "identity"


@dataclass(frozen=True)
class ModelConfig:
    head: Head = Head.FM
    embedding_dim: int = 8
    mlp_sizes: Tuple[int, ...] = ()
    mode: InteractionMode = InteractionMode.PLAIN
    third_order: bool = False
    interaction_bn: bool = True
    use_alpha: bool = True
    mlp_batch_norm: bool = False
    bn_momentum: float = DEFAULT_BN_MOMENTUM
    bn_eps: float = DEFAULT_BN_EPS
    eval_batch_stats: bool = False
    alpha_init: float = DEFAULT_ALPHA_INIT

    def __post_init__(self):
        object.__setattr__(self, "mlp_sizes", tuple(int(s) for s in self.mlp_sizes))
        if self.embedding_dim < 1:
            raise ConfigError(f"embedding_dim must be >= 1, got {self.embedding_dim}")
        if self.head in (Head.FM, Head.FM3):
            if self.mlp_sizes:
                raise ConfigError(f"{self.head.name} head takes no MLP, got mlp_sizes={list(self.mlp_sizes)}")
        else:
            if not self.mlp_sizes:
                raise ConfigError(f"{self.head.name} head needs at least one MLP layer")
            if self.mlp_sizes[-1] != 1 or any(s < 1 for s in self.mlp_sizes):
                raise ConfigError(
                    f"MLP sizes must be positive and end in 1, got {list(self.mlp_sizes)}"
                )
        if self.mode is InteractionMode.PLAIN3 and Order.TRIPLE not in self.orders:
            raise ConfigError("PLAIN3 mode needs the FM3 head or third_order = true")

    @property
    def orders(self) -> Tuple[Order, ...]:
        if self.head is Head.FM3 or self.third_order:
            return (Order.PAIR, Order.TRIPLE)
        return (Order.PAIR,)

    @property
    def interaction_mode(self) -> InteractionMode:
        if self.mode is InteractionMode.PLAIN and Order.TRIPLE in self.orders:
            return InteractionMode.PLAIN3
        return self.mode

    def layer_settings(self) -> LayerSettings:
        return LayerSettings(self.interaction_mode, self.orders, self.interaction_bn, self.use_alpha)

    def to_dict(self) -> Dict[str, object]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = value.value if isinstance(value, Enum) else (
                list(value) if isinstance(value, tuple) else value
            )
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "ModelConfig":
        data = dict(data)
        data["head"] = Head(data["head"])
        data["mode"] = InteractionMode(data["mode"])
        data["mlp_sizes"] = tuple(data.get("mlp_sizes", ()))
        return cls(**data)


@dataclass
class MlpLayer:
    weight: np.ndarray
    bias: np.ndarray
    activation: Activation


@dataclass
class FactorizationModel:
    schema: FieldSchema
    config: ModelConfig
    params: Dict[str, np.ndarray]
    gates: Optional[GateSet] = None
    bn_states: Dict[str, BNState] = field(default_factory=dict)
    frozen: Set[str] = field(default_factory=set)

    @property
    def embedding(self) -> EmbeddingTable:
        return EmbeddingTable(
            [self.params[f"emb.{f}"] for f in range(self.schema.field_count)],
            self.config.embedding_dim,
        )

    @property
    def linear_weights(self) -> List[np.ndarray]:
        return [self.params[f"lin.{f}"] for f in range(self.schema.field_count)]

    def alpha(self) -> Optional[Dict[Order, np.ndarray]]:
        found = {o: self.params[f"alpha.{order_key(o)}"] for o in self.config.orders
                 if f"alpha.{order_key(o)}" in self.params}
        return found or None

    def architecture(self) -> ArchitectureParams:
        alpha = self.alpha()
        if alpha is None:
            raise ModeError("Model carries no architecture parameters")
        return ArchitectureParams(self.schema.field_count, {o: a.copy() for o, a in alpha.items()})

    def inter_bn_states(self) -> Optional[Dict[Order, BNState]]:
        found = {o: self.bn_states[f"inter.{order_key(o)}"] for o in self.config.orders
                 if f"inter.{order_key(o)}" in self.bn_states}
        return found or None

    def mlp_layers(self) -> List[MlpLayer]:
        n = len(self.config.mlp_sizes)
        return [
            MlpLayer(
                self.params[f"mlp.{l}.weight"],
                self.params[f"mlp.{l}.bias"],
                Activation.IDENTITY if l == n - 1 else Activation.RELU,
            )
            for l in range(n)
        ]

    def trainable(self) -> List[str]:
        return [name for name in self.params if name not in self.frozen]

    def copy(self) -> "FactorizationModel":
        return copy.deepcopy(self)


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def interaction_width(schema: FieldSchema, config: ModelConfig, gates: Optional[GateSet]) -> int:
    """Number of product coordinates the IPNN tower sees."""
    total = 0
    for o in config.orders:
        if gates is not None and o in gates.gates:
            total += gates.open_count(o)
        else:
            total += len(enumerate_interactions(schema, o))
    return total


def mlp_input_width(schema: FieldSchema, config: ModelConfig, gates: Optional[GateSet]) -> int:
    flat = schema.field_count * config.embedding_dim
    if config.head is Head.IPNN:
        return flat + 1 + interaction_width(schema, config, gates)
    return flat


def build_model(
    schema: FieldSchema,
    config: ModelConfig,
    rng: np.random.Generator,
    gates: Optional[GateSet] = None,
    alpha: Optional[ArchitectureParams] = None,
) -> FactorizationModel:
    """Fresh weights; embeddings are drawn before the MLP so every mode shares them."""
    settings = config.layer_settings()
    d = config.embedding_dim
    params: Dict[str, np.ndarray] = {}

    table = EmbeddingTable.initialise(schema, d, rng)
    for f, v in enumerate(table.tables):
        params[f"emb.{f}"] = v
    for f, n in enumerate(schema.cardinalities):
        params[f"lin.{f}"] = np.zeros(n)
    params["bias"] = np.zeros(1)

    if settings.alpha_active:
        source = alpha or ArchitectureParams.constant(schema.field_count, config.orders, config.alpha_init)
        for o in config.orders:
            if o not in source.alpha:
                raise ModeError(f"alpha for {order_key(o)}s is missing")
            params[f"alpha.{order_key(o)}"] = source.alpha[o].astype(np.float64).copy()
    elif alpha is not None and settings.mode in (InteractionMode.PLAIN, InteractionMode.PLAIN3):
        raise ModeError(f"{settings.mode.name} mode takes no architecture parameters")

    if settings.mode is InteractionMode.RETRAIN and gates is None:
        raise ModeError("RETRAIN mode needs gates")
    if gates is not None:
        if settings.mode in (InteractionMode.PLAIN, InteractionMode.PLAIN3):
            raise ModeError(f"{settings.mode.name} mode takes no gates")
        if gates.field_count != schema.field_count:
            raise ModeError(f"Gates cover {gates.field_count} fields, schema has {schema.field_count}")

    sizes = config.mlp_sizes
    fan_in = mlp_input_width(schema, config, gates)
    for l, out in enumerate(sizes):
        gain = 3.0 if l == len(sizes) - 1 else 6.0
        bound = np.sqrt(gain / fan_in)
        params[f"mlp.{l}.weight"] = rng.uniform(-bound, bound, size=(fan_in, out))
        params[f"mlp.{l}.bias"] = np.zeros(out)
        fan_in = out

    bn_states: Dict[str, BNState] = {}
    if settings.bn_active:
        for o in config.orders:
            width = len(enumerate_interactions(schema, o))
            bn_states[f"inter.{order_key(o)}"] = BNState.fresh(width, config.bn_momentum, config.bn_eps)
    if config.mlp_batch_norm:
        for l, out in enumerate(sizes[:-1]):
            bn_states[f"mlp.{l}"] = BNState.fresh(out, config.bn_momentum, config.bn_eps)

    return FactorizationModel(schema, config, params, gates, bn_states)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy computed from logits: ``log(1 + e^z) - y z``.

    Evaluated as ``y·softplus(-z) + (1 - y)·softplus(z)`` so neither branch
    subtracts two large numbers.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z)))


def loss_grad(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """dL/dz per row for the batch-mean loss."""
    return (expit(logits) - labels) / logits.shape[0]


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

@dataclass
class _MlpCache:
    inputs: List[np.ndarray]
    pre: List[np.ndarray]
    bn: List[Optional[BNCache]]


@dataclass
class ForwardPass:
    batch: MiniBatch
    logits: np.ndarray
    E: np.ndarray
    layer: LayerOutput
    layer_cache: LayerCache
    mlp: Optional[_MlpCache] = None

    @property
    def probs(self) -> np.ndarray:
        return expit(self.logits)


def _mlp_forward(
    model: FactorizationModel,
    x: np.ndarray,
    train: bool,
    update_stats: bool,
) -> Tuple[np.ndarray, _MlpCache]:
    cache = _MlpCache([], [], [])
    mode = BNMode.TRAIN if train else BNMode.EVAL
    for l, layer in enumerate(model.mlp_layers()):
        cache.inputs.append(x)
        a = x @ layer.weight + layer.bias
        bnc = None
        if layer.activation is Activation.RELU:
            if f"mlp.{l}" in model.bn_states:
                a, bnc = bn_forward(
                    a, mode, model.bn_states[f"mlp.{l}"], update_stats,
                    use_batch_stats=model.config.eval_batch_stats,
                )
            cache.pre.append(a)
            x = np.maximum(a, 0.0)
        else:
            cache.pre.append(a)
            x = a
        cache.bn.append(bnc)
    return x, cache


def _mlp_backward(
    model: FactorizationModel,
    cache: _MlpCache,
    d_out: np.ndarray,
    grads: Dict[str, Gradient],
) -> np.ndarray:
    dx = d_out
    layers = model.mlp_layers()
    for l in reversed(range(len(layers))):
        layer = layers[l]
        da = dx
        if layer.activation is Activation.RELU:
            da = dx * (cache.pre[l] > 0)
            if cache.bn[l] is not None:
                da = bn_backward(da, cache.bn[l])
        grads[f"mlp.{l}.weight"] = cache.inputs[l].T @ da
        grads[f"mlp.{l}.bias"] = da.sum(axis=0)
        dx = da @ layer.weight.T
    return dx


def forward(
    model: FactorizationModel,
    batch: MiniBatch,
    train: bool = False,
    update_stats: Optional[bool] = None,
) -> ForwardPass:
    """Logits for *batch*; ``probs`` on the result gives ŷ.

    *train* selects batch statistics for BN; *update_stats* (default: *train*)
    controls whether running statistics move.
    """
    if batch.size == 0:
        raise SchemaError("Cannot run the model on an empty batch")
    if batch.schema.fingerprint() != model.schema.fingerprint():
        raise SchemaError(
            f"Batch schema {batch.schema.fingerprint()} does not match model schema "
            f"{model.schema.fingerprint()}"
        )
    update = train if update_stats is None else update_stats
    cfg = model.config

    E = embed_batch(batch, model.embedding)
    lin = linear_term(batch, model.linear_weights) + model.params["bias"][0]
    out, lcache = interaction_layer_forward(
        E, lin, cfg.layer_settings(),
        alpha=model.alpha(),
        gates=model.gates,
        bn_states=model.inter_bn_states(),
        train=train,
        update_stats=update,
        use_batch_stats=cfg.eval_batch_stats,
    )

    flat = E.reshape(batch.size, -1)
    if cfg.head in (Head.FM, Head.FM3):
        return ForwardPass(batch, out.total, E, out, lcache)
    if cfg.head is Head.DEEPFM:
        y, mcache = _mlp_forward(model, flat, train, update)
        return ForwardPass(batch, out.total + y[:, 0], E, out, lcache, mcache)
    x = np.concatenate([flat, out.linear[:, None], out.term_matrix()], axis=1)
    y, mcache = _mlp_forward(model, x, train, update)
    return ForwardPass(batch, y[:, 0], E, out, lcache, mcache)


def backward(model: FactorizationModel, fp: ForwardPass) -> Dict[str, Gradient]:
    """Gradients of the batch-mean loss for every parameter of *model*."""
    batch = fp.batch
    B, m, d = fp.E.shape
    dz = loss_grad(fp.logits, batch.labels)
    grads: Dict[str, Gradient] = {}
    orders = sorted(fp.layer.terms, key=lambda o: o.value)

    dE_flat = np.zeros((B, m * d))
    if model.config.head is Head.IPNN:
        dx = _mlp_backward(model, fp.mlp, dz[:, None], grads)
        dE_flat = dx[:, : m * d]
        d_linear = dx[:, m * d]
        d_terms = {}
        start = m * d + 1
        for o in orders:
            k = fp.layer.terms[o].shape[1]
            d_terms[o] = dx[:, start: start + k]
            start += k
    else:
        d_linear = dz
        d_terms = {o: np.broadcast_to(dz[:, None], fp.layer.terms[o].shape) for o in orders}
        if model.config.head is Head.DEEPFM:
            dE_flat = _mlp_backward(model, fp.mlp, dz[:, None], grads)

    lg = interaction_layer_backward(fp.layer_cache, d_linear, d_terms)
    dE = lg.E + dE_flat.reshape(B, m, d)

    for f, g in enumerate(accumulate_batch_grad(batch, dE)):
        grads[f"emb.{f}"] = g
    for f, g in enumerate(linear_grad(batch, d_linear)):
        grads[f"lin.{f}"] = g
    grads["bias"] = np.array([d_linear.sum()])
    if model.alpha() is not None:
        for o, g in lg.alpha.items():
            grads[f"alpha.{order_key(o)}"] = g
    return grads


def predict(model: FactorizationModel, data: MiniBatch, batch_size: int = 2000) -> np.ndarray:
    """ŷ for every row of *data* with evaluation-mode BN."""
    if data.size == 0:
        return np.zeros(0)
    out = [forward(model, b).probs for b in data.iter_batches(batch_size)]
    return np.concatenate(out)


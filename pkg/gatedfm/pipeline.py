"""
Two-stage interaction selection.

1. **Search**: every interaction gets an α; weights train with Adam and α
   with GRDA from the same gradient, over the whole training set.  GRDA's
   growing threshold zeroes the α of useless interactions.
2. **Retrain**: interactions with α = 0 are gated off for good, the
   network is re-initialised, and the survivors (with α kept as a learned
   weight) train with Adam alone.

The selection is stored as an `InteractionManifest`, which can also drive
a third-order search (pairs fixed, triples searched) or be transferred to a
DeepFM or IPNN head.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from .config import RetrainVariant, RunConfig, config_hash, substream
from .data_model import FieldSchema, MiniBatch, Order, enumerate_interactions
from .errors import ConfigError, ManifestError
from .interaction import ArchitectureParams, GateSet, InteractionMode, extract_gates, order_key
from .metrics import scorable_pairs, statistics_auc_table, top_n_by_statistics_auc
from .network import FactorizationModel, Head, ModelConfig, build_model
from .optim import AdamState, GrdaState, budget_grda_lr
from .report import RunReport
from .trainer import Trainer, evaluate

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
DEFAULT_TRANSFER_MLP = (256, 128, 1)

TrainerHook = Callable[[Trainer], None]


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass
class InteractionManifest:
    fingerprint: str
    gates: GateSet
    alpha: ArchitectureParams
    provenance: Dict[str, str] = field(default_factory=dict)
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        if self.gates.field_count != self.alpha.field_count:
            raise ManifestError(
                f"Gates cover {self.gates.field_count} fields but alpha covers {self.alpha.field_count}"
            )
        if self.gates.coverage != self.alpha.coverage:
            raise ManifestError("Gates and alpha cover different interaction orders")

    @property
    def field_count(self) -> int:
        return self.gates.field_count

    @property
    def coverage(self) -> Tuple[Order, ...]:
        return self.gates.coverage

    def kept_fraction(self, order: Order) -> float:
        return self.gates.kept_fraction(order)

    def check(self, schema: FieldSchema) -> None:
        if schema.fingerprint() != self.fingerprint:
            raise ManifestError(
                f"Manifest was built for schema {self.fingerprint}, data has {schema.fingerprint()}"
            )
        if schema.field_count != self.field_count:
            raise ManifestError(f"Manifest covers {self.field_count} fields, schema has {schema.field_count}")

    @classmethod
    def from_alpha(
        cls,
        schema: FieldSchema,
        alpha: ArchitectureParams,
        provenance: Dict[str, str],
        fixed: Optional[GateSet] = None,
    ) -> "InteractionManifest":
        """Gates open where α is nonzero, except orders *fixed* already decides."""
        gates = extract_gates(alpha)
        if fixed is not None:
            for order, g in fixed.gates.items():
                gates.gates[order] = g.copy()
        return cls(schema.fingerprint(), gates, alpha, dict(provenance))


@dataclass
class StageResult:
    model: FactorizationModel
    report: RunReport
    trainer: Trainer
    manifest: Optional[InteractionManifest] = None

    @property
    def alpha(self) -> ArchitectureParams:
        return self.model.architecture()


@dataclass
class PipelineResult:
    manifest: InteractionManifest
    search: StageResult
    retrain: StageResult

    @property
    def report(self) -> RunReport:
        return self.search.report.merge(self.retrain.report)


# ---------------------------------------------------------------------------
# Shared stage plumbing
# ---------------------------------------------------------------------------

def _provenance(stage: str, seed: int, config: RunConfig) -> Dict[str, str]:
    return {"stage": stage, "seed": str(seed), "config": config_hash(config)}


def resolve_grda_lr(config: RunConfig, steps: int, alpha0: float) -> float:
    """Configured γ, or the budgeted one for *steps* GRDA steps from *alpha0*."""
    opt = config.optim
    if opt.grda_lr is not None:
        return opt.grda_lr
    lr = budget_grda_lr(steps, alpha0, opt.grda_c, opt.grda_mu)
    logger.info("GRDA lr %.4g for %d steps (c %g, mu %g)", lr, steps, opt.grda_c, opt.grda_mu)
    return lr


def make_trainer(
    model: FactorizationModel,
    config: RunConfig,
    seed: int,
    stage: str,
    eval_data: Optional[MiniBatch] = None,
    grda_names: Tuple[str, ...] = (),
    steps: int = 1,
) -> Trainer:
    """Trainer with Adam over the weights and, for *grda_names*, GRDA budgeted for *steps*."""
    opt = config.optim
    adam = AdamState(lr=opt.lr, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps)
    grda = None
    if grda_names:
        alphas = {n: model.params[n] for n in grda_names}
        alpha0 = max(float(np.abs(a).max(initial=0.0)) for a in alphas.values())
        grda = GrdaState.start(
            alphas, lr=resolve_grda_lr(config, steps, alpha0), c=opt.grda_c, mu=opt.grda_mu
        )
    return Trainer(model, adam, grda, opt.batch_size, seed, stage, eval_data)


def finish_stage(
    trainer: Trainer,
    train: MiniBatch,
    epochs: int,
    eval_data: Optional[MiniBatch] = None,
) -> RunReport:
    """Run *trainer* to *epochs* and attach final test metrics to its report."""
    trainer.fit(train, epochs)
    report = trainer.report()
    if eval_data is not None:
        for key, value in evaluate(trainer.model, eval_data, trainer.batch_size).items():
            report.final[f"{trainer.stage}_{key}"] = value
    return report


def _run(
    model: FactorizationModel,
    train: MiniBatch,
    config: RunConfig,
    seed: int,
    stage: str,
    epochs: int,
    eval_data: Optional[MiniBatch],
    grda_names: Tuple[str, ...] = (),
    hook: Optional[TrainerHook] = None,
) -> StageResult:
    steps = epochs * train.batch_count(config.optim.batch_size)
    trainer = make_trainer(model, config, seed, stage, eval_data, grda_names, steps)
    if hook is not None:
        hook(trainer)
    report = finish_stage(trainer, train, epochs, eval_data)
    return StageResult(model, report, trainer)


def _seed(config: RunConfig, seed: Optional[int]) -> int:
    return config.seed if seed is None else int(seed)


# ---------------------------------------------------------------------------
# Plain baselines
# ---------------------------------------------------------------------------

def plain_model(schema: FieldSchema, config: RunConfig, seed: int) -> FactorizationModel:
    model_cfg = dataclasses.replace(config.model, mode=InteractionMode.PLAIN)
    return build_model(schema, model_cfg, substream(seed, "init"))


def train_stage(
    train: MiniBatch,
    config: RunConfig,
    eval_data: Optional[MiniBatch] = None,
    seed: Optional[int] = None,
    hook: Optional[TrainerHook] = None,
) -> StageResult:
    """Train the configured head with every interaction and no α (FM, FM3, DeepFM, IPNN)."""
    seed = _seed(config, seed)
    model = plain_model(train.schema, config, seed)
    return _run(model, train, config, seed, "train", config.retrain.epochs, eval_data, hook=hook)


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------

def search_model(
    schema: FieldSchema,
    config: RunConfig,
    seed: int,
    base: Optional[InteractionManifest] = None,
) -> Tuple[FactorizationModel, Tuple[str, ...]]:
    """SEARCH-mode model and the names of the α tensors GRDA owns.

    With a pair-only *base* manifest the pairs keep its gates and α (frozen)
    and only a fresh α over every triple is searched.
    """
    if base is None:
        model_cfg = dataclasses.replace(config.model, mode=InteractionMode.SEARCH)
        model = build_model(schema, model_cfg, substream(seed, "init"))
        return model, tuple(f"alpha.{order_key(o)}" for o in model_cfg.orders)

    base.check(schema)
    if base.coverage != (Order.PAIR,):
        raise ManifestError("Third-order search needs a pair-only manifest")
    model_cfg = dataclasses.replace(config.model, mode=InteractionMode.SEARCH, third_order=True)
    alpha = ArchitectureParams(schema.field_count, {
        Order.PAIR: base.alpha.alpha[Order.PAIR],
        Order.TRIPLE: np.full(len(enumerate_interactions(schema, Order.TRIPLE)), model_cfg.alpha_init),
    })
    pair_gates = GateSet(schema.field_count, {Order.PAIR: base.gates.gates[Order.PAIR]})
    model = build_model(schema, model_cfg, substream(seed, "init"), gates=pair_gates, alpha=alpha)
    model.frozen.add("alpha.pair")
    return model, ("alpha.triple",)


def search_stage(
    train: MiniBatch,
    config: RunConfig,
    eval_data: Optional[MiniBatch] = None,
    seed: Optional[int] = None,
    base: Optional[InteractionManifest] = None,
    hook: Optional[TrainerHook] = None,
) -> StageResult:
    """Joint Adam/GRDA training; the result's manifest opens every nonzero α."""
    seed = _seed(config, seed)
    model, grda_names = search_model(train.schema, config, seed, base)
    result = _run(model, train, config, seed, "search", config.search.epochs, eval_data, grda_names, hook)
    result.report.notes["grda_lr"] = f"{result.trainer.grda.lr:.6g}"
    result.manifest = InteractionManifest.from_alpha(
        train.schema,
        model.architecture(),
        _provenance("search", seed, config),
        fixed=model.gates,
    )
    for order in result.manifest.coverage:
        logger.info(
            "search kept %d of %d %ss",
            result.manifest.gates.open_count(order), result.manifest.gates.gates[order].size, order_key(order),
        )
    return result


# ---------------------------------------------------------------------------
# Retrain
# ---------------------------------------------------------------------------

def random_gate_set(total: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """*k* of *total* gates open, chosen uniformly."""
    if not 0 <= k <= total:
        raise ConfigError(f"Cannot open {k} of {total} gates")
    gates = np.zeros(total, dtype=bool)
    gates[rng.choice(total, size=k, replace=False)] = True
    return gates


def stats_top_n_gates(
    train: MiniBatch,
    manifest: InteractionManifest,
    rng: np.random.Generator,
    holdout: float = 0.2,
) -> GateSet:
    """Open the pairs with the best statistics_AUC, as many as *manifest* keeps.

    Scores are measured on a holdout carved out of *train*; pairs touching a
    multi-hot field are never chosen.
    """
    order = rng.permutation(train.size)
    n_val = max(2, int(round(train.size * holdout)))
    fit, val = train.take(order[n_val:]), train.take(order[:n_val])
    ids = enumerate_interactions(train.schema, Order.PAIR)
    table = statistics_auc_table(fit, val, scorable_pairs(train.schema))
    chosen = set(top_n_by_statistics_auc(table, manifest.gates.open_count(Order.PAIR)))
    gates = {o: g.copy() for o, g in manifest.gates.gates.items()}
    gates[Order.PAIR] = np.array([iid in chosen for iid in ids])
    return GateSet(manifest.field_count, gates)


def variant_flags(variant: RetrainVariant) -> Tuple[bool, bool]:
    """``(batch_norm, use_alpha)`` for a retrain variant."""
    if variant is RetrainVariant.AUTOFM:
        return True, True
    if variant is RetrainVariant.AUTOFM_BN:
        return False, True
    return False, False


def retrain_model(
    train: MiniBatch,
    manifest: InteractionManifest,
    config: RunConfig,
    seed: int,
    variant: RetrainVariant,
) -> FactorizationModel:
    manifest.check(train.schema)
    bn, use_alpha = variant_flags(variant)
    gates = manifest.gates
    if variant is RetrainVariant.RANDOM_FM:
        rng = substream(seed, "random_gates")
        gates = GateSet(manifest.field_count, {
            o: random_gate_set(g.size, int(g.sum()), rng) for o, g in manifest.gates.gates.items()
        })
    elif variant is RetrainVariant.STATS_TOP_N:
        gates = stats_top_n_gates(train, manifest, substream(seed, "data"))

    model_cfg = dataclasses.replace(
        config.model,
        mode=InteractionMode.RETRAIN,
        third_order=Order.TRIPLE in manifest.coverage,
        interaction_bn=bn,
        use_alpha=use_alpha,
    )
    return build_model(
        train.schema, model_cfg, substream(seed, "init"),
        gates=GateSet(gates.field_count, {o: g.copy() for o, g in gates.gates.items()}),
        alpha=manifest.alpha if use_alpha else None,
    )


def retrained_manifest(
    manifest: InteractionManifest,
    model: FactorizationModel,
    variant: RetrainVariant,
) -> InteractionManifest:
    """*manifest* with the retrained gates and, where the model kept α, its retrained values.

    Closed entries keep the α they came in with.
    """
    alpha = manifest.alpha
    trained = model.alpha()
    if trained is not None:
        values = {o: a.copy() for o, a in manifest.alpha.alpha.items()}
        for order, a in trained.items():
            open_cols = model.gates.open_indices(order)
            values[order][open_cols] = a[open_cols]
        alpha = ArchitectureParams(manifest.field_count, values)
    provenance = {**manifest.provenance, "variant": variant.value}
    gates = GateSet(manifest.field_count, {o: g.copy() for o, g in model.gates.gates.items()})
    return InteractionManifest(manifest.fingerprint, gates, alpha, provenance, manifest.version)


def retrain_stage(
    train: MiniBatch,
    manifest: InteractionManifest,
    config: RunConfig,
    eval_data: Optional[MiniBatch] = None,
    seed: Optional[int] = None,
    variant: Optional[RetrainVariant] = None,
    hook: Optional[TrainerHook] = None,
) -> StageResult:
    """Fresh weights, fixed gates from *manifest*, α carried over and trained by Adam."""
    seed = _seed(config, seed)
    variant = variant or config.retrain.variant
    model = retrain_model(train, manifest, config, seed, variant)
    result = _run(model, train, config, seed, "retrain", config.retrain.epochs, eval_data, hook=hook)
    result.report.notes["variant"] = variant.value
    result.manifest = retrained_manifest(manifest, model, variant)
    return result


# ---------------------------------------------------------------------------
# Full runs
# ---------------------------------------------------------------------------

def run_pipeline(
    train: MiniBatch,
    config: RunConfig,
    eval_data: Optional[MiniBatch] = None,
    seed: Optional[int] = None,
) -> PipelineResult:
    seed = _seed(config, seed)
    search = search_stage(train, config, eval_data, seed)
    retrain = retrain_stage(train, search.manifest, config, eval_data, seed)
    return PipelineResult(search.manifest, search, retrain)


def third_order_pipeline(
    train: MiniBatch,
    manifest: InteractionManifest,
    config: RunConfig,
    eval_data: Optional[MiniBatch] = None,
    seed: Optional[int] = None,
) -> PipelineResult:
    """Search triples on top of a pair manifest, then retrain pairs and triples together."""
    seed = _seed(config, seed)
    search = search_stage(train, config, eval_data, seed, base=manifest)
    retrain = retrain_stage(train, search.manifest, config, eval_data, seed)
    return PipelineResult(search.manifest, search, retrain)


# ---------------------------------------------------------------------------
# Transfer
# ---------------------------------------------------------------------------

def transfer(
    manifest: InteractionManifest,
    head: Head,
    config: RunConfig,
    schema: FieldSchema,
    seed: Optional[int] = None,
) -> FactorizationModel:
    """A DeepFM or IPNN model restricted to the interactions *manifest* keeps.

    α and BN are not carried: the target head re-weights the products itself.
    """
    if head not in (Head.DEEPFM, Head.IPNN):
        raise ConfigError(f"Transfer targets deepfm or ipnn, got {head.value}")
    manifest.check(schema)
    seed = _seed(config, seed)
    model_cfg = ModelConfig(
        head=head,
        embedding_dim=config.model.embedding_dim,
        mlp_sizes=config.model.mlp_sizes or DEFAULT_TRANSFER_MLP,
        mode=InteractionMode.RETRAIN,
        third_order=Order.TRIPLE in manifest.coverage,
        interaction_bn=False,
        use_alpha=False,
        mlp_batch_norm=config.model.mlp_batch_norm,
        bn_momentum=config.model.bn_momentum,
        bn_eps=config.model.bn_eps,
        eval_batch_stats=config.model.eval_batch_stats,
    )
    gates = GateSet(manifest.field_count, {o: g.copy() for o, g in manifest.gates.gates.items()})
    return build_model(schema, model_cfg, substream(seed, "init"), gates=gates)


def transfer_stage(
    train: MiniBatch,
    manifest: InteractionManifest,
    head: Head,
    config: RunConfig,
    eval_data: Optional[MiniBatch] = None,
    seed: Optional[int] = None,
    hook: Optional[TrainerHook] = None,
) -> StageResult:
    seed = _seed(config, seed)
    model = transfer(manifest, head, config, train.schema, seed)
    result = _run(model, train, config, seed, f"transfer-{head.value}", config.retrain.epochs, eval_data, hook=hook)
    result.manifest = manifest
    return result

"""
CLI entry-point for gatedfm.

Usage
-----
    python -m gatedfm synth-gen --config synth.cfg --output-dir data/synth
    python -m gatedfm ingest --config avazu.cfg --raw clicks.tsv --output-dir data/avazu
    python -m gatedfm train --config synth.cfg --set model.head=deepfm --set model.mlp_sizes=64,1
    python -m gatedfm pipeline --config synth.cfg --seed 1
    python -m gatedfm pipeline --config synth.cfg --seeds 1,2,3,4,5 --jobs 5
    python -m gatedfm third-order --config synth.cfg --manifest runs/manifest.txt
    python -m gatedfm transfer --config synth.cfg --manifest runs/manifest.txt --head ipnn
    python -m gatedfm eval --config synth.cfg --checkpoint runs/model.ckpt
    python -m gatedfm analyze --config synth.cfg --manifest runs/manifest.txt
    python -m gatedfm report --report runs/report.json --format plain

Every command that computes writes into ``--output-dir`` (default
``run.output_dir``): a copy of the resolved config, ``run.json`` with seed,
config hash and library versions, the command's artifacts and
``report.json``.  Exit status is 0 on success, 2 for invalid input and 1
when training fails.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, List, Optional, Tuple

import numpy as np
import scipy

from . import __version__
from .config import DataSource, RetrainVariant, RunConfig, config_hash, load_config, substream, to_ini
from .data_model import MiniBatch, Order, enumerate_interactions
from .errors import ConfigError, DivergenceError, GatedFMError
from .ingest import (
    boundaries_to_text,
    field_names,
    hints_from_names,
    prepare_dataset,
    read_encoded,
    read_raw,
    write_encoded,
)
from .interaction import order_key
from .metrics import alpha_histogram, pearson, scorable_pairs, stability, statistics_auc_table
from .network import Head
from .persistence import (
    load_checkpoint,
    load_manifest,
    load_schema,
    read_report,
    restore_trainer,
    save_manifest,
    save_report,
    save_schema,
    save_trainer,
    write_text,
)
from .pipeline import (
    InteractionManifest,
    StageResult,
    finish_stage,
    retrain_stage,
    retrained_manifest,
    run_pipeline,
    search_stage,
    third_order_pipeline,
    train_stage,
    transfer_stage,
)
from .report import RunReport, format_report, histogram_text, two_column_text
from .synthetic import generate_synthetic, load_spec, parse_planted, sample_synthetic_spec, save_spec
from .trainer import Trainer, evaluate

logger = logging.getLogger(__name__)

COMMANDS = [
    "synth-gen", "ingest", "train", "search", "retrain", "pipeline",
    "third-order", "transfer", "eval", "analyze", "report",
]


# ---------------------------------------------------------------------------
# Data and run directories
# ---------------------------------------------------------------------------

def _synthetic_spec(cfg: RunConfig):
    syn = cfg.synthetic
    if syn.spec_path:
        return load_spec(syn.spec_path)
    return sample_synthetic_spec(
        field_count=syn.fields,
        categories=syn.categories,
        planted=parse_planted(syn.planted),
        seed=cfg.seed if syn.seed is None else syn.seed,
        noise_ratio=syn.noise_ratio,
    )


def _schema_path(cfg: RunConfig) -> str:
    if cfg.data.schema_path:
        return cfg.data.schema_path
    return os.path.join(os.path.dirname(cfg.data.train_path), "schema.txt")


def _prepare_raw(cfg: RunConfig, raw_path: Optional[str] = None):
    data = cfg.data
    rows = read_raw(raw_path or data.raw_path)
    hints = hints_from_names(field_names(rows), data.numeric_fields, data.multi_hot_fields)
    return prepare_dataset(
        rows, hints, substream(cfg.seed, "data"),
        min_count=data.min_count,
        bucket_count=data.bucket_count,
        holdout=data.holdout,
        downsample_ratio=data.downsample_ratio or None,
        reduce=data.reduce,
        downsample_rng=substream(cfg.seed, "downsample"),
    )


def load_splits(cfg: RunConfig) -> Tuple[MiniBatch, MiniBatch]:
    """Train and test splits for the configured data source."""
    source = cfg.data.source
    if source is DataSource.ENCODED:
        schema = load_schema(_schema_path(cfg))
        return read_encoded(cfg.data.train_path, schema), read_encoded(cfg.data.test_path, schema)
    if source is DataSource.RAW:
        prepared = _prepare_raw(cfg)
        return prepared.train, prepared.test
    return generate_synthetic(_synthetic_spec(cfg), cfg.synthetic.n_train, cfg.synthetic.n_test)


def _check_data_config(cfg: RunConfig) -> None:
    data = cfg.data
    if data.source is DataSource.ENCODED and not (data.train_path and data.test_path):
        raise ConfigError("data.source = encoded needs data.train_path and data.test_path")
    if data.source is DataSource.RAW and not data.raw_path:
        raise ConfigError("data.source = raw needs data.raw_path")


def _out(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.run.output_dir, name)


def write_run_info(cfg: RunConfig, command: str) -> None:
    os.makedirs(cfg.run.output_dir, exist_ok=True)
    write_text(_out(cfg, "config.cfg"), to_ini(cfg))
    info = {
        "command": command,
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
        "versions": {
            "gatedfm": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    write_text(_out(cfg, "run.json"), json.dumps(info, indent=2) + "\n")


def _checkpoint_hook(cfg: RunConfig, name: str) -> Callable[[Trainer], None]:
    path, chash = _out(cfg, name), config_hash(cfg)

    def hook(trainer: Trainer) -> None:
        trainer.on_epoch_end = lambda t: save_trainer(path, t, chash)

    return hook


def _resume(cfg: RunConfig, path: str, train: MiniBatch, test: MiniBatch, epochs: int, name: str) -> StageResult:
    ckpt = load_checkpoint(path, config_hash(cfg))
    trainer = restore_trainer(ckpt, test)
    _checkpoint_hook(cfg, name)(trainer)
    logger.info("Resuming %s at epoch %d, batch %d", trainer.stage, trainer.epoch, trainer.batch_index)
    report = finish_stage(trainer, train, epochs, test)
    return StageResult(trainer.model, report, trainer)


def _finish(cfg: RunConfig, result: StageResult, ckpt_name: str = "model.ckpt") -> RunReport:
    save_trainer(_out(cfg, ckpt_name), result.trainer, config_hash(cfg))
    report = result.report
    report.notes["config_hash"] = config_hash(cfg)
    report.notes["seed"] = str(cfg.seed)
    save_report(_out(cfg, "report.json"), report)
    if report.alpha_histogram is not None:
        write_text(_out(cfg, "alpha_hist.tsv"), histogram_text(report.alpha_histogram))
    return report


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth_gen(cfg: RunConfig, args) -> RunReport:
    spec = _synthetic_spec(cfg)
    train, test = generate_synthetic(spec, cfg.synthetic.n_train, cfg.synthetic.n_test)
    save_spec(spec, _out(cfg, "spec.cfg"))
    save_schema(_out(cfg, "schema.txt"), spec.schema())
    write_encoded(_out(cfg, "train.tsv"), train)
    write_encoded(_out(cfg, "test.tsv"), test)
    report = RunReport(stage="synth-gen")
    report.final = {"train_rows": train.size, "test_rows": test.size, "positive_ratio": train.positive_ratio()}
    report.notes["planted"] = ";".join(str(p) for p in spec.planted)
    return report


def cmd_ingest(cfg: RunConfig, args) -> RunReport:
    if not (args.raw or cfg.data.raw_path):
        raise ConfigError("ingest needs --raw or data.raw_path")
    prepared = _prepare_raw(cfg, args.raw)
    save_schema(_out(cfg, "schema.txt"), prepared.schema)
    write_text(_out(cfg, "vocab.tsv"), prepared.vocab.to_text())
    write_text(_out(cfg, "buckets.tsv"), boundaries_to_text(prepared.boundaries))
    write_encoded(_out(cfg, "train.tsv"), prepared.train)
    write_encoded(_out(cfg, "test.tsv"), prepared.test)
    report = RunReport(stage="ingest")
    report.final = {
        "train_rows": prepared.train.size,
        "test_rows": prepared.test.size,
        "positive_ratio": prepared.train.positive_ratio(),
    }
    report.notes["cardinalities"] = ",".join(str(n) for n in prepared.schema.cardinalities)
    return report


def cmd_train(cfg: RunConfig, args) -> RunReport:
    train, test = load_splits(cfg)
    if args.resume:
        result = _resume(cfg, args.resume, train, test, cfg.retrain.epochs, "model.ckpt")
    else:
        result = train_stage(train, cfg, test, hook=_checkpoint_hook(cfg, "model.ckpt"))
    return _finish(cfg, result)


def cmd_search(cfg: RunConfig, args) -> RunReport:
    train, test = load_splits(cfg)
    base = load_manifest(args.manifest, train.schema) if args.manifest else None
    if args.resume:
        result = _resume(cfg, args.resume, train, test, cfg.search.epochs, "search.ckpt")
        result.manifest = InteractionManifest.from_alpha(
            train.schema, result.model.architecture(),
            {"stage": "search", "seed": str(cfg.seed), "config": config_hash(cfg)},
            fixed=result.model.gates,
        )
    else:
        result = search_stage(train, cfg, test, base=base, hook=_checkpoint_hook(cfg, "search.ckpt"))
    save_manifest(_out(cfg, "manifest.txt"), result.manifest)
    return _finish(cfg, result, "search.ckpt")


def cmd_retrain(cfg: RunConfig, args) -> RunReport:
    train, test = load_splits(cfg)
    manifest = load_manifest(args.manifest, train.schema)
    if args.resume:
        result = _resume(cfg, args.resume, train, test, cfg.retrain.epochs, "model.ckpt")
        result.manifest = retrained_manifest(manifest, result.model, cfg.retrain.variant)
    else:
        result = retrain_stage(train, manifest, cfg, test, hook=_checkpoint_hook(cfg, "model.ckpt"))
    save_manifest(_out(cfg, "manifest.txt"), result.manifest)
    return _finish(cfg, result)


def _pipeline_one(cfg: RunConfig) -> RunReport:
    train, test = load_splits(cfg)
    result = run_pipeline(train, cfg, test)
    result.retrain.report.notes["train_digest"] = train.digest()
    result.retrain.report.notes["test_digest"] = test.digest()
    save_manifest(_out(cfg, "manifest.txt"), result.manifest)
    save_trainer(_out(cfg, "search.ckpt"), result.search.trainer, config_hash(cfg))
    return _finish(cfg, dataclasses.replace(result.retrain, report=result.report))


def _pipeline_seed(config_text: str, seed: int, output_dir: str) -> RunReport:
    cfg = load_config(text=config_text, overrides=[f"run.seed={seed}", f"run.output_dir={output_dir}"])
    write_run_info(cfg, "pipeline")
    return _pipeline_one(cfg)


def cmd_pipeline(cfg: RunConfig, args) -> RunReport:
    seeds = list(cfg.run.seeds)
    if not seeds:
        return _pipeline_one(cfg)

    if cfg.data.source is DataSource.SYNTHETIC and not cfg.synthetic.spec_path and cfg.synthetic.seed is None:
        # every seed of the sweep trains on the same synthetic data
        cfg = cfg.replace(synthetic=dataclasses.replace(cfg.synthetic, seed=cfg.seed))
    text = to_ini(cfg)
    dirs = {s: os.path.join(cfg.run.output_dir, f"seed-{s}") for s in seeds}
    if cfg.run.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.run.jobs) as pool:
            futures = {s: pool.submit(_pipeline_seed, text, s, dirs[s]) for s in seeds}
            reports = {s: f.result() for s, f in futures.items()}
    else:
        reports = {s: _pipeline_seed(text, s, dirs[s]) for s in seeds}

    sweep = RunReport(stage="pipeline-sweep")
    for s, rep in reports.items():
        for key, value in rep.final.items():
            sweep.final[f"seed{s}_{key}"] = value
        for order, frac in rep.kept.items():
            sweep.final[f"seed{s}_kept_{order}"] = frac
    manifests = [load_manifest(os.path.join(dirs[s], "manifest.txt")) for s in seeds]
    if len(manifests) > 1:
        runs = [np.concatenate([m.alpha.alpha[o] for o in m.coverage]) for m in manifests]
        try:
            mat, mean = stability(runs)
            sweep.final["alpha_pearson_mean"] = mean
            lines = ["\t".join(["seed"] + [str(s) for s in seeds])]
            lines += ["\t".join([str(s)] + [f"{v:.6f}" for v in row]) for s, row in zip(seeds, mat)]
            write_text(_out(cfg, "stability.tsv"), "\n".join(lines) + "\n")
        except ValueError as exc:
            logger.warning("Seed stability undefined: %s", exc)
    save_report(_out(cfg, "report.json"), sweep)
    return sweep


def cmd_third_order(cfg: RunConfig, args) -> RunReport:
    train, test = load_splits(cfg)
    manifest = load_manifest(args.manifest, train.schema)
    result = third_order_pipeline(train, manifest, cfg, test)
    save_manifest(_out(cfg, "manifest.txt"), result.manifest)
    save_trainer(_out(cfg, "search.ckpt"), result.search.trainer, config_hash(cfg))
    return _finish(cfg, dataclasses.replace(result.retrain, report=result.report))


def cmd_transfer(cfg: RunConfig, args) -> RunReport:
    train, test = load_splits(cfg)
    manifest = load_manifest(args.manifest, train.schema)
    head = Head(args.head)
    if args.resume:
        result = _resume(cfg, args.resume, train, test, cfg.retrain.epochs, "model.ckpt")
    else:
        result = transfer_stage(train, manifest, head, cfg, test, hook=_checkpoint_hook(cfg, "model.ckpt"))
    return _finish(cfg, result)


def cmd_eval(cfg: RunConfig, args) -> RunReport:
    ckpt = load_checkpoint(args.checkpoint)
    if args.data:
        schema = load_schema(cfg.data.schema_path) if cfg.data.schema_path else ckpt.model.schema
        test = read_encoded(args.data, schema)
    else:
        _check_data_config(cfg)
        _, test = load_splits(cfg)
    report = RunReport(stage="eval")
    report.final = evaluate(ckpt.model, test, cfg.optim.batch_size)
    report.notes["checkpoint"] = args.checkpoint
    report.notes["head"] = ckpt.model.config.head.value
    save_report(_out(cfg, "eval_report.json"), report)
    return report


def _analysis_rows(
    manifest: InteractionManifest, train: MiniBatch, test: MiniBatch
) -> List[Tuple[str, float, float]]:
    """(id, alpha, statistics_AUC) per pair; NaN where a multi-hot field is involved."""
    ids = enumerate_interactions(manifest.field_count, Order.PAIR)
    table = statistics_auc_table(train, test, scorable_pairs(train.schema))
    return [
        (str(i), float(a), table.get(i, float("nan")))
        for i, a in zip(ids, manifest.alpha.alpha[Order.PAIR])
    ]


def cmd_analyze(cfg: RunConfig, args) -> RunReport:
    if args.train and args.test:
        schema = load_schema(cfg.data.schema_path or os.path.join(os.path.dirname(args.train), "schema.txt"))
        train, test = read_encoded(args.train, schema), read_encoded(args.test, schema)
    else:
        _check_data_config(cfg)
        train, test = load_splits(cfg)
    manifest = load_manifest(args.manifest, train.schema)

    rows = _analysis_rows(manifest, train, test)
    lines = ["id\talpha\tstatistics_auc"] + [f"{i}\t{a!r}\t{s!r}" for i, a, s in rows]
    write_text(_out(cfg, "analysis.tsv"), "\n".join(lines) + "\n")
    write_text(_out(cfg, "scatter.tsv"), two_column_text(
        [a for _, a, _ in rows], [s for _, _, s in rows], ("alpha", "statistics_auc"),
    ))
    all_alpha = np.concatenate([manifest.alpha.alpha[o] for o in manifest.coverage])
    hist = alpha_histogram(all_alpha, bins=args.bins)
    write_text(_out(cfg, "alpha_hist.tsv"), histogram_text(hist))

    report = RunReport(stage="analyze", alpha_histogram=hist)
    for order in manifest.coverage:
        report.kept[order_key(order)] = manifest.kept_fraction(order)
    gates = manifest.gates.gates[Order.PAIR]
    scored = [(g, a, s) for g, (_, a, s) in zip(gates, rows) if np.isfinite(s)]
    kept = [s for g, _, s in scored if g]
    pruned = [s for g, _, s in scored if not g]
    if kept:
        report.final["statistics_auc_kept_mean"] = float(np.mean(kept))
    if pruned:
        report.final["statistics_auc_pruned_mean"] = float(np.mean(pruned))
    try:
        report.final["alpha_statistics_auc_pearson"] = pearson(
            [abs(a) for _, a, _ in scored], [s for _, _, s in scored]
        )
    except ValueError as exc:
        logger.warning("Correlation undefined: %s", exc)

    if args.compare:
        others = [load_manifest(p, train.schema) for p in args.compare]
        runs = [np.concatenate([m.alpha.alpha[o] for o in m.coverage]) for m in [manifest] + others]
        _, mean = stability(runs)
        report.final["alpha_pearson_mean"] = mean
    save_report(_out(cfg, "report.json"), report)
    return report


def cmd_report(cfg: RunConfig, args) -> RunReport:
    return read_report(args.report)


HANDLERS = {
    "synth-gen": cmd_synth_gen,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "search": cmd_search,
    "retrain": cmd_retrain,
    "pipeline": cmd_pipeline,
    "third-order": cmd_third_order,
    "transfer": cmd_transfer,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", default=None, help="INI run config")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
        help="Override one config value (repeatable)",
    )
    common.add_argument("--seed", type=int, default=None, help="Master seed (run.seed)")
    common.add_argument("--output-dir", default=None, help="Run directory (run.output_dir)")
    common.add_argument("--epochs", type=int, default=None, help="Epochs for every training stage")
    common.add_argument(
        "--format", "-f", choices=["plain", "json"], default="plain",
        help="Output format (default: plain)",
    )
    common.add_argument("--output", "-o", default=None, help="Write the report to a file instead of stdout")
    common.add_argument("--dry-run", action="store_true", help="Validate and print the plan without computing")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", "-v", action="store_true", help="Debug logging and tracebacks")
    verbosity.add_argument("--quiet", "-q", action="store_true", help="Warnings and errors only")

    parser = argparse.ArgumentParser(
        prog="gatedfm",
        description=(
            "Search which feature interactions a factorization model needs, "
            "prune the rest, and retrain."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    sub.add_parser("synth-gen", parents=[common], help="Generate synthetic data with planted interactions")
    p = sub.add_parser("ingest", parents=[common], help="Encode a raw click log (.tsv/.txt/.xlsx)")
    p.add_argument("--raw", default=None, help="Raw log path (data.raw_path)")

    p = sub.add_parser("train", parents=[common], help="Train a plain FM/FM3/DeepFM/IPNN baseline")
    p.add_argument("--resume", default=None, help="Continue from a checkpoint")

    p = sub.add_parser("search", parents=[common], help="Search stage: learn sparse alpha with GRDA")
    p.add_argument("--manifest", default=None, help="Pair manifest to hold fixed while triples are searched")
    p.add_argument("--resume", default=None, help="Continue from a checkpoint")

    p = sub.add_parser("retrain", parents=[common], help="Retrain with the gates of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--variant", choices=[v.value for v in RetrainVariant], default=None)
    p.add_argument("--resume", default=None, help="Continue from a checkpoint")

    p = sub.add_parser("pipeline", parents=[common], help="Search then retrain")
    p.add_argument("--seeds", default=None, help="Comma-separated seed sweep (run.seeds)")
    p.add_argument("--jobs", type=int, default=None, help="Parallel processes for a sweep (run.jobs)")

    p = sub.add_parser("third-order", parents=[common], help="Search triples on top of a pair manifest")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("transfer", parents=[common], help="Train DeepFM/IPNN on a manifest's interactions")
    p.add_argument("--manifest", required=True)
    p.add_argument("--head", choices=[Head.IPNN.value, Head.DEEPFM.value], default=Head.IPNN.value)
    p.add_argument("--resume", default=None, help="Continue from a checkpoint")

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint on test data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None, help="Encoded test file (default: configured test split)")

    p = sub.add_parser("analyze", parents=[common], help="statistics_AUC scatter, alpha histogram, seed stability")
    p.add_argument("--manifest", required=True)
    p.add_argument("--train", default=None, help="Encoded train file")
    p.add_argument("--test", default=None, help="Encoded test file")
    p.add_argument("--compare", nargs="*", default=[], help="Manifests of other seeds")
    p.add_argument("--bins", type=int, default=20)

    p = sub.add_parser("report", parents=[common], help="Render a report.json")
    p.add_argument("--report", required=True)
    return parser


def resolve_config(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.output_dir is not None:
        overrides.append(f"run.output_dir={args.output_dir}")
    if args.epochs is not None:
        overrides += [f"search.epochs={args.epochs}", f"retrain.epochs={args.epochs}"]
    if getattr(args, "variant", None):
        overrides.append(f"retrain.variant={args.variant}")
    if getattr(args, "seeds", None):
        overrides.append(f"run.seeds={args.seeds}")
    if getattr(args, "jobs", None) is not None:
        overrides.append(f"run.jobs={args.jobs}")
    cfg = load_config(args.config, overrides)
    if args.command not in ("report", "ingest", "eval", "analyze"):
        _check_data_config(cfg)
    return cfg


def plan(cfg: RunConfig, args) -> str:
    lines = [
        f"command:      {args.command}",
        f"config hash:  {config_hash(cfg)}",
        f"seed:         {cfg.seed}" + (f"  (sweep: {','.join(map(str, cfg.run.seeds))}, jobs {cfg.run.jobs})" if cfg.run.seeds else ""),
        f"output dir:   {cfg.run.output_dir}",
        f"data:         {cfg.data.source.value}",
        f"model:        {cfg.model.head.value}, d={cfg.model.embedding_dim}, mlp={list(cfg.model.mlp_sizes)}",
        f"optim:        batch {cfg.optim.batch_size}, adam lr {cfg.optim.lr}, "
        f"grda lr {cfg.optim.grda_lr or 'auto'} c {cfg.optim.grda_c} mu {cfg.optim.grda_mu}",
        f"search:       {cfg.search.epochs} epoch(s)",
        f"retrain:      {cfg.retrain.epochs} epoch(s), variant {cfg.retrain.variant.value}",
    ]
    return "\n".join(lines)


def _configure_logging(args) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="[%(levelname)s] %(name)s: %(message)s", stream=sys.stderr)


def _emit(text: str, output: Optional[str]) -> None:
    if output:
        with open(output, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"Report written to {output}", file=sys.stderr)
    else:
        print(text)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args)

    try:
        cfg = resolve_config(args)
    except GatedFMError as exc:
        print(f"gatedfm: error: {exc}", file=sys.stderr)
        return 2

    if args.dry_run:
        _emit(plan(cfg, args), args.output)
        return 0

    try:
        if args.command != "report":
            write_run_info(cfg, args.command)
        report = HANDLERS[args.command](cfg, args)
    except DivergenceError as exc:
        logger.error("%s", exc)
        if exc.report is not None:
            save_report(_out(cfg, "report.json"), exc.report)
        return 1
    except (GatedFMError, ValueError, OSError) as exc:
        if args.verbose:
            logger.exception("%s failed", args.command)
        print(f"gatedfm: error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ValueError) else 1

    _emit(format_report(report, args.format), args.output)
    return 0


if __name__ == "__main__":
    sys.exit(main())

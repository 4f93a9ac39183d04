import hashlib
import os

import numpy as np
import pytest
from conftest import random_batch

from gatedfm.config import config_hash, load_config
from gatedfm.data_model import FieldSchema, Order
from gatedfm.errors import CheckpointCorruptError, CheckpointError, CheckpointVersionError, ManifestError
from gatedfm.interaction import ArchitectureParams, GateSet, InteractionMode
from gatedfm.network import Head, ModelConfig, build_model, forward
from gatedfm.optim import AdamState, GrdaState
from gatedfm.persistence import (
    CHECKPOINT_MAGIC,
    checkpoint_bytes,
    checkpoint_from_bytes,
    load_checkpoint,
    load_manifest,
    load_schema,
    manifest_from_text,
    manifest_to_text,
    read_report,
    restore_trainer,
    save_manifest,
    save_report,
    save_schema,
    save_trainer,
    write_atomic,
)
from gatedfm.pipeline import InteractionManifest
from gatedfm.report import RunReport
from gatedfm.trainer import Trainer


def _search_trainer(schema, seed=0):
    cfg = ModelConfig(head=Head.DEEPFM, embedding_dim=3, mlp_sizes=(4, 1), mode=InteractionMode.SEARCH)
    model = build_model(schema, cfg, np.random.default_rng(seed))
    grda = GrdaState.start({"alpha.pair": model.params["alpha.pair"]}, c=0.02)
    return Trainer(model, AdamState(lr=0.01), grda, batch_size=8, seed=4, stage="search")


def _manifest(schema):
    alpha = ArchitectureParams(schema.field_count, {Order.PAIR: np.array([0.5, 0.0, -0.25, 0.0, 1e-3, 0.0])})
    return InteractionManifest.from_alpha(schema, alpha, {"stage": "search", "seed": "3"})


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_restores_model_and_optimisers(schema, batch):
    trainer = _search_trainer(schema)
    trainer.fit(random_batch(schema, 24), 1)
    ckpt = checkpoint_from_bytes(checkpoint_bytes(trainer.model, trainer.adam, trainer.grda, trainer.position(), "abc"))

    assert ckpt.config_hash == "abc"
    assert ckpt.model.config == trainer.model.config
    assert ckpt.model.schema == trainer.model.schema
    for name, p in trainer.model.params.items():
        np.testing.assert_array_equal(ckpt.model.params[name], p)
    for name, m in trainer.adam.m.items():
        np.testing.assert_array_equal(ckpt.adam.m[name], m)
    assert ckpt.adam.step == trainer.adam.step
    assert ckpt.grda.step == trainer.grda.step
    np.testing.assert_array_equal(ckpt.grda.accumulator["alpha.pair"], trainer.grda.accumulator["alpha.pair"])
    state = ckpt.model.bn_states["inter.pair"]
    np.testing.assert_array_equal(state.running_var, trainer.model.bn_states["inter.pair"].running_var)
    np.testing.assert_array_equal(forward(ckpt.model, batch).logits, forward(trainer.model, batch).logits)


def test_resumed_training_matches_uninterrupted(schema, tmp_path):
    data = random_batch(schema, 40, seed=8)
    straight = _search_trainer(schema)
    straight.fit(data, 2)

    first = _search_trainer(schema)
    first.run(data, max_steps=7)
    path = str(tmp_path / "search.ckpt")
    save_trainer(path, first, "h1")
    resumed = restore_trainer(load_checkpoint(path, expected_config_hash="h1"))
    assert resumed.epoch == 1 and resumed.batch_index == 2
    resumed.fit(data, 2)

    assert resumed.steps == straight.steps
    for name, p in straight.model.params.items():
        np.testing.assert_array_equal(resumed.model.params[name], p, err_msg=name)
    assert [r.train_loss for r in resumed.records] == [r.train_loss for r in straight.records]


def test_gates_and_frozen_set_survive(schema):
    gates = GateSet(schema.field_count, {Order.PAIR: np.array([1, 0, 1, 0, 0, 1], dtype=bool)})
    cfg = ModelConfig(head=Head.FM, embedding_dim=2, mode=InteractionMode.RETRAIN)
    model = build_model(schema, cfg, np.random.default_rng(0), gates=gates)
    model.frozen.add("alpha.pair")
    ckpt = checkpoint_from_bytes(checkpoint_bytes(model, AdamState()))
    assert ckpt.model.gates.gates[Order.PAIR].tolist() == gates.gates[Order.PAIR].tolist()
    assert ckpt.model.frozen == {"alpha.pair"}
    assert ckpt.grda is None and ckpt.position is None
    with pytest.raises(CheckpointError, match="no trainer position"):
        restore_trainer(ckpt)


def test_flipped_byte_is_detected(schema):
    trainer = _search_trainer(schema)
    data = bytearray(checkpoint_bytes(trainer.model, trainer.adam, trainer.grda))
    data[len(data) // 2] ^= 0xFF
    with pytest.raises(CheckpointCorruptError, match="checksum"):
        checkpoint_from_bytes(bytes(data))


def test_truncated_and_foreign_files(schema):
    trainer = _search_trainer(schema)
    data = checkpoint_bytes(trainer.model, trainer.adam)
    with pytest.raises(CheckpointCorruptError):
        checkpoint_from_bytes(data[:-40])
    with pytest.raises(CheckpointCorruptError, match="magic"):
        checkpoint_from_bytes(b"PK\x03\x04" + data[4:])


def test_future_version_is_rejected(schema):
    trainer = _search_trainer(schema)
    data = checkpoint_bytes(trainer.model, trainer.adam)
    body = data[: data.rfind(b"SHA256 ")].replace(b'"version": 1', b'"version": 9', 1)
    # keep the header length valid: both numbers are one digit
    resealed = body + f"SHA256 {hashlib.sha256(body).hexdigest()}\n".encode("ascii")
    with pytest.raises(CheckpointVersionError, match="Supported: 1"):
        checkpoint_from_bytes(resealed)


def test_config_hash_must_match(schema, tmp_path):
    cfg = load_config(overrides=["run.seed=1"])
    trainer = _search_trainer(schema)
    path = str(tmp_path / "a.ckpt")
    save_trainer(path, trainer, config_hash(cfg))
    load_checkpoint(path, expected_config_hash=config_hash(cfg))
    other = load_config(overrides=["run.seed=2"])
    with pytest.raises(CheckpointError, match="current config"):
        load_checkpoint(path, expected_config_hash=config_hash(other))


def test_checkpoint_bytes_are_deterministic(schema):
    a = _search_trainer(schema)
    b = _search_trainer(schema)
    assert checkpoint_bytes(a.model, a.adam, a.grda) == checkpoint_bytes(b.model, b.adam, b.grda)
    assert checkpoint_bytes(a.model, a.adam).startswith(CHECKPOINT_MAGIC)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def test_manifest_text_layout(schema):
    text = manifest_to_text(_manifest(schema))
    lines = text.splitlines()
    assert lines[0].startswith("#")
    assert "coverage\tpair" in lines
    assert "provenance\tseed=3;stage=search" in lines
    assert lines[6] == "0,1\t1\t0.5"
    assert lines[7] == "0,2\t0\t0.0"


def test_manifest_file_loads_back(schema, tmp_path):
    manifest = _manifest(schema)
    path = str(tmp_path / "manifest.txt")
    save_manifest(path, manifest)
    back = load_manifest(path, schema)
    assert back.fingerprint == manifest.fingerprint
    assert back.provenance == manifest.provenance
    assert back.gates.gates[Order.PAIR].tolist() == [True, False, True, False, True, False]
    np.testing.assert_array_equal(back.alpha.alpha[Order.PAIR], manifest.alpha.alpha[Order.PAIR])


def test_manifest_for_another_schema_is_rejected(schema, tmp_path):
    path = str(tmp_path / "manifest.txt")
    save_manifest(path, _manifest(schema))
    with pytest.raises(ManifestError, match="built for schema"):
        load_manifest(path, FieldSchema.one_hot([3, 4, 5, 3]))


def test_manifest_lines_must_be_canonical(schema):
    lines = manifest_to_text(_manifest(schema)).splitlines()
    lines[6], lines[7] = lines[7], lines[6]
    with pytest.raises(ManifestError, match="canonical order"):
        manifest_from_text("\n".join(lines))


def test_manifest_rejects_bad_gate_and_missing_header(schema):
    text = manifest_to_text(_manifest(schema))
    with pytest.raises(ManifestError, match="malformed"):
        manifest_from_text(text.replace("0,1\t1\t", "0,1\t2\t"))
    with pytest.raises(ManifestError, match="lacks 'fingerprint'"):
        manifest_from_text("\n".join(l for l in text.splitlines() if not l.startswith("fingerprint")))
    with pytest.raises(ManifestError, match="version"):
        manifest_from_text(text.replace("version\t1", "version\t2"))


def test_manifest_with_triples(schema):
    m = schema.field_count
    alpha = ArchitectureParams(m, {Order.PAIR: np.ones(6), Order.TRIPLE: np.array([0.0, 0.3, 0.0, 0.0])})
    manifest = InteractionManifest.from_alpha(schema, alpha, {})
    back = manifest_from_text(manifest_to_text(manifest))
    assert back.coverage == (Order.PAIR, Order.TRIPLE)
    assert back.gates.gates[Order.TRIPLE].tolist() == [False, True, False, False]


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def test_atomic_write_leaves_no_temp_files(tmp_path):
    path = tmp_path / "sub" / "out.bin"
    write_atomic(str(path), b"one")
    write_atomic(str(path), b"two")
    assert path.read_bytes() == b"two"
    assert os.listdir(tmp_path / "sub") == ["out.bin"]


def test_schema_and_report_files(tmp_path, multi_hot_schema):
    save_schema(str(tmp_path / "schema.txt"), multi_hot_schema)
    assert load_schema(str(tmp_path / "schema.txt")) == multi_hot_schema
    report = RunReport(stage="search", kept={"pair": 0.5}, open_counts={"pair": (3, 6)}, final={"search_auc": 0.7})
    save_report(str(tmp_path / "report.json"), report)
    assert read_report(str(tmp_path / "report.json")) == report

"""
On-disk formats.

Checkpoint
----------
Binary file, written to a temp file and renamed into place::

    GATEDFM-CKPT\\n
    <header length in bytes>\\n
    <JSON header>
    <tensor blocks, little-endian, concatenated>
    SHA256 <hex digest of everything above>\\n

The header holds the format version, schema fingerprint and text, model
config, config hash, optimiser scalars, trainer position, and a directory of
tensors (``name``, ``dtype``, ``shape``, ``offset``, ``nbytes``; offsets are
relative to the first block).  Tensor names::

    param/<name>  gate/<order>  bn/<key>/mean  bn/<key>/var
    adam.m/<name>  adam.v/<name>  grda.acc/<name>  grda.init/<name>

Manifest
--------
Text, one interaction per line in canonical order::

    # gatedfm interaction manifest
    version\\t1
    fingerprint\\t3f9c0e2a7b1d4c55
    fields\\t6
    coverage\\tpair
    provenance\\tconfig=...;seed=1;stage=search
    0,1\\t1\\t0.8731...
    0,2\\t0\\t0.0
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .data_model import FieldSchema, InteractionId, Order, enumerate_interactions
from .errors import CheckpointCorruptError, CheckpointError, CheckpointVersionError, ManifestError
from .interaction import ArchitectureParams, BNState, GateSet, order_key
from .network import FactorizationModel, ModelConfig
from .optim import AdamState, GrdaState
from .pipeline import MANIFEST_VERSION, InteractionManifest
from .report import RunReport, format_json, load_report
from .trainer import Trainer

CHECKPOINT_MAGIC = b"GATEDFM-CKPT\n"
CHECKPOINT_VERSION = 1
_ORDERS = {order_key(o): o for o in Order}


def write_atomic(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text(path: str, text: str) -> None:
    write_atomic(path, text.encode("utf-8"))


def read_text(path: str) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model: FactorizationModel
    adam: AdamState
    grda: Optional[GrdaState]
    position: Optional[Dict[str, object]]
    config_hash: str
    version: int = CHECKPOINT_VERSION


def _tensors(model: FactorizationModel, adam: AdamState, grda: Optional[GrdaState]) -> List[Tuple[str, np.ndarray]]:
    out = [(f"param/{n}", p) for n, p in model.params.items()]
    if model.gates is not None:
        out += [(f"gate/{order_key(o)}", g) for o, g in model.gates.gates.items()]
    for key, state in model.bn_states.items():
        out += [(f"bn/{key}/mean", state.running_mean), (f"bn/{key}/var", state.running_var)]
    out += [(f"adam.m/{n}", a) for n, a in adam.m.items()]
    out += [(f"adam.v/{n}", a) for n, a in adam.v.items()]
    if grda is not None:
        out += [(f"grda.acc/{n}", a) for n, a in grda.accumulator.items()]
        out += [(f"grda.init/{n}", a) for n, a in grda.initial.items()]
    return out


def checkpoint_bytes(
    model: FactorizationModel,
    adam: AdamState,
    grda: Optional[GrdaState] = None,
    position: Optional[Dict[str, object]] = None,
    config_hash: str = "",
) -> bytes:
    directory, blocks, offset = [], [], 0
    for name, arr in _tensors(model, adam, grda):
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        directory.append({
            "name": name,
            "dtype": le.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        blocks.append(blob)
        offset += len(blob)

    header = {
        "version": CHECKPOINT_VERSION,
        "fingerprint": model.schema.fingerprint(),
        "schema": model.schema.to_text(),
        "model_config": model.config.to_dict(),
        "config_hash": config_hash,
        "frozen": sorted(model.frozen),
        "bn": {k: {"momentum": s.momentum, "eps": s.eps} for k, s in model.bn_states.items()},
        "adam": {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "step": adam.step},
        "grda": None if grda is None else {
            "lr": grda.lr, "c": grda.c, "mu": grda.mu, "step": grda.step, "names": list(grda.names),
        },
        "position": position,
        "tensors": directory,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = CHECKPOINT_MAGIC + f"{len(head)}\n".encode("ascii") + head + b"".join(blocks)
    return body + f"SHA256 {hashlib.sha256(body).hexdigest()}\n".encode("ascii")


def save_checkpoint(
    path: str,
    model: FactorizationModel,
    adam: AdamState,
    grda: Optional[GrdaState] = None,
    position: Optional[Dict[str, object]] = None,
    config_hash: str = "",
) -> None:
    write_atomic(path, checkpoint_bytes(model, adam, grda, position, config_hash))


def save_trainer(path: str, trainer: Trainer, config_hash: str = "") -> None:
    save_checkpoint(path, trainer.model, trainer.adam, trainer.grda, trainer.position(), config_hash)


def _split(data: bytes) -> Tuple[dict, bytes]:
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointCorruptError("Not a gatedfm checkpoint (bad magic line)")
    cut = data.rfind(b"SHA256 ")
    if cut < 0 or not data.endswith(b"\n"):
        raise CheckpointCorruptError("Checkpoint is truncated (no checksum trailer)")
    body, trailer = data[:cut], data[cut:].strip()
    expected = trailer.split(b" ", 1)[1].decode("ascii", "replace")
    if hashlib.sha256(body).hexdigest() != expected:
        raise CheckpointCorruptError("Checkpoint checksum mismatch")

    rest = body[len(CHECKPOINT_MAGIC):]
    length_line, _, rest = rest.partition(b"\n")
    try:
        n = int(length_line)
        header = json.loads(rest[:n].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointCorruptError(f"Unreadable checkpoint header: {exc}") from exc
    return header, rest[n:]


def _read_tensors(header: dict, blocks: bytes) -> Dict[str, np.ndarray]:
    out = {}
    for entry in header["tensors"]:
        start, size = entry["offset"], entry["nbytes"]
        if start + size > len(blocks):
            raise CheckpointCorruptError(f"Tensor {entry['name']} runs past the end of the file")
        arr = np.frombuffer(blocks[start: start + size], dtype=np.dtype(entry["dtype"]))
        out[entry["name"]] = arr.reshape(entry["shape"]).astype(arr.dtype.newbyteorder("="), copy=True)
    return out


def _group(tensors: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def checkpoint_from_bytes(data: bytes, expected_config_hash: Optional[str] = None) -> Checkpoint:
    header, blocks = _split(data)
    version = header.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"Checkpoint format version {version} is not supported. Supported: {CHECKPOINT_VERSION}"
        )
    if expected_config_hash is not None and header["config_hash"] != expected_config_hash:
        raise CheckpointError(
            f"Checkpoint was written under config {header['config_hash']}, "
            f"current config is {expected_config_hash}"
        )
    tensors = _read_tensors(header, blocks)
    schema = FieldSchema.from_text(header["schema"])
    if schema.fingerprint() != header["fingerprint"]:
        raise CheckpointCorruptError("Checkpoint schema does not match its fingerprint")

    gates_raw = _group(tensors, "gate/")
    gates = GateSet(schema.field_count, {_ORDERS[k]: v for k, v in gates_raw.items()}) if gates_raw else None
    bn_states = {}
    for key, meta in header["bn"].items():
        bn_states[key] = BNState(
            tensors[f"bn/{key}/mean"], tensors[f"bn/{key}/var"], meta["momentum"], meta["eps"]
        )
    model = FactorizationModel(
        schema=schema,
        config=ModelConfig.from_dict(header["model_config"]),
        params=_group(tensors, "param/"),
        gates=gates,
        bn_states=bn_states,
        frozen=set(header["frozen"]),
    )

    a = header["adam"]
    adam = AdamState(
        lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"],
        m=_group(tensors, "adam.m/"), v=_group(tensors, "adam.v/"),
    )
    grda = None
    if header["grda"] is not None:
        g = header["grda"]
        acc, init = _group(tensors, "grda.acc/"), _group(tensors, "grda.init/")
        grda = GrdaState(
            lr=g["lr"], c=g["c"], mu=g["mu"], step=g["step"],
            accumulator={n: acc[n] for n in g["names"]},
            initial={n: init[n] for n in g["names"]},
        )
    return Checkpoint(model, adam, grda, header["position"], header["config_hash"], version)


def load_checkpoint(path: str, expected_config_hash: Optional[str] = None) -> Checkpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read(), expected_config_hash)


def restore_trainer(ckpt: Checkpoint, eval_data=None) -> Trainer:
    """Trainer that continues exactly where the checkpointed one stopped."""
    if ckpt.position is None:
        raise CheckpointError("Checkpoint holds no trainer position")
    pos = ckpt.position
    trainer = Trainer(
        ckpt.model, ckpt.adam, ckpt.grda,
        batch_size=int(pos["batch_size"]), seed=int(pos["seed"]), stage=str(pos["stage"]),
        eval_data=eval_data,
    )
    trainer.restore_position(pos)
    return trainer


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def manifest_to_text(manifest: InteractionManifest) -> str:
    prov = ";".join(f"{k}={v}" for k, v in sorted(manifest.provenance.items()))
    lines = [
        "# gatedfm interaction manifest",
        f"version\t{manifest.version}",
        f"fingerprint\t{manifest.fingerprint}",
        f"fields\t{manifest.field_count}",
        f"coverage\t{','.join(order_key(o) for o in manifest.coverage)}",
        f"provenance\t{prov}",
    ]
    for order in manifest.coverage:
        for iid, gate, a in zip(
            enumerate_interactions(manifest.field_count, order),
            manifest.gates.gates[order],
            manifest.alpha.alpha[order],
        ):
            lines.append(f"{iid}\t{int(gate)}\t{float(a)!r}")
    return "\n".join(lines) + "\n"


def manifest_from_text(text: str) -> InteractionManifest:
    header: Dict[str, str] = {}
    rows: List[Tuple[InteractionId, bool, float]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip() or raw.startswith("#"):
            continue
        parts = raw.split("\t")
        if len(parts) == 2:
            header[parts[0]] = parts[1]
            continue
        if len(parts) != 3 or parts[1] not in ("0", "1"):
            raise ManifestError(f"Manifest line {lineno} is malformed: {raw!r}")
        try:
            rows.append((InteractionId.parse(parts[0]), parts[1] == "1", float(parts[2])))
        except ValueError as exc:
            raise ManifestError(f"Manifest line {lineno}: {exc}") from exc

    for key in ("version", "fingerprint", "fields", "coverage"):
        if key not in header:
            raise ManifestError(f"Manifest header lacks '{key}'")
    if int(header["version"]) != MANIFEST_VERSION:
        raise ManifestError(
            f"Manifest version {header['version']} is not supported. Supported: {MANIFEST_VERSION}"
        )
    m = int(header["fields"])
    try:
        coverage = [_ORDERS[c] for c in header["coverage"].split(",")]
    except KeyError as exc:
        raise ManifestError(f"Unknown order {exc} in manifest coverage") from exc

    gates, alpha, pos = {}, {}, 0
    for order in coverage:
        ids = enumerate_interactions(m, order)
        chunk = rows[pos: pos + len(ids)]
        if [r[0] for r in chunk] != ids:
            raise ManifestError(f"Manifest {order_key(order)} lines are missing or out of canonical order")
        gates[order] = np.array([r[1] for r in chunk], dtype=bool)
        alpha[order] = np.array([r[2] for r in chunk], dtype=np.float64)
        pos += len(ids)
    if pos != len(rows):
        raise ManifestError(f"Manifest has {len(rows) - pos} unexpected trailing lines")

    provenance = dict(
        item.split("=", 1) for item in header.get("provenance", "").split(";") if "=" in item
    )
    return InteractionManifest(
        fingerprint=header["fingerprint"],
        gates=GateSet(m, gates),
        alpha=ArchitectureParams(m, alpha),
        provenance=provenance,
        version=int(header["version"]),
    )


def save_manifest(path: str, manifest: InteractionManifest) -> None:
    write_text(path, manifest_to_text(manifest))


def load_manifest(path: str, schema: Optional[FieldSchema] = None) -> InteractionManifest:
    manifest = manifest_from_text(read_text(path))
    if schema is not None:
        manifest.check(schema)
    return manifest


# ---------------------------------------------------------------------------
# Schemas and reports
# ---------------------------------------------------------------------------

def save_schema(path: str, schema: FieldSchema) -> None:
    write_text(path, schema.to_text())


def load_schema(path: str) -> FieldSchema:
    return FieldSchema.from_text(read_text(path))


def save_report(path: str, report: RunReport) -> None:
    write_text(path, format_json(report) + "\n")


def read_report(path: str) -> RunReport:
    return load_report(read_text(path))

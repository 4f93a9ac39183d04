"""
Per-field embedding tables.

A one-hot field looks up one row of its table; a multi-hot field sums or
averages the rows of its active indices.  Gradients come back as
`SparseRows`: only rows touched by the batch appear, so untouched rows get
no optimiser update at all.

The scalar per-feature weights of the linear term ``<w, x>`` are stored the
same way (one ``(n_i,)`` vector per field) and share the lookup and scatter
code below.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .data_model import FieldBlock, FieldSchema, Instance, MiniBatch, Reduce
from .errors import SchemaError


@dataclass
class EmbeddingTable:
    tables: List[np.ndarray]
    dim: int
    init_scale: float = 0.0

    def __post_init__(self):
        if self.dim < 1:
            raise SchemaError(f"Embedding dimension must be >= 1, got {self.dim}")
        for i, v in enumerate(self.tables):
            if v.ndim != 2 or v.shape[1] != self.dim:
                raise SchemaError(f"Table {i} has shape {v.shape}, expected (n, {self.dim})")

    @classmethod
    def initialise(
        cls,
        schema: FieldSchema,
        dim: int,
        rng: np.random.Generator,
        init_scale: Optional[float] = None,
    ) -> "EmbeddingTable":
        """Entries drawn from N(0, 1/d) unless *init_scale* (a std) is given."""
        scale = float(np.sqrt(1.0 / dim)) if init_scale is None else float(init_scale)
        tables = [rng.normal(0.0, scale, size=(n, dim)) for n in schema.cardinalities]
        return cls(tables, dim, scale)

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tables)


@dataclass
class EmbeddedInstance:
    vectors: np.ndarray  # (m, d)


@dataclass
class SparseRows:
    """Row-indexed gradient: ``values[k]`` belongs to row ``rows[k]``; rows are unique."""

    rows: np.ndarray
    values: np.ndarray

    def to_dense(self, n_rows: int) -> np.ndarray:
        out = np.zeros((n_rows,) + self.values.shape[1:], dtype=np.float64)
        out[self.rows] = self.values
        return out

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.values).all())


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def lookup(block: FieldBlock, table: np.ndarray, reduce: Reduce) -> np.ndarray:
    """Reduced lookup of one field: ``(B, d)`` for a matrix table, ``(B,)`` for a vector."""
    w = block.weights(reduce)
    rows = table[block.indices]  # (B, k) or (B, k, d)
    if table.ndim == 1:
        return (rows * w).sum(axis=1)
    return np.einsum("bk,bkd->bd", w, rows)


def _check_range(block: FieldBlock, n: int, field: int) -> None:
    active = block.indices[block.mask]
    if active.size and (active.min() < 0 or active.max() >= n):
        raise SchemaError(f"Field {field} index out of range [0, {n})")


def embed_batch(batch: MiniBatch, table: EmbeddingTable, reduce: Optional[Reduce] = None) -> np.ndarray:
    """``(B, m, d)`` embeddings; *reduce* defaults to the schema's multi-hot mode."""
    reduce = reduce or batch.schema.multi_hot_reduce
    if len(batch.blocks) != len(table.tables):
        raise SchemaError(
            f"Batch has {len(batch.blocks)} fields, embedding has {len(table.tables)} tables"
        )
    out = np.empty((batch.size, len(table.tables), table.dim), dtype=np.float64)
    for f, (block, v) in enumerate(zip(batch.blocks, table.tables)):
        _check_range(block, v.shape[0], f)
        out[:, f, :] = lookup(block, v, reduce)
    return out


def embed(instance: Instance, table: EmbeddingTable, reduce: Reduce = Reduce.SUM) -> EmbeddedInstance:
    vectors = np.empty((len(instance.indices), table.dim), dtype=np.float64)
    if len(instance.indices) != len(table.tables):
        raise SchemaError(
            f"Instance has {len(instance.indices)} fields, embedding has {len(table.tables)} tables"
        )
    for f, (idx, v) in enumerate(zip(instance.indices, table.tables)):
        if not idx:
            raise SchemaError(f"Field {f} has no active index")
        if min(idx) < 0 or max(idx) >= v.shape[0]:
            raise SchemaError(f"Field {f} index out of range [0, {v.shape[0]})")
        rows = v[list(idx)]
        vectors[f] = rows.mean(axis=0) if reduce is Reduce.AVERAGE else rows.sum(axis=0)
    return EmbeddedInstance(vectors)


def linear_term(batch: MiniBatch, weights: Sequence[np.ndarray]) -> np.ndarray:
    """Sum of the scalar weights of every active index; multi-hot is never averaged here."""
    total = np.zeros(batch.size, dtype=np.float64)
    for block, w in zip(batch.blocks, weights):
        total += lookup(block, w, Reduce.SUM)
    return total


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

def scatter_rows(block: FieldBlock, weights: np.ndarray, upstream: np.ndarray) -> SparseRows:
    """Scatter per-row *upstream* gradients onto table rows through lookup *weights*.

    *upstream* is ``(B, d)`` for a matrix table or ``(B,)`` for a vector table.
    Padding slots have weight 0 and are excluded.
    """
    mask = weights != 0
    idx = block.indices[mask]
    if upstream.ndim == 1:
        vals = (weights * upstream[:, None])[mask]
    else:
        vals = (weights[:, :, None] * upstream[:, None, :])[mask]
    rows, inverse = np.unique(idx, return_inverse=True)
    out = np.zeros((rows.size,) + vals.shape[1:], dtype=np.float64)
    np.add.at(out, inverse, vals)
    return SparseRows(rows, out)


def accumulate_batch_grad(
    batch: MiniBatch,
    upstream: np.ndarray,
    reduce: Optional[Reduce] = None,
) -> List[SparseRows]:
    """Per-field sparse gradients of the embedding tables from ``(B, m, d)`` upstream."""
    reduce = reduce or batch.schema.multi_hot_reduce
    return [
        scatter_rows(block, block.weights(reduce), upstream[:, f, :])
        for f, block in enumerate(batch.blocks)
    ]


def linear_grad(batch: MiniBatch, upstream: np.ndarray) -> List[SparseRows]:
    return [scatter_rows(block, block.weights(Reduce.SUM), upstream) for block in batch.blocks]


def accumulate_embed_grad(
    instance: Instance,
    upstream: np.ndarray,
    reduce: Reduce = Reduce.SUM,
) -> List[SparseRows]:
    """Single-instance form of `accumulate_batch_grad`; *upstream* is ``(m, d)``."""
    grads = []
    for idx, g in zip(instance.indices, upstream):
        rows, counts = np.unique(np.asarray(idx, dtype=np.int64), return_counts=True)
        scale = 1.0 / len(idx) if reduce is Reduce.AVERAGE else 1.0
        grads.append(SparseRows(rows, counts[:, None] * scale * g[None, :]))
    return grads

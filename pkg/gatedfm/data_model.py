"""
Core value types shared by every other module.

* `FieldSchema`  : field count, per-field cardinalities, multi-hot layout.
* `Instance`     : one labelled row as per-field lists of active indices.
* `MiniBatch`    : columnar encoding of many instances.  Whole train/test
  splits use the same type; a training batch is just a `take()` of rows.
* `InteractionId`: a canonical ``(i, j)`` or ``(i, j, t)`` field tuple.

The canonical order of interaction ids is lexicographic.  α vectors,
manifests and checkpoints are all indexed by position in that order.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import SchemaError


class Reduce(Enum):
    SUM = "sum"
    AVERAGE = "average"


class Order(Enum):
    PAIR = 2
    TRIPLE = 3


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FieldSchema:
    cardinalities: Tuple[int, ...]
    multi_hot_flags: Tuple[bool, ...] = ()
    multi_hot_reduce: Reduce = Reduce.SUM
    names: Tuple[str, ...] = ()

    def __post_init__(self):
        cards = tuple(int(n) for n in self.cardinalities)
        flags = tuple(bool(f) for f in self.multi_hot_flags) or (False,) * len(cards)
        names = tuple(self.names) or tuple(f"f{i}" for i in range(len(cards)))
        object.__setattr__(self, "cardinalities", cards)
        object.__setattr__(self, "multi_hot_flags", flags)
        object.__setattr__(self, "names", names)

        if len(cards) < 2:
            raise SchemaError(f"A schema needs at least 2 fields, got {len(cards)}")
        if any(n < 1 for n in cards):
            raise SchemaError(f"Every field cardinality must be >= 1, got {list(cards)}")
        if len(flags) != len(cards) or len(names) != len(cards):
            raise SchemaError(
                f"Schema lists disagree in length: {len(cards)} cardinalities, "
                f"{len(flags)} multi-hot flags, {len(names)} names"
            )
        if len(set(names)) != len(names):
            raise SchemaError(f"Duplicate field names: {list(names)}")

    @property
    def field_count(self) -> int:
        return len(self.cardinalities)

    @classmethod
    def one_hot(cls, cardinalities: Sequence[int]) -> "FieldSchema":
        return cls(cardinalities=tuple(cardinalities))

    def fingerprint(self) -> str:
        """Stable identifier of the index space; manifests and checkpoints carry it."""
        canon = "|".join([
            ",".join(str(n) for n in self.cardinalities),
            ",".join("1" if f else "0" for f in self.multi_hot_flags),
            self.multi_hot_reduce.value,
        ])
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def to_text(self) -> str:
        lines = [f"reduce\t{self.multi_hot_reduce.value}"]
        for name, n, multi in zip(self.names, self.cardinalities, self.multi_hot_flags):
            lines.append(f"{name}\t{n}\t{'multi' if multi else 'one'}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FieldSchema":
        reduce = Reduce.SUM
        names, cards, flags = [], [], []
        for raw in text.splitlines():
            if not raw.strip():
                continue
            parts = raw.split("\t")
            if parts[0] == "reduce":
                reduce = Reduce(parts[1])
                continue
            if len(parts) != 3:
                raise SchemaError(f"Malformed schema line: {raw!r}")
            names.append(parts[0])
            cards.append(int(parts[1]))
            flags.append(parts[2] == "multi")
        return cls(tuple(cards), tuple(flags), reduce, tuple(names))


# ---------------------------------------------------------------------------
# Instances
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Instance:
    indices: Tuple[Tuple[int, ...], ...]
    label: int

    def __post_init__(self):
        object.__setattr__(
            self, "indices", tuple(tuple(int(j) for j in f) for f in self.indices)
        )

    def validate(self, schema: FieldSchema) -> None:
        if self.label not in (0, 1):
            raise SchemaError(f"Label must be 0 or 1, got {self.label!r}")
        if len(self.indices) != schema.field_count:
            raise SchemaError(
                f"Instance has {len(self.indices)} fields, schema has {schema.field_count}"
            )
        for i, (idx, n, multi) in enumerate(
            zip(self.indices, schema.cardinalities, schema.multi_hot_flags)
        ):
            if not idx:
                raise SchemaError(f"Field {i} has no active index")
            if not multi and len(idx) != 1:
                raise SchemaError(f"One-hot field {i} carries {len(idx)} indices")
            bad = [j for j in idx if j < 0 or j >= n]
            if bad:
                raise SchemaError(f"Field {i} index {bad[0]} out of range [0, {n})")


@dataclass(frozen=True)
class FieldBlock:
    """Padded ``(n, k)`` index matrix of one field plus the active count per row."""

    indices: np.ndarray
    counts: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.indices.shape[1])[None, :] < self.counts[:, None]

    def weights(self, reduce: Reduce) -> np.ndarray:
        mask = self.mask.astype(np.float64)
        if reduce is Reduce.AVERAGE:
            return mask / self.counts[:, None]
        return mask

    def take(self, rows: np.ndarray) -> "FieldBlock":
        return FieldBlock(self.indices[rows], self.counts[rows])


@dataclass(frozen=True)
class MiniBatch:
    schema: FieldSchema
    blocks: Tuple[FieldBlock, ...]
    labels: np.ndarray

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])

    def __len__(self) -> int:
        return self.size

    @classmethod
    def from_instances(cls, schema: FieldSchema, instances: Sequence[Instance]) -> "MiniBatch":
        for inst in instances:
            inst.validate(schema)
        n = len(instances)
        blocks = []
        for f in range(schema.field_count):
            counts = np.array([len(inst.indices[f]) for inst in instances], dtype=np.int64)
            k = int(counts.max()) if n else 1
            idx = np.zeros((n, k), dtype=np.int64)
            for r, inst in enumerate(instances):
                idx[r, : counts[r]] = inst.indices[f]
            blocks.append(FieldBlock(idx, counts))
        labels = np.array([inst.label for inst in instances], dtype=np.int64)
        return cls(schema, tuple(blocks), labels)

    @classmethod
    def from_arrays(cls, schema: FieldSchema, indices: np.ndarray, labels: np.ndarray) -> "MiniBatch":
        """Fast path for all-one-hot data: ``indices`` is ``(n, m)``."""
        indices = np.asarray(indices, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        if any(schema.multi_hot_flags):
            raise SchemaError("from_arrays only supports one-hot schemas")
        if indices.ndim != 2 or indices.shape[1] != schema.field_count:
            raise SchemaError(f"Expected (n, {schema.field_count}) indices, got {indices.shape}")
        if indices.shape[0] != labels.shape[0]:
            raise SchemaError("indices and labels disagree in length")
        if not np.isin(labels, (0, 1)).all():
            raise SchemaError("Labels must be 0 or 1")
        cards = np.array(schema.cardinalities)
        if (indices < 0).any() or (indices >= cards[None, :]).any():
            raise SchemaError("Index out of range for schema cardinalities")
        ones = np.ones(indices.shape[0], dtype=np.int64)
        blocks = tuple(FieldBlock(indices[:, [f]].copy(), ones) for f in range(schema.field_count))
        return cls(schema, blocks, labels)

    def take(self, rows: np.ndarray) -> "MiniBatch":
        rows = np.asarray(rows)
        return MiniBatch(self.schema, tuple(b.take(rows) for b in self.blocks), self.labels[rows])

    def instances(self) -> List[Instance]:
        out = []
        for r in range(self.size):
            per_field = tuple(
                tuple(int(j) for j in b.indices[r, : b.counts[r]]) for b in self.blocks
            )
            out.append(Instance(per_field, int(self.labels[r])))
        return out

    def one_hot_matrix(self) -> np.ndarray:
        """``(n, m)`` index matrix; only defined when every field is one-hot."""
        if any(self.schema.multi_hot_flags):
            raise SchemaError("one_hot_matrix needs a one-hot schema")
        return np.column_stack([b.indices[:, 0] for b in self.blocks])

    def iter_batches(
        self,
        batch_size: int,
        rng: Optional[np.random.Generator] = None,
        start: int = 0,
    ) -> Iterator["MiniBatch"]:
        """Yield consecutive batches, shuffled when *rng* is given.

        A trailing remainder of a single row is folded into the previous batch so
        batch normalisation always sees at least two rows.
        """
        order = rng.permutation(self.size) if rng is not None else np.arange(self.size)
        bounds = list(range(0, self.size, batch_size)) + [self.size]
        if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
            bounds.pop(-2)
        for b in range(start, len(bounds) - 1):
            yield self.take(order[bounds[b]: bounds[b + 1]])

    def batch_count(self, batch_size: int) -> int:
        n = -(-self.size // batch_size)
        if n > 1 and self.size % batch_size == 1:
            n -= 1
        return n

    def positive_ratio(self) -> float:
        return float(self.labels.mean()) if self.size else 0.0

    def digest(self) -> str:
        """First 16 hex digits of SHA-256 over the schema, active indices and labels, in row order."""
        h = hashlib.sha256(self.schema.fingerprint().encode("utf-8"))
        for block in self.blocks:
            h.update(np.ascontiguousarray(np.where(block.mask, block.indices, -1), dtype="<i8").tobytes())
            h.update(np.ascontiguousarray(block.counts, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Interaction identifiers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class InteractionId:
    fields: Tuple[int, ...]

    def __post_init__(self):
        fields = tuple(int(i) for i in self.fields)
        object.__setattr__(self, "fields", fields)
        if len(fields) not in (2, 3):
            raise SchemaError(f"Interaction must span 2 or 3 fields, got {fields}")
        if any(a >= b for a, b in zip(fields, fields[1:])) or fields[0] < 0:
            raise SchemaError(f"Interaction fields must be strictly increasing, got {fields}")

    @property
    def order(self) -> Order:
        return Order(len(self.fields))

    def check(self, schema: FieldSchema) -> None:
        if self.fields[-1] >= schema.field_count:
            raise SchemaError(f"Interaction {self} exceeds field count {schema.field_count}")

    def __str__(self) -> str:
        return ",".join(str(i) for i in self.fields)

    @classmethod
    def parse(cls, text: str) -> "InteractionId":
        try:
            return cls(tuple(int(p) for p in text.strip().split(",")))
        except ValueError as exc:
            raise SchemaError(f"Malformed interaction id {text!r}: {exc}") from exc


@lru_cache(maxsize=None)
def _enumerate(m: int, order: Order) -> Tuple[InteractionId, ...]:
    return tuple(InteractionId(c) for c in itertools.combinations(range(m), order.value))


def enumerate_interactions(schema: Union[FieldSchema, int], order: Order) -> List[InteractionId]:
    """All interactions of *order* in canonical lexicographic order."""
    m = schema.field_count if isinstance(schema, FieldSchema) else int(schema)
    if not isinstance(order, Order):
        raise SchemaError(f"Unknown interaction order {order!r}")
    if m < 2:
        raise SchemaError(f"Need at least 2 fields, got {m}")
    return list(_enumerate(m, order))


def field_index_matrix(ids: Sequence[InteractionId], order: Order = Order.PAIR) -> np.ndarray:
    """``(C, order)`` int matrix of field indices."""
    if not ids:
        return np.zeros((0, order.value), dtype=np.int64)
    return np.array([i.fields for i in ids], dtype=np.int64)

"""
Raw-log ingestion.

Turns tabular click logs into encoded `MiniBatch` splits:

1. **Read** rows from a ``.tsv``/``.txt`` log (``label<TAB>field:token(,token)*``)
   or an ``.xlsx`` workbook (header row = ``label`` + field names).
2. **Bucket** numeric fields into equal-frequency buckets fitted on train.
3. **Prune** categorical vocabularies: tokens seen fewer than ``min_count``
   times share the field's dummy ("other") index.
4. **Down-sample** negatives to push the positive ratio toward a target.

Formats
-------
Data line     ``1<TAB>site:a1b2<TAB>tags:x,y``  (TAB and ``:`` are reserved)
Vocab file    ``field<TAB>token<TAB>index`` sorted by field then index; the
              dummy entry has an empty token.
Buckets file  ``field<TAB>b0,b1,...``
"""

from __future__ import annotations

import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import openpyxl

from .data_model import FieldSchema, Instance, MiniBatch, Reduce
from .errors import IngestError

logger = logging.getLogger(__name__)

DEFAULT_MIN_COUNT = 20


class FieldKind(Enum):
    CATEGORICAL = "categorical"
    NUMERIC = "numeric"


@dataclass(frozen=True)
class FieldHint:
    name: str
    kind: FieldKind = FieldKind.CATEGORICAL
    multi_hot: bool = False


@dataclass
class RawRow:
    label: int
    tokens: Dict[str, List[str]] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Readers
# ---------------------------------------------------------------------------

def _clean(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value).strip()


def parse_label(text: str) -> int:
    try:
        value = float(text)
    except ValueError:
        raise IngestError(f"Label {text!r} is not a number")
    if value not in (0.0, 1.0):
        raise IngestError(f"Label must be 0 or 1, got {text!r} (fractional labels are rejected)")
    return int(value)


def parse_line(line: str) -> RawRow:
    parts = line.rstrip("\r\n").split("\t")
    row = RawRow(label=parse_label(parts[0]))
    for cell in parts[1:]:
        if not cell:
            continue
        name, sep, payload = cell.partition(":")
        if not sep or not name:
            raise IngestError(f"Malformed field cell {cell!r}; expected 'field:token'")
        row.tokens[name] = [t for t in payload.split(",") if t]
    return row


def format_line(label: int, tokens: Dict[str, Sequence[str]]) -> str:
    cells = [str(label)] + [f"{name}:{','.join(toks)}" for name, toks in tokens.items()]
    return "\t".join(cells)


def read_text_log(path: str) -> List[RawRow]:
    rows: List[RawRow] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(parse_line(line))
            except IngestError as exc:
                raise IngestError(f"{os.path.basename(path)}:{lineno}: {exc}") from exc
    return rows


def read_excel_log(path: str) -> List[RawRow]:
    wb = openpyxl.load_workbook(path, read_only=True, data_only=True)
    ws = wb[wb.sheetnames[0]]
    rows_raw = list(ws.iter_rows(values_only=True))
    wb.close()
    if not rows_raw:
        return []

    headers = [_clean(c) for c in rows_raw[0]]
    if "label" not in headers:
        raise IngestError(f"{os.path.basename(path)}: header row has no 'label' column")
    label_col = headers.index("label")

    rows: List[RawRow] = []
    for r, values in enumerate(rows_raw[1:], start=2):
        cells = [_clean(c) for c in values]
        if all(c == "" for c in cells):
            continue
        try:
            row = RawRow(label=parse_label(cells[label_col]))
        except IngestError as exc:
            raise IngestError(f"{os.path.basename(path)} row {r}: {exc}") from exc
        for c, name in enumerate(headers):
            if c == label_col or not name or c >= len(cells) or not cells[c]:
                continue
            row.tokens[name] = [t.strip() for t in cells[c].split(",") if t.strip()]
        rows.append(row)
    return rows


SUPPORTED_EXTENSIONS = {
    ".tsv": read_text_log,
    ".txt": read_text_log,
    ".xlsx": read_excel_log,
}


def read_raw(path: str) -> List[RawRow]:
    ext = os.path.splitext(path)[1].lower()
    reader = SUPPORTED_EXTENSIONS.get(ext)
    if reader is None:
        raise IngestError(
            f"Unsupported file type '{ext}'. "
            f"Supported: {', '.join(SUPPORTED_EXTENSIONS)}"
        )
    return reader(path)


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------

@dataclass
class VocabMap:
    """Per-field token -> dense index maps; the dummy index follows the last token."""

    tokens: Dict[str, Dict[str, int]]
    min_count: int = DEFAULT_MIN_COUNT
    _inverse: Dict[str, List[str]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self._inverse = {}
        for name, mapping in self.tokens.items():
            inverse = [""] * len(mapping)
            for tok, idx in mapping.items():
                if not 0 <= idx < len(mapping) or inverse[idx]:
                    raise IngestError(f"Vocabulary of field {name!r} is not a dense 0..{len(mapping) - 1} index")
                inverse[idx] = tok
            self._inverse[name] = inverse

    def dummy(self, name: str) -> int:
        return len(self.tokens[name])

    def cardinality(self, name: str) -> int:
        return len(self.tokens[name]) + 1

    def encode(self, name: str, token: str) -> int:
        return self.tokens[name].get(token, self.dummy(name))

    def decode(self, name: str, index: int) -> Optional[str]:
        """Token at *index*, or None for the dummy index."""
        inverse = self._inverse[name]
        return inverse[index] if 0 <= index < len(inverse) else None

    def to_text(self) -> str:
        """One block per field with tokens in byte order, then the dummy index under an empty token."""
        lines = []
        for name, mapping in self.tokens.items():
            for tok, idx in sorted(mapping.items(), key=lambda kv: kv[0].encode("utf-8")):
                lines.append(f"{name}\t{tok}\t{idx}")
            lines.append(f"{name}\t\t{self.dummy(name)}")
        return f"#min_count\t{self.min_count}\n" + "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "VocabMap":
        min_count = DEFAULT_MIN_COUNT
        tokens: Dict[str, Dict[str, int]] = {}
        for raw in text.splitlines():
            if not raw:
                continue
            if raw.startswith("#min_count\t"):
                min_count = int(raw.split("\t")[1])
                continue
            name, tok, idx = raw.split("\t")
            mapping = tokens.setdefault(name, {})
            if tok:
                mapping[tok] = int(idx)
        return cls(tokens, min_count)


def build_vocab(
    rows: Sequence[RawRow],
    hints: Sequence[FieldHint],
    min_count: int = DEFAULT_MIN_COUNT,
) -> VocabMap:
    """Dense indices by descending frequency, ties broken by token byte order."""
    if min_count < 1:
        raise IngestError(f"min_count must be >= 1, got {min_count}")
    if not rows:
        raise IngestError("Cannot build a vocabulary from zero rows")

    tokens: Dict[str, Dict[str, int]] = {}
    for hint in hints:
        if hint.kind is not FieldKind.CATEGORICAL:
            continue
        counts = Counter(t for row in rows for t in row.tokens.get(hint.name, ()))
        kept = [(tok, n) for tok, n in counts.items() if n >= min_count]
        kept.sort(key=lambda kv: (-kv[1], kv[0].encode("utf-8")))
        tokens[hint.name] = {tok: i for i, (tok, _) in enumerate(kept)}
        logger.debug(
            "field %s: %d distinct tokens, %d kept at min_count=%d",
            hint.name, len(counts), len(kept), min_count,
        )
    return VocabMap(tokens, min_count)


# ---------------------------------------------------------------------------
# Numeric bucketing
# ---------------------------------------------------------------------------

def fit_buckets(values: Sequence[float], bucket_count: int) -> np.ndarray:
    """Equal-frequency boundaries; duplicates collapse so buckets never come out empty."""
    if bucket_count < 2:
        raise IngestError(f"bucket_count must be >= 2, got {bucket_count}")
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise IngestError("Cannot bucket an empty column")
    qs = np.arange(1, bucket_count) / bucket_count
    ordered = np.sort(arr)
    # snap each quantile down to the nearest observed value; assignments are unchanged
    cuts = np.quantile(ordered, qs)
    boundaries = np.unique(ordered[np.searchsorted(ordered, cuts, side="right") - 1])
    boundaries = boundaries[boundaries < ordered[-1]]
    if boundaries.size == 0:
        logger.warning("Constant numeric column (value %r); using a single bucket", float(arr[0]))
    return boundaries


def apply_buckets(values: Sequence[float], boundaries: np.ndarray) -> np.ndarray:
    # side="left": a value equal to a boundary falls in the lower bucket
    return np.searchsorted(boundaries, np.asarray(values, dtype=np.float64), side="left")


def bucketize_numeric(values: Sequence[float], bucket_count: int) -> Tuple[np.ndarray, np.ndarray]:
    boundaries = fit_buckets(values, bucket_count)
    return apply_buckets(values, boundaries), boundaries


def boundaries_to_text(boundaries: Dict[str, np.ndarray]) -> str:
    return "".join(
        f"{name}\t{','.join(repr(float(b)) for b in bs)}\n" for name, bs in boundaries.items()
    )


def boundaries_from_text(text: str) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    for raw in text.splitlines():
        if not raw:
            continue
        name, _, payload = raw.partition("\t")
        out[name] = np.array([float(v) for v in payload.split(",") if v], dtype=np.float64)
    return out


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

def schema_for(
    hints: Sequence[FieldHint],
    vocab: VocabMap,
    boundaries: Dict[str, np.ndarray],
    reduce: Reduce = Reduce.SUM,
) -> FieldSchema:
    cards = []
    for h in hints:
        if h.kind is FieldKind.NUMERIC:
            cards.append(len(boundaries[h.name]) + 1)
        else:
            cards.append(vocab.cardinality(h.name))
    return FieldSchema(
        cardinalities=tuple(cards),
        multi_hot_flags=tuple(h.multi_hot for h in hints),
        multi_hot_reduce=reduce,
        names=tuple(h.name for h in hints),
    )


def _numeric_value(row: RawRow, name: str) -> float:
    toks = row.tokens.get(name)
    if not toks:
        raise IngestError(f"Row is missing numeric field '{name}'")
    try:
        return float(toks[0])
    except ValueError:
        raise IngestError(f"Field '{name}' value {toks[0]!r} is not numeric")


def encode_rows(
    rows: Sequence[RawRow],
    hints: Sequence[FieldHint],
    vocab: VocabMap,
    boundaries: Dict[str, np.ndarray],
    schema: FieldSchema,
) -> MiniBatch:
    instances = []
    for row in rows:
        per_field = []
        for h in hints:
            if h.kind is FieldKind.NUMERIC:
                value = _numeric_value(row, h.name)
                per_field.append((int(apply_buckets([value], boundaries[h.name])[0]),))
                continue
            toks = row.tokens.get(h.name) or [""]
            if not h.multi_hot:
                toks = toks[:1]
            per_field.append(tuple(vocab.encode(h.name, t) for t in toks))
        instances.append(Instance(tuple(per_field), row.label))
    return MiniBatch.from_instances(schema, instances)


def decode_instance(
    instance: Instance,
    hints: Sequence[FieldHint],
    vocab: VocabMap,
) -> Dict[str, List[Optional[str]]]:
    """Map indices back to tokens; pruned tokens decode to ``None``."""
    out: Dict[str, List[Optional[str]]] = {}
    for h, idx in zip(hints, instance.indices):
        if h.kind is FieldKind.NUMERIC:
            out[h.name] = [str(j) for j in idx]
        else:
            out[h.name] = [vocab.decode(h.name, j) for j in idx]
    return out


# ---------------------------------------------------------------------------
# Down-sampling
# ---------------------------------------------------------------------------

def negative_downsample(
    data: Union[MiniBatch, Sequence[Instance]],
    target_pos_ratio: float,
    seed: Union[int, np.random.Generator],
) -> Union[MiniBatch, List[Instance]]:
    """Keep every positive; keep each negative with probability ``q``.

    ``q = (P / N) * (1 - r) / r`` makes the expected positive ratio equal ``r``.
    """
    if not 0.0 < target_pos_ratio < 1.0:
        raise IngestError(f"target_pos_ratio must be in (0, 1), got {target_pos_ratio}")
    labels = data.labels if isinstance(data, MiniBatch) else np.array([i.label for i in data])
    pos = int(labels.sum())
    neg = int(labels.size - pos)
    if pos == 0:
        raise IngestError("Down-sampling needs at least one positive")
    if neg == 0:
        return data

    q = (pos / neg) * (1.0 - target_pos_ratio) / target_pos_ratio
    if q >= 1.0:
        if q > 1.0:
            logger.warning(
                "Positive ratio %.4f already exceeds target %.4f; data passed through",
                pos / labels.size, target_pos_ratio,
            )
        return data

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keep = (labels == 1) | (rng.random(labels.size) < q)
    logger.info("Down-sampling negatives with q=%.6f: kept %d of %d rows", q, int(keep.sum()), labels.size)
    if isinstance(data, MiniBatch):
        return data.take(np.flatnonzero(keep))
    return [inst for inst, k in zip(data, keep) if k]


# ---------------------------------------------------------------------------
# End-to-end preparation
# ---------------------------------------------------------------------------

@dataclass
class PreparedData:
    schema: FieldSchema
    train: MiniBatch
    test: MiniBatch
    vocab: VocabMap
    boundaries: Dict[str, np.ndarray]


def prepare_dataset(
    rows: Sequence[RawRow],
    hints: Sequence[FieldHint],
    rng: np.random.Generator,
    min_count: int = DEFAULT_MIN_COUNT,
    bucket_count: int = 10,
    holdout: float = 0.2,
    downsample_ratio: Optional[float] = None,
    reduce: Reduce = Reduce.SUM,
    downsample_rng: Optional[np.random.Generator] = None,
) -> PreparedData:
    """Split, fit vocab/buckets on train only, encode both splits."""
    if not rows:
        raise IngestError("No rows to ingest")
    if not 0.0 < holdout < 1.0:
        raise IngestError(f"holdout must be in (0, 1), got {holdout}")

    order = rng.permutation(len(rows))
    n_test = max(1, int(round(len(rows) * holdout)))
    test_rows = [rows[i] for i in order[:n_test]]
    train_rows = [rows[i] for i in order[n_test:]]

    boundaries = {
        h.name: fit_buckets([_numeric_value(r, h.name) for r in train_rows], bucket_count)
        for h in hints if h.kind is FieldKind.NUMERIC
    }
    vocab = build_vocab(train_rows, hints, min_count)
    schema = schema_for(hints, vocab, boundaries, reduce)

    train = encode_rows(train_rows, hints, vocab, boundaries, schema)
    test = encode_rows(test_rows, hints, vocab, boundaries, schema)
    if downsample_ratio:
        train = negative_downsample(train, downsample_ratio, downsample_rng or rng)
    logger.info(
        "Prepared %d train / %d test rows over %d fields (train CTR %.4f)",
        train.size, test.size, schema.field_count, train.positive_ratio(),
    )
    return PreparedData(schema, train, test, vocab, boundaries)


# ---------------------------------------------------------------------------
# Encoded splits on disk
# ---------------------------------------------------------------------------

def write_encoded(path: str, data: MiniBatch) -> None:
    names = data.schema.names
    with open(path, "w", encoding="utf-8") as fh:
        for inst in data.instances():
            toks = {n: [str(j) for j in idx] for n, idx in zip(names, inst.indices)}
            fh.write(format_line(inst.label, toks) + "\n")


def read_encoded(path: str, schema: FieldSchema) -> MiniBatch:
    instances = []
    for row in read_text_log(path):
        try:
            per_field = tuple(tuple(int(t) for t in row.tokens[n]) for n in schema.names)
        except KeyError as exc:
            raise IngestError(f"{os.path.basename(path)}: row lacks field {exc}") from exc
        instances.append(Instance(per_field, row.label))
    return MiniBatch.from_instances(schema, instances)


def hints_from_names(
    names: Iterable[str],
    numeric: Iterable[str] = (),
    multi_hot: Iterable[str] = (),
) -> List[FieldHint]:
    numeric, multi_hot = set(numeric), set(multi_hot)
    return [
        FieldHint(
            name=n,
            kind=FieldKind.NUMERIC if n in numeric else FieldKind.CATEGORICAL,
            multi_hot=n in multi_hot,
        )
        for n in names
    ]


def field_names(rows: Sequence[RawRow]) -> List[str]:
    """Field names in first-seen order across *rows*."""
    seen: Dict[str, None] = {}
    for row in rows:
        for name in row.tokens:
            seen.setdefault(name, None)
    return list(seen)

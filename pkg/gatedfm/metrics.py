"""
Evaluation and analysis metrics.

* `auc` / `logloss`: the usual CTR metrics.
* `statistics_auc`: how well a single interaction predicts clicks on its
  own: each test row is scored by the smoothed train CTR of its value pair.
* `pearson` / `stability`: agreement of α vectors across seeds.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .data_model import FieldSchema, InteractionId, MiniBatch, Order, enumerate_interactions
from .errors import SchemaError
from .report import Histogram

LOGLOSS_CLIP = 1e-7


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape:
            raise ValueError(
                f"scores and labels disagree in length: {self.scores.shape} vs {self.labels.shape}"
            )


def auc(scored: ScoredSet) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    labels = scored.labels
    pos = int((labels == 1).sum())
    neg = int(labels.size - pos)
    if pos == 0 or neg == 0:
        raise ValueError(f"AUC needs both classes, got {pos} positives and {neg} negatives")
    ranks = rankdata(scored.scores)  # midranks
    u = ranks[labels == 1].sum() - pos * (pos + 1) / 2.0
    return float(u / (pos * neg))


def logloss(scored: ScoredSet) -> float:
    p = np.clip(scored.scores, LOGLOSS_CLIP, 1.0 - LOGLOSS_CLIP)
    y = scored.labels
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def pearson(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise ValueError(f"pearson needs two equal-length vectors of length >= 2, got {a.shape} and {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt((da * da).sum()), np.sqrt((db * db).sum())
    if sa == 0 or sb == 0:
        raise ValueError("pearson is undefined for a zero-variance vector")
    return float((da * db).sum() / (sa * sb))


def stability(alpha_runs: Sequence[Sequence[float]]) -> Tuple[np.ndarray, float]:
    """Pairwise Pearson matrix over runs and the mean of its off-diagonal."""
    k = len(alpha_runs)
    if k < 2:
        raise ValueError("stability needs at least two runs")
    mat = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            mat[i, j] = mat[j, i] = pearson(alpha_runs[i], alpha_runs[j])
    off = mat[~np.eye(k, dtype=bool)]
    return mat, float(off.mean())


def alpha_histogram(alpha: Sequence[float], bins: int = 20) -> Histogram:
    counts, edges = np.histogram(np.asarray(alpha, dtype=np.float64), bins=bins)
    return Histogram(edges=edges.tolist(), counts=counts.tolist())


# ---------------------------------------------------------------------------
# statistics_AUC
# ---------------------------------------------------------------------------

def _pair_keys(data: MiniBatch, iid: InteractionId) -> np.ndarray:
    if iid.order is not Order.PAIR:
        raise SchemaError(f"statistics_auc is defined for pairs, got {iid}")
    iid.check(data.schema)
    i, j = iid.fields
    flags = data.schema.multi_hot_flags
    if flags[i] or flags[j]:
        raise SchemaError(f"statistics_auc excludes multi-hot fields, got {iid}")
    xi = data.blocks[i].indices[:, 0]
    xj = data.blocks[j].indices[:, 0]
    return xi * data.schema.cardinalities[j] + xj


def statistics_auc(train: MiniBatch, test: MiniBatch, iid: InteractionId) -> float:
    """AUC on *test* of the Laplace-smoothed train CTR of the (value_i, value_j) pair.

    Pairs never seen in training score the global train CTR.
    """
    n_keys = train.schema.cardinalities[iid.fields[0]] * train.schema.cardinalities[iid.fields[-1]]
    keys = _pair_keys(train, iid)
    clicks = np.bincount(keys, weights=train.labels.astype(np.float64), minlength=n_keys)
    imps = np.bincount(keys, minlength=n_keys)
    ctr = np.where(imps > 0, (clicks + 1.0) / (imps + 2.0), train.positive_ratio())
    scores = ctr[_pair_keys(test, iid)]
    return auc(ScoredSet(scores, test.labels))


def scorable_pairs(schema: FieldSchema) -> List[InteractionId]:
    """Pairs whose two fields are both one-hot."""
    flags = schema.multi_hot_flags
    return [iid for iid in enumerate_interactions(schema, Order.PAIR) if not any(flags[f] for f in iid.fields)]


def statistics_auc_table(
    train: MiniBatch,
    test: MiniBatch,
    ids: Sequence[InteractionId],
) -> Dict[InteractionId, float]:
    return {iid: statistics_auc(train, test, iid) for iid in ids}


def top_n_by_statistics_auc(table: Dict[InteractionId, float], n: int) -> List[InteractionId]:
    """The *n* ids with the highest statistics_AUC; ties keep canonical order."""
    ranked = sorted(sorted(table), key=lambda iid: -table[iid])
    return ranked[:n]

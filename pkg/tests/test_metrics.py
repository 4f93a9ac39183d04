import numpy as np
import pytest

from gatedfm.data_model import FieldSchema, InteractionId, MiniBatch
from gatedfm.errors import SchemaError
from gatedfm.metrics import (
    ScoredSet,
    alpha_histogram,
    auc,
    logloss,
    pearson,
    scorable_pairs,
    stability,
    statistics_auc,
    statistics_auc_table,
    top_n_by_statistics_auc,
)


def _pair_count_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_auc_matches_pair_counting_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 300))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        scores = rng.integers(0, 5, size=n) / 4.0
        assert auc(ScoredSet(scores, labels)) == pytest.approx(_pair_count_auc(scores, labels), abs=1e-12)


def test_auc_needs_both_classes():
    with pytest.raises(ValueError, match="both classes"):
        auc(ScoredSet(np.array([0.1, 0.9]), np.array([1, 1])))


def test_scored_set_shapes_must_agree():
    with pytest.raises(ValueError):
        ScoredSet(np.zeros(3), np.zeros(2))


def test_auc_is_invariant_under_monotone_transforms():
    rng = np.random.default_rng(1)
    scores = rng.integers(1, 20, size=200) / 20.0
    labels = rng.integers(0, 2, size=200)
    base = auc(ScoredSet(scores, labels))
    for transform in (lambda s: 3 * s + 1, np.exp, lambda s: np.log(s / (1 - s))):
        assert auc(ScoredSet(transform(scores), labels)) == pytest.approx(base, abs=1e-12)


def test_auc_of_flipped_labels_is_the_complement():
    rng = np.random.default_rng(2)
    scores = rng.integers(0, 8, size=150) / 8.0
    labels = rng.integers(0, 2, size=150)
    total = auc(ScoredSet(scores, labels)) + auc(ScoredSet(scores, 1 - labels))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_constant_logloss_is_minimised_at_the_base_rate():
    labels = np.array([1] * 30 + [0] * 70)
    grid = np.round(np.arange(0.05, 0.96, 0.01), 2)
    values = [logloss(ScoredSet(np.full(100, p), labels)) for p in grid]
    assert grid[int(np.argmin(values))] == pytest.approx(0.30)


def test_logloss_clips_extreme_predictions():
    value = logloss(ScoredSet(np.array([0.0, 1.0]), np.array([1, 0])))
    assert np.isfinite(value)
    assert value == pytest.approx(-np.log(1e-7), rel=1e-6)


def test_pearson_and_stability():
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    with pytest.raises(ValueError, match="zero-variance"):
        pearson([1, 1, 1], [1, 2, 3])
    mat, mean = stability([[1, 2, 3], [2, 4, 7], [3, 2, 1]])
    assert mat.shape == (3, 3)
    np.testing.assert_allclose(np.diag(mat), 1.0)
    np.testing.assert_allclose(mat, mat.T)
    assert mean == pytest.approx(mat[~np.eye(3, dtype=bool)].mean())


def test_alpha_histogram_counts_everything():
    hist = alpha_histogram(np.linspace(-1, 1, 41), bins=8)
    assert sum(hist.counts) == 41
    assert len(hist.edges) == 9
    assert len(hist.centers()) == 8


# ---------------------------------------------------------------------------
# statistics_AUC
# ---------------------------------------------------------------------------

@pytest.fixture
def xor_data():
    """Label is x0 XOR x1; field 2 is noise."""
    rng = np.random.default_rng(3)
    schema = FieldSchema.one_hot([2, 2, 3])

    def draw(n):
        x = np.column_stack([rng.integers(0, 2, n), rng.integers(0, 2, n), rng.integers(0, 3, n)])
        return MiniBatch.from_arrays(schema, x, x[:, 0] ^ x[:, 1])

    return draw(400), draw(200)


def test_statistics_auc_finds_the_predictive_pair(xor_data):
    train, test = xor_data
    table = statistics_auc_table(train, test, scorable_pairs(train.schema))
    assert table[InteractionId((0, 1))] == 1.0
    assert table[InteractionId((0, 2))] < 0.7
    assert top_n_by_statistics_auc(table, 1) == [InteractionId((0, 1))]


def test_unseen_pairs_score_the_global_rate():
    schema = FieldSchema.one_hot([3, 2])
    train = MiniBatch.from_arrays(schema, np.array([[0, 0], [0, 1], [1, 0], [1, 1]]), np.array([1, 0, 0, 0]))
    test = MiniBatch.from_arrays(schema, np.array([[0, 0], [2, 0], [1, 1]]), np.array([1, 1, 0]))
    # (0,0) -> 2/3, unseen (2,0) -> 0.25, (1,1) -> 1/3
    assert statistics_auc(train, test, InteractionId((0, 1))) == 0.5


def test_top_n_ties_keep_canonical_order():
    table = {InteractionId((1, 2)): 0.6, InteractionId((0, 2)): 0.6, InteractionId((0, 1)): 0.5}
    assert top_n_by_statistics_auc(table, 2) == [InteractionId((0, 2)), InteractionId((1, 2))]


def test_statistics_auc_excludes_multi_hot(multi_hot_schema, multi_hot_batch):
    with pytest.raises(SchemaError, match="multi-hot"):
        statistics_auc(multi_hot_batch, multi_hot_batch, InteractionId((0, 1)))
    assert scorable_pairs(multi_hot_schema) == [InteractionId((0, 2))]


def test_statistics_auc_is_for_pairs_only(xor_data):
    train, test = xor_data
    with pytest.raises(SchemaError):
        statistics_auc(train, test, InteractionId((0, 1, 2)))

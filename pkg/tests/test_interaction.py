import itertools

import numpy as np
import pytest

from gatedfm.data_model import Order, enumerate_interactions, field_index_matrix
from gatedfm.errors import ModeError, SchemaError
from gatedfm.interaction import (
    ArchitectureParams,
    BNMode,
    BNState,
    GateSet,
    InteractionMode,
    LayerSettings,
    bn_backward,
    bn_forward,
    extract_gates,
    interaction_layer_backward,
    interaction_layer_forward,
    pairwise_products,
    products_backward,
    triple_products,
)


@pytest.fixture
def E():
    return np.random.default_rng(0).normal(size=(6, 4, 3))


# ---------------------------------------------------------------------------
# Products
# ---------------------------------------------------------------------------

def test_pairwise_products_match_loops(E):
    P = pairwise_products(E)
    for c, (i, j) in enumerate(itertools.combinations(range(4), 2)):
        np.testing.assert_allclose(P[:, c], (E[:, i] * E[:, j]).sum(axis=1))


def test_triple_products_match_loops(E):
    T = triple_products(E)
    assert T.shape == (6, 4)
    for c, (i, j, t) in enumerate(itertools.combinations(range(4), 3)):
        np.testing.assert_allclose(T[:, c], (E[:, i] * E[:, j] * E[:, t]).sum(axis=1))


def test_products_backward_for_all_pairs(E):
    idx = field_index_matrix(enumerate_interactions(4, Order.PAIR))
    dE = products_backward(E, idx, np.ones((6, idx.shape[0])))
    total = E.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(dE, total - E)


# ---------------------------------------------------------------------------
# Batch normalisation
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("b", [2, 16, 2000])
def test_bn_train_output_is_standardised(b):
    x = np.random.default_rng(b).normal(3.0, 2.0, size=(b, 5))
    state = BNState.fresh(5)
    y, _ = bn_forward(x, BNMode.TRAIN, state)
    var = x.var(axis=0)
    assert np.abs(y.mean(axis=0)).max() < 1e-6
    np.testing.assert_allclose(y.var(axis=0), var / (var + state.eps), atol=1e-4)


def test_bn_running_statistics_follow_momentum():
    x = np.array([[1.0, 2.0], [3.0, 6.0]])
    state = BNState.fresh(2, momentum=0.9)
    bn_forward(x, BNMode.TRAIN, state)
    np.testing.assert_allclose(state.running_mean, 0.1 * np.array([2.0, 4.0]))
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * np.array([1.0, 4.0]))

    frozen = BNState.fresh(2)
    bn_forward(x, BNMode.TRAIN, frozen, update_stats=False)
    assert frozen.running_mean.tolist() == [0.0, 0.0]


def test_bn_eval_uses_running_statistics():
    state = BNState(np.array([1.0]), np.array([4.0]), eps=1e-5)
    y, _ = bn_forward(np.array([[5.0]]), BNMode.EVAL, state)
    assert y[0, 0] == pytest.approx(4.0 / np.sqrt(4.0 + 1e-5))


def test_bn_train_needs_two_rows():
    with pytest.raises(SchemaError, match=">= 2 rows"):
        bn_forward(np.ones((1, 3)), BNMode.TRAIN, BNState.fresh(3))


def test_bn_rejects_bad_momentum():
    with pytest.raises(ModeError):
        BNState.fresh(2, momentum=1.0)


def test_bn_backward_matches_finite_differences():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(7, 3))
    w = rng.normal(size=(7, 3))

    def f(x_):
        y, _ = bn_forward(x_, BNMode.TRAIN, BNState.fresh(3), update_stats=False)
        return (w * y).sum()

    _, cache = bn_forward(x, BNMode.TRAIN, BNState.fresh(3), update_stats=False)
    analytic = bn_backward(w, cache)
    h = 1e-5
    for r, c in [(0, 0), (3, 1), (6, 2), (2, 2)]:
        up, down = x.copy(), x.copy()
        up[r, c] += h
        down[r, c] -= h
        numeric = (f(up) - f(down)) / (2 * h)
        assert abs(numeric - analytic[r, c]) <= 1e-4 * max(abs(numeric), abs(analytic[r, c])) + 1e-8


def test_bn_backward_on_two_rows_sums_to_zero():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 5))
    _, cache = bn_forward(x, BNMode.TRAIN, BNState.fresh(5), update_stats=False)
    dx = bn_backward(rng.normal(size=(2, 5)), cache)
    assert np.isfinite(dx).all()
    np.testing.assert_allclose(dx.sum(axis=0), 0.0, atol=1e-10)


# ---------------------------------------------------------------------------
# Gates and α
# ---------------------------------------------------------------------------

def test_extract_gates_opens_exact_nonzeros():
    alpha = ArchitectureParams(3, {Order.PAIR: np.array([0.0, -1e-12, 0.4])})
    gates = extract_gates(alpha)
    assert gates.gates[Order.PAIR].tolist() == [False, True, True]
    assert gates.open_count(Order.PAIR) == 2
    assert gates.kept_fraction(Order.PAIR) == pytest.approx(2 / 3)
    assert [str(i) for i in gates.open_ids(Order.PAIR)] == ["0,2", "1,2"]


def test_alpha_length_is_checked():
    with pytest.raises(SchemaError, match="needs 6 entries"):
        ArchitectureParams(4, {Order.PAIR: np.ones(5)})
    with pytest.raises(SchemaError, match="non-finite"):
        ArchitectureParams(2, {Order.PAIR: np.array([np.nan])})


# ---------------------------------------------------------------------------
# Layer
# ---------------------------------------------------------------------------

def test_plain_layer_is_linear_plus_all_products(E):
    linear = np.arange(6, dtype=np.float64)
    out, _ = interaction_layer_forward(E, linear, LayerSettings(InteractionMode.PLAIN))
    np.testing.assert_allclose(out.total, linear + pairwise_products(E).sum(axis=1))


def test_plain_layer_rejects_alpha(E):
    alpha = {Order.PAIR: np.ones(6)}
    with pytest.raises(ModeError):
        interaction_layer_forward(E, np.zeros(6), LayerSettings(InteractionMode.PLAIN), alpha=alpha)


def test_retrain_needs_gates(E):
    settings = LayerSettings(InteractionMode.RETRAIN, bn=False, use_alpha=False)
    with pytest.raises(ModeError, match="gates"):
        interaction_layer_forward(E, np.zeros(6), settings)


def test_search_layer_weights_normalised_products(E):
    alpha = {Order.PAIR: np.linspace(-1, 1, 6)}
    bn = {Order.PAIR: BNState.fresh(6)}
    settings = LayerSettings(InteractionMode.SEARCH)
    out, _ = interaction_layer_forward(E, np.zeros(6), settings, alpha=alpha, bn_states=bn, train=True)
    z = pairwise_products(E)
    zhat = (z - z.mean(axis=0)) / np.sqrt(z.var(axis=0) + 1e-5)
    np.testing.assert_allclose(out.terms[Order.PAIR], zhat * alpha[Order.PAIR], atol=1e-12)


def test_search_layer_is_linear_in_alpha(E):
    rng = np.random.default_rng(7)
    settings = LayerSettings(InteractionMode.SEARCH)
    linear = rng.normal(size=6)

    def total(a):
        out, _ = interaction_layer_forward(
            E, linear, settings, alpha={Order.PAIR: a}, bn_states={Order.PAIR: BNState.fresh(6)}, train=True,
        )
        return out.total

    a1, a2 = rng.normal(size=6), rng.normal(size=6)
    base = total(np.zeros(6))
    np.testing.assert_allclose(base, linear, atol=1e-12)
    np.testing.assert_allclose(
        total(2.0 * a1 - 3.0 * a2) - base,
        2.0 * (total(a1) - base) - 3.0 * (total(a2) - base),
        atol=1e-10,
    )


def test_closed_gates_are_skipped_and_get_zero_alpha_gradient(E):
    open_ = np.array([True, False, True, False, False, True])
    gates = GateSet(4, {Order.PAIR: open_})
    alpha = {Order.PAIR: np.full(6, 0.5)}
    bn = {Order.PAIR: BNState.fresh(6)}
    settings = LayerSettings(InteractionMode.RETRAIN)
    out, cache = interaction_layer_forward(
        E, np.zeros(6), settings, alpha=alpha, gates=gates, bn_states=bn, train=True, update_stats=True,
    )
    assert out.terms[Order.PAIR].shape == (6, 3)
    # running stats of closed columns never move
    assert bn[Order.PAIR].running_mean[~open_].tolist() == [0.0, 0.0, 0.0]
    assert (bn[Order.PAIR].running_mean[open_] != 0).all()

    grads = interaction_layer_backward(cache, np.ones(6), {Order.PAIR: np.ones((6, 3))})
    assert (grads.alpha[Order.PAIR][~open_] == 0.0).all()


def test_triples_join_pairs_in_plain3(E):
    settings = LayerSettings(InteractionMode.PLAIN3, orders=(Order.PAIR, Order.TRIPLE))
    out, _ = interaction_layer_forward(E, np.zeros(6), settings)
    expected = pairwise_products(E).sum(axis=1) + triple_products(E).sum(axis=1)
    np.testing.assert_allclose(out.total, expected)
    assert out.term_matrix().shape == (6, 6 + 4)

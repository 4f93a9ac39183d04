import numpy as np
import pytest

from gatedfm.embedding import SparseRows
from gatedfm.errors import ConfigError, ModeError, NonFiniteGradientError
from gatedfm.interaction import InteractionMode
from gatedfm.network import Head, ModelConfig, build_model
from gatedfm.optim import (
    MAX_BUDGET_GRDA_LR,
    AdamState,
    GrdaState,
    adam_step,
    budget_grda_lr,
    grda_step,
    grda_threshold,
    joint_step,
    train_step,
)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_first_adam_step_moves_by_learning_rate():
    params = {"w": np.array([1.0, -2.0, 0.5])}
    state = AdamState(lr=0.1)
    adam_step(params, {"w": np.array([3.0, -0.2, 0.0])}, state)
    # bias-corrected first step is lr * g / (|g| + eps)
    np.testing.assert_allclose(params["w"], [0.9, -1.9, 0.5], atol=1e-7)
    assert state.step == 1


def test_sparse_rows_update_lazily():
    table = np.ones((4, 2))
    params = {"emb.0": table}
    state = AdamState(lr=0.1)
    grad = SparseRows(np.array([1, 3]), np.array([[0.5, -0.5], [0.0, 0.0]]))
    adam_step(params, {"emb.0": grad}, state)
    assert table[0].tolist() == [1.0, 1.0]
    assert table[2].tolist() == [1.0, 1.0]
    # an all-zero row counts as untouched
    assert table[3].tolist() == [1.0, 1.0]
    assert (state.m["emb.0"][3] == 0).all()
    np.testing.assert_allclose(table[1], [0.9, 1.1], atol=1e-7)


def test_non_finite_gradient_leaves_state_untouched():
    params = {"a": np.zeros(2), "b": np.zeros(2)}
    state = AdamState()
    with pytest.raises(NonFiniteGradientError) as info:
        adam_step(params, {"a": np.ones(2), "b": np.array([np.inf, 0.0])}, state)
    assert info.value.tensor == "b"
    assert params["a"].tolist() == [0.0, 0.0]
    assert state.step == 0 and not state.m


def test_adam_rejects_bad_settings():
    with pytest.raises(ConfigError):
        AdamState(lr=0.0)
    with pytest.raises(ConfigError):
        AdamState(beta1=1.0)


def test_adam_converges_on_a_quadratic_bowl():
    curvature = np.array([1.0, 10.0, 100.0])
    target = np.array([1.5, -0.5, 0.25])
    params = {"w": np.zeros(3)}
    state = AdamState(lr=0.01)
    for _ in range(3000):
        adam_step(params, {"w": curvature * (params["w"] - target)}, state)
    np.testing.assert_allclose(params["w"], target, atol=0.05)


def test_adam_is_invariant_to_gradient_scale():
    grads = np.random.default_rng(4).normal(size=(20, 5))
    small = {"w": np.ones(5)}
    large = {"w": np.ones(5)}
    s_small, s_large = AdamState(lr=0.1), AdamState(lr=0.1)
    for g in grads:
        adam_step(small, {"w": g}, s_small)
        adam_step(large, {"w": 1000.0 * g}, s_large)
    np.testing.assert_allclose(small["w"], large["w"], rtol=1e-6)


# ---------------------------------------------------------------------------
# GRDA
# ---------------------------------------------------------------------------

def test_grda_matches_closed_form_after_constant_gradients():
    a0 = np.array([0.7, -0.3, 0.01])
    g = np.array([0.01, -0.02, 0.0])
    alphas = {"alpha.pair": a0.copy()}
    state = GrdaState.start(alphas, lr=0.5, c=0.01, mu=0.6)
    for _ in range(7):
        grda_step(alphas, {"alpha.pair": g}, state)
    u = a0 - 0.5 * 7 * g
    thr = 0.01 * 0.5 ** 0.5 * (7 * 0.5) ** 0.6
    expected = np.sign(u) * np.maximum(np.abs(u) - thr, 0.0)
    np.testing.assert_allclose(alphas["alpha.pair"], expected, atol=1e-15)
    assert alphas["alpha.pair"][2] == 0.0
    assert state.threshold() == pytest.approx(thr)


def _numeric_argmin(b, g, lo, hi):
    """Minimise ``a·b + g|a| + a²/2`` over [lo, hi] by grid search then bisection.

    The grid brackets the minimum; bisection on the one-sided derivatives
    ``a + b ± g`` then refines it to floating-point resolution.
    """
    def f(a):
        return a * b + g * abs(a) + a * a / 2

    grid = np.linspace(lo, hi, 2001)
    k = int(np.argmin([f(a) for a in grid]))
    left, right = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    for _ in range(200):
        mid = (left + right) / 2
        if mid + b + (g if mid >= 0 else -g) < 0:     # right derivative still falling
            left = mid
        elif mid + b + (g if mid > 0 else -g) > 0:    # left derivative already rising
            right = mid
        else:
            return mid
    return (left + right) / 2


def test_grda_step_is_the_exact_per_coordinate_minimiser():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        a0 = rng.normal(0, 0.7)
        acc = rng.normal(0, 0.5)
        t = int(rng.integers(1, 5000))
        lr = float(10 ** rng.uniform(-3, 1))
        c = 0.0 if trial % 10 == 0 else float(rng.uniform(0, 0.05))
        mu = float(rng.uniform(0.5, 1.0))
        grad = rng.normal(0, 0.1)

        # t - 1 steps already taken; the last gradient arrives through grda_step
        state = GrdaState(
            lr=lr, c=c, mu=mu, step=t - 1,
            accumulator={"alpha.pair": np.array([acc - grad])},
            initial={"alpha.pair": np.array([a0])},
        )
        alphas = {"alpha.pair": np.array([a0])}
        grda_step(alphas, {"alpha.pair": np.array([grad])}, state)
        got = float(alphas["alpha.pair"][0])

        g = c * lr ** 0.5 * (t * lr) ** mu
        b = lr * acc - a0
        bound = abs(b) + g + 1.0
        best = _numeric_argmin(b, g, -bound, bound)
        assert state.step == t
        assert abs(got - best) < 1e-10, trial


def test_grda_without_threshold_is_plain_dual_averaging():
    a0 = np.array([0.7, -0.2, 0.0])
    grads = np.random.default_rng(3).normal(0, 0.05, size=(25, 3))
    alphas = {"alpha.pair": a0.copy()}
    state = GrdaState.start(alphas, lr=0.3, c=0.0, mu=0.6)
    for g in grads:
        grda_step(alphas, {"alpha.pair": g}, state)
    np.testing.assert_allclose(alphas["alpha.pair"], a0 - 0.3 * grads.sum(axis=0), atol=1e-15)


def test_grda_single_zero_gradient_step():
    alphas = {"alpha.pair": np.array([0.7])}
    state = GrdaState.start(alphas, lr=0.01, c=0.005, mu=0.6)
    grda_step(alphas, {"alpha.pair": np.zeros(1)}, state)
    # g(1) = 0.005 · 0.01^½ · 0.01^0.6
    assert state.threshold() == pytest.approx(3.1548e-5, rel=1e-4)
    assert alphas["alpha.pair"][0] == pytest.approx(0.69996845, rel=1e-7)


def test_budgeted_grda_lr_reaches_the_target_threshold():
    lr = budget_grda_lr(1000, 0.7, c=0.005, mu=0.6, reach=2.0, cap=100.0)
    assert grda_threshold(1000, lr, 0.005, 0.6) == pytest.approx(1.4)
    # fewer steps need a larger γ
    assert budget_grda_lr(200, 0.7, cap=100.0) > lr


def test_budgeted_grda_lr_is_capped():
    assert budget_grda_lr(10, 0.7) == MAX_BUDGET_GRDA_LR
    assert budget_grda_lr(10 ** 6, 0.7) < MAX_BUDGET_GRDA_LR
    assert budget_grda_lr(50, 0.0) == MAX_BUDGET_GRDA_LR


def test_budgeted_grda_lr_needs_a_threshold_and_steps():
    with pytest.raises(ConfigError):
        budget_grda_lr(100, 0.7, c=0.0)
    with pytest.raises(ConfigError):
        budget_grda_lr(0, 0.7)


def test_grda_sparsity_is_monotone_in_c():
    rng = np.random.default_rng(1)
    for trial in range(100):
        a0 = rng.normal(0, 0.5, size=20)
        grads = rng.normal(0, 0.01, size=(30, 20))
        zeros_by_c = []
        for c in (0.001, 0.01, 0.05):
            alphas = {"alpha.pair": a0.copy()}
            state = GrdaState.start(alphas, lr=1.0, c=c, mu=0.6)
            for g in grads:
                grda_step(alphas, {"alpha.pair": g}, state)
            zeros_by_c.append(int((alphas["alpha.pair"] == 0).sum()))
        assert zeros_by_c == sorted(zeros_by_c), trial


def test_grda_with_zero_gradient_only_gains_zeros():
    a0 = np.random.default_rng(2).normal(0, 0.2, size=50)
    alphas = {"alpha.pair": a0.copy()}
    state = GrdaState.start(alphas, lr=1.0, c=0.02, mu=0.6)
    zeros = []
    for _ in range(100):
        grda_step(alphas, {"alpha.pair": np.zeros(50)}, state)
        zeros.append(int((alphas["alpha.pair"] == 0).sum()))
    assert zeros == sorted(zeros)
    assert zeros[-1] > zeros[0]


def test_grda_threshold_grows():
    values = [grda_threshold(t, 1.0, 0.005, 0.6) for t in range(1, 50)]
    assert all(a < b for a, b in zip(values, values[1:]))
    assert grda_threshold(0, 1.0, 0.005, 0.6) == 0.0


def test_grda_rejects_negative_c():
    with pytest.raises(ConfigError):
        GrdaState(c=-0.1)


# ---------------------------------------------------------------------------
# Combined steps
# ---------------------------------------------------------------------------

def _model(schema, mode):
    cfg = ModelConfig(head=Head.FM, embedding_dim=3, mode=mode)
    return build_model(schema, cfg, np.random.default_rng(0))


def test_train_step_keeps_alpha_away_from_adam(schema, batch):
    model = _model(schema, InteractionMode.SEARCH)
    grda = GrdaState.start({"alpha.pair": model.params["alpha.pair"]})
    adam = AdamState(lr=0.01)
    value, _ = train_step(model, batch, adam, grda)
    assert np.isfinite(value)
    assert "alpha.pair" not in adam.m
    assert "emb.0" in adam.m
    assert grda.step == 1


def test_frozen_parameters_do_not_move(schema, batch):
    model = _model(schema, InteractionMode.SEARCH)
    model.frozen.add("alpha.pair")
    before = model.params["alpha.pair"].copy()
    train_step(model, batch, AdamState(lr=0.1))
    np.testing.assert_array_equal(model.params["alpha.pair"], before)


def test_joint_step_needs_search_mode(schema, batch):
    model = _model(schema, InteractionMode.PLAIN)
    with pytest.raises(ModeError):
        joint_step(model, batch, AdamState(), GrdaState())

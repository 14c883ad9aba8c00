import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driftens.numerics import (
    NumericError,
    OptimConfig,
    ParamSet,
    ShapeError,
    as_matrix,
    check_finite,
    finite_diff_check,
    make_rng,
    matmul,
    optim_step,
)


def test_as_matrix_promotes_vectors():
    m = as_matrix([1.0, 2.0, 3.0])
    assert m.shape == (1, 3)
    assert m.dtype == np.float64


def test_as_matrix_shape_enforcement():
    as_matrix(np.zeros((2, 3)), rows=2, cols=3)
    with pytest.raises(ShapeError):
        as_matrix(np.zeros((2, 3)), rows=3)
    with pytest.raises(ShapeError):
        as_matrix(np.zeros((2, 3)), cols=2)
    with pytest.raises(ShapeError):
        as_matrix(np.zeros((2, 2, 2)))


def test_matmul_matches_numpy():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 5))
    assert np.allclose(matmul(a, b), a @ b)


def test_matmul_inner_dim_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_check_finite_raises_on_nan_and_inf():
    with pytest.raises(NumericError):
        check_finite(np.array([1.0, np.nan]))
    with pytest.raises(NumericError):
        check_finite(np.array([np.inf]))


def test_make_rng_deterministic_and_path_split():
    a = make_rng(7, 1, 2).normal(size=5)
    b = make_rng(7, 1, 2).normal(size=5)
    c = make_rng(7, 1, 3).normal(size=5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_optim_config_validation():
    with pytest.raises(ValueError):
        OptimConfig(method="rmsprop")
    with pytest.raises(ValueError):
        OptimConfig(learning_rate=-1.0)
    with pytest.raises(ValueError):
        OptimConfig(beta1=1.0)
    OptimConfig(learning_rate=0.0)  # zero step size is allowed


def _single_slot(value):
    return ParamSet({"p": np.array(value, dtype=np.float64)})


def test_sgd_step_exact_formula():
    params = _single_slot([1.0, -2.0, 0.5])
    grads = _single_slot([0.1, 0.2, -0.3])
    cfg = OptimConfig(method="sgd", learning_rate=0.5, weight_decay=0.01)
    expected = np.array([1.0, -2.0, 0.5]) - 0.5 * (
        np.array([0.1, 0.2, -0.3]) + 0.01 * np.array([1.0, -2.0, 0.5]))
    optim_step(params, grads, cfg)
    assert np.allclose(params["p"], expected, atol=0, rtol=0)


def test_zero_learning_rate_leaves_parameters_unchanged():
    for method in ("sgd", "adamw"):
        params = _single_slot([1.0, 2.0])
        grads = _single_slot([3.0, -4.0])
        optim_step(params, grads, OptimConfig(method=method, learning_rate=0.0))
        assert np.array_equal(params["p"], [1.0, 2.0])


def test_adamw_first_step_oracle():
    # with zero moments, the bias-corrected first step is lr * g / (|g| + eps)
    g0 = np.array([0.3, -0.7])
    params = _single_slot([1.0, 1.0])
    grads = _single_slot(g0)
    cfg = OptimConfig(method="adamw", learning_rate=0.01, eps=1e-8)
    optim_step(params, grads, cfg)
    expected = 1.0 - 0.01 * g0 / (np.abs(g0) + 1e-8)
    assert np.allclose(params["p"], expected, atol=1e-12)


def test_adamw_weight_decay_is_decoupled():
    params = _single_slot([2.0])
    grads = _single_slot([0.0])
    cfg = OptimConfig(method="adamw", learning_rate=0.1, weight_decay=0.5)
    optim_step(params, grads, cfg)
    # zero gradient: only the decay term moves the parameter
    assert np.allclose(params["p"], 2.0 - 0.1 * 0.5 * 2.0)


def test_adamw_two_steps_match_reference_implementation():
    rng = np.random.default_rng(3)
    p0 = rng.normal(size=4)
    gs = [rng.normal(size=4) for _ in range(2)]
    cfg = OptimConfig(method="adamw", learning_rate=0.05)

    params = _single_slot(p0)
    for g in gs:
        optim_step(params, _single_slot(g), cfg)

    p = p0.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    for t, g in enumerate(gs, start=1):
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        p = p - cfg.learning_rate * (m / (1 - cfg.beta1 ** t)) / (
            np.sqrt(v / (1 - cfg.beta2 ** t)) + cfg.eps)
    assert np.allclose(params["p"], p, atol=1e-12)


def test_optim_step_requires_matching_gradients():
    params = ParamSet({"a": np.zeros(2), "b": np.zeros(3)})
    grads = ParamSet({"a": np.zeros(2)})
    with pytest.raises(ShapeError):
        optim_step(params, grads, OptimConfig(method="sgd"))
    grads = ParamSet({"a": np.zeros(2), "b": np.zeros(4)})
    with pytest.raises(ShapeError):
        optim_step(params, grads, OptimConfig(method="sgd"))


def test_optim_step_rejects_nonfinite_gradients():
    params = _single_slot([1.0])
    grads = _single_slot([np.nan])
    with pytest.raises(NumericError):
        optim_step(params, grads, OptimConfig(method="sgd"))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=12))
def test_paramset_flatten_unflatten_round_trip(values):
    n = len(values)
    split = max(1, n // 2)
    ps = ParamSet({"a": np.array(values[:split]), "b": np.array(values[split:] or [0.0])})
    flat = ps.flatten()
    ps2 = ps.zeros_like()
    ps2.unflatten(flat)
    assert np.array_equal(ps2.flatten(), flat)


def test_paramset_copy_is_independent():
    ps = _single_slot([1.0, 2.0])
    cp = ps.copy()
    cp["p"] = np.array([9.0, 9.0])
    assert np.array_equal(ps["p"], [1.0, 2.0])


def test_paramset_setitem_shape_check():
    ps = _single_slot([1.0, 2.0])
    with pytest.raises(ShapeError):
        ps["p"] = np.zeros(3)


def test_finite_diff_check_accepts_correct_gradient():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])

    def loss(ps):
        x = ps["x"]
        return 0.5 * x @ A @ x

    ps = ParamSet({"x": np.array([0.3, -0.8])})
    ana = ParamSet({"x": A @ ps["x"]})
    assert finite_diff_check(loss, ps, ana) < 1e-7


def test_finite_diff_check_flags_wrong_gradient():
    def loss(ps):
        return float(np.sum(ps["x"] ** 2))

    ps = ParamSet({"x": np.array([1.0, 2.0])})
    wrong = ParamSet({"x": np.array([1.0, 1.0])})  # true gradient is 2x
    assert finite_diff_check(loss, ps, wrong) > 0.1


def test_finite_diff_check_guards():
    ps = ParamSet({"x": np.zeros(10_000)})
    with pytest.raises(ValueError):
        finite_diff_check(lambda p: 0.0, ps, ps.zeros_like())
    small = ParamSet({"x": np.zeros(2)})
    with pytest.raises(ValueError):
        finite_diff_check(lambda p: 0.0, small, small.zeros_like(), h=0.0)
    with pytest.raises(NumericError):
        finite_diff_check(lambda p: np.nan, small, small.zeros_like())

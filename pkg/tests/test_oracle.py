"""Tests for the learned-model corrections.

The kernel regression gradient is checked against central finite
differences; boundedness and the convex-combination property are
checked by randomized sampling; the parametric fit against exact
recovery of its own model class.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lbmpc.oracle import (
    OracleKind,
    RankDeficient,
    admit_sample,
    dkernel,
    export_buffer,
    fit_linear_parametric,
    import_buffer,
    kernel,
    l2nw_gradient,
    l2nw_oracle,
    l2nw_value,
    linear_parametric_oracle,
    oracle_jacobian,
    oracle_value,
    refit,
    residual,
    true_model_oracle,
    zero_oracle,
)
from lbmpc.polytope import HPolytope

A2 = np.array([[0.9, 0.1], [0.0, 0.8]])
B2 = np.array([[0.0], [1.0]])
W2 = HPolytope.box([-0.5, -0.5], [0.5, 0.5])


def _filled_l2nw(n, seed, h=0.6, lam=1e-3, selector=None):
    rng = np.random.default_rng(seed)
    state = l2nw_oracle(h=h, lam=lam, feature_selector=selector)
    for _ in range(n):
        x = rng.uniform(-0.4, 0.4, size=2)
        u = rng.uniform(-0.4, 0.4, size=1)
        g = 0.3 * np.array([np.sin(x[0]), x[1] * u[0]])
        x_next = A2 @ x + B2 @ u + g
        state = admit_sample(state, x, u, x_next, A2, B2, W2)
    return state


# ---------------------------------------------------------------------------
# kernel


def test_kernel_profile():
    assert kernel(0.0) == 0.75
    assert kernel(1.0) == 0.0
    assert kernel(-1.0) == 0.0
    assert kernel(2.0) == 0.0
    assert abs(kernel(0.5) - 0.75 * (1 - 0.25)) < 1e-15


def test_kernel_shape_properties():
    nu = np.linspace(-2, 2, 401)
    vals = np.array([kernel(v) for v in nu])
    assert np.all(vals >= 0)
    assert np.allclose(vals, vals[::-1])  # even
    right = vals[nu >= 0]
    assert np.all(np.diff(right) <= 1e-15)  # nonincreasing on nu >= 0


def test_dkernel_values():
    assert dkernel(0.5) == -0.75
    assert dkernel(1.0) == 0.0
    assert dkernel(-3.0) == 0.0
    fd = (kernel(0.5 + 1e-7) - kernel(0.5 - 1e-7)) / 2e-7
    assert abs(dkernel(0.5) - fd) < 1e-8


# ---------------------------------------------------------------------------
# residual / admit_sample


def test_residual_exact_linear_step():
    x = np.array([0.2, -0.1])
    u = np.array([0.3])
    assert np.allclose(residual(x, u, A2 @ x + B2 @ u, A2, B2), 0.0, atol=1e-15)


def test_residual_recovers_known_correction():
    x = np.array([0.1, 0.4])
    u = np.array([-0.2])
    g = np.array([0.05, -0.03])
    out = residual(x, u, A2 @ x + B2 @ u + g, A2, B2)
    assert np.allclose(out, g, atol=1e-15)


def test_admit_keeps_inlier_unchanged():
    state = l2nw_oracle()
    x = np.array([0.1, 0.1])
    u = np.array([0.0])
    g = np.array([0.2, -0.2])
    state = admit_sample(state, x, u, A2 @ x + B2 @ u + g, A2, B2, W2)
    assert len(state.buffer) == 1
    assert np.allclose(state.buffer[0].y, g, atol=1e-15)


def test_admit_clips_to_box_corner():
    state = l2nw_oracle()
    x = np.zeros(2)
    u = np.zeros(1)
    g = np.array([1.0, -1.0])  # twice the corner (0.5, -0.5)
    state = admit_sample(state, x, u, np.asarray(A2 @ x + B2 @ u + g), A2, B2, W2)
    assert np.allclose(state.buffer[0].y, [0.5, -0.5], atol=1e-15)


def test_admit_fifo_capacity():
    state = l2nw_oracle(capacity=50)
    for i in range(200):
        x = np.array([1e-3 * i, 0.0])
        u = np.zeros(1)
        state = admit_sample(state, x, u, A2 @ x, A2, B2, W2)
    assert len(state.buffer) == 50
    assert state.buffer[0].xi[0] == pytest.approx(1e-3 * 150)


# ---------------------------------------------------------------------------
# l2nw value


def test_l2nw_empty_buffer_is_zero():
    state = l2nw_oracle()
    assert np.array_equal(l2nw_value(state, np.zeros(2), np.zeros(1)), np.zeros(2))


def test_l2nw_single_sample_on_data_point():
    state = l2nw_oracle(h=0.5, lam=1e-3)
    x = np.array([0.2, -0.3])
    u = np.array([0.1])
    g = np.array([1.0, 1.0])
    W_big = HPolytope.box([-2, -2], [2, 2])
    state = admit_sample(state, x, u, A2 @ x + B2 @ u + g, A2, B2, W_big)
    val = l2nw_value(state, x, u)
    assert np.allclose(val, 0.75 / 0.751, atol=1e-12)


def test_l2nw_outside_all_supports():
    state = _filled_l2nw(30, seed=2, h=0.2)
    val = l2nw_value(state, np.array([50.0, 50.0]), np.array([50.0]))
    assert np.array_equal(val, np.zeros(2))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_l2nw_bounded_by_w(seed):
    rng = np.random.default_rng(seed)
    state = _filled_l2nw(40, seed=seed)
    for _ in range(20):
        x = rng.uniform(-1.0, 1.0, size=2)
        u = rng.uniform(-1.0, 1.0, size=1)
        val = l2nw_value(state, x, u)
        assert np.all(val <= 0.5 + 1e-12) and np.all(val >= -0.5 - 1e-12)


def test_l2nw_convex_combination_of_zero_and_data():
    state = _filled_l2nw(25, seed=8)
    ys = np.array([s.y for s in state.buffer])
    val = l2nw_value(state, np.array([0.1, 0.0]), np.array([0.05]))
    # componentwise inside the hull bounds of {0} union {Y_i}
    lo = np.minimum(ys.min(axis=0), 0.0)
    hi = np.maximum(ys.max(axis=0), 0.0)
    assert np.all(val >= lo - 1e-12) and np.all(val <= hi + 1e-12)


def test_l2nw_limit_matches_plain_nw():
    state = _filled_l2nw(20, seed=3, lam=1e-12)
    x = np.array([0.05, -0.05])
    u = np.array([0.1])
    xi = np.concatenate([x, u])
    kv = np.array([kernel(np.sum((xi - s.xi) ** 2) / state.h**2) for s in state.buffer])
    assert kv.sum() > 0  # query chosen inside the data cloud
    plain = (np.array([s.y for s in state.buffer]).T @ kv) / kv.sum()
    val = l2nw_value(state, x, u)
    rel = np.max(np.abs(val - plain)) / max(np.max(np.abs(plain)), 1e-12)
    assert rel <= 1e-6


def test_l2nw_feature_selector_ignores_other_coords():
    state = _filled_l2nw(15, seed=5, selector=(0, 2))
    x = np.array([0.1, 0.0])
    u = np.array([0.2])
    v1 = l2nw_value(state, x, u)
    v2 = l2nw_value(state, np.array([0.1, 77.0]), u)  # unselected coordinate
    assert np.array_equal(v1, v2)


# ---------------------------------------------------------------------------
# l2nw gradient


def _fd_gradient(state, x, u, step=1e-6):
    xi = np.concatenate([x, u])
    p = x.size
    cols = []
    for k in range(xi.size):
        e = np.zeros(xi.size)
        e[k] = step
        hi = l2nw_value(state, (xi + e)[:p], (xi + e)[p:])
        lo = l2nw_value(state, (xi - e)[:p], (xi - e)[p:])
        cols.append((hi - lo) / (2 * step))
    return np.column_stack(cols)


def _interior_query(state, rng):
    # stay clear of every kernel support boundary: |Xi_i - 1| > 1e-3
    while True:
        x = rng.uniform(-0.5, 0.5, size=2)
        u = rng.uniform(-0.5, 0.5, size=1)
        full = np.concatenate([x, u])
        sel = (
            list(state.feature_selector)
            if state.feature_selector is not None
            else list(range(full.size))
        )
        xi = full[sel]
        ok = True
        for s in state.buffer:
            Xi = np.sum((xi - s.xi[sel]) ** 2) / state.h**2
            if abs(Xi - 1.0) <= 1e-3:
                ok = False
                break
        if ok:
            return x, u


def test_l2nw_gradient_empty_and_far():
    state = l2nw_oracle()
    g = l2nw_gradient(state, np.zeros(2), np.zeros(1))
    assert np.array_equal(g, np.zeros((2, 3)))
    filled = _filled_l2nw(10, seed=1, h=0.2)
    g = l2nw_gradient(filled, np.array([9.0, 9.0]), np.array([9.0]))
    assert np.array_equal(g, np.zeros((2, 3)))


def test_l2nw_gradient_matches_finite_differences():
    state = _filled_l2nw(20, seed=12)
    rng = np.random.default_rng(99)
    for _ in range(100):
        x, u = _interior_query(state, rng)
        G = l2nw_gradient(state, x, u)
        F = _fd_gradient(state, x, u)
        rel = np.max(np.abs(G - F)) / max(np.max(np.abs(F)), 1e-9)
        assert rel <= 1e-5


def test_l2nw_gradient_selector_columns_zero():
    state = _filled_l2nw(20, seed=13, selector=(0, 2))
    G = l2nw_gradient(state, np.array([0.1, 0.2]), np.array([0.0]))
    assert np.array_equal(G[:, 1], np.zeros(2))
    F = _fd_gradient(state, np.array([0.1, 0.2]), np.array([0.0]))
    assert np.max(np.abs(G - F)) <= 1e-5 * max(np.max(np.abs(F)), 1.0)


# ---------------------------------------------------------------------------
# linear parametric oracle


def test_fit_recovers_generating_model():
    rng = np.random.default_rng(4)
    F0 = np.array([[0.02, -0.01], [0.005, 0.03]])
    G0 = np.array([[0.1], [-0.05]])
    state = linear_parametric_oracle()
    W_big = HPolytope.box([-5, -5], [5, 5])
    for _ in range(40):
        x = rng.uniform(-1, 1, size=2)
        u = rng.uniform(-1, 1, size=1)
        x_next = A2 @ x + B2 @ u + F0 @ x + G0 @ u
        state = admit_sample(state, x, u, x_next, A2, B2, W_big)
    F, G = fit_linear_parametric(state.buffer)
    assert np.max(np.abs(F - F0)) <= 1e-9
    assert np.max(np.abs(G - G0)) <= 1e-9


def test_fit_zero_residuals():
    rng = np.random.default_rng(6)
    state = linear_parametric_oracle()
    for _ in range(30):
        x = rng.uniform(-1, 1, size=2)
        u = rng.uniform(-1, 1, size=1)
        state = admit_sample(state, x, u, A2 @ x + B2 @ u, A2, B2, W2)
    F, G = fit_linear_parametric(state.buffer)
    assert np.max(np.abs(F)) <= 1e-12
    assert np.max(np.abs(G)) <= 1e-12


def test_fit_rank_deficient():
    state = linear_parametric_oracle()
    x = np.array([0.1, 0.2])
    u = np.array([0.3])
    for _ in range(10):  # identical regressors: moment matrix is singular
        state = admit_sample(state, x, u, A2 @ x + B2 @ u, A2, B2, W2)
    with pytest.raises(RankDeficient):
        fit_linear_parametric(state.buffer)
    # refit keeps previous coefficients instead of raising
    state2 = refit(state)
    assert state2.F is None and state2.G is None


def test_fit_normal_equation_stationarity():
    rng = np.random.default_rng(14)
    state = linear_parametric_oracle()
    W_big = HPolytope.box([-5, -5], [5, 5])
    for _ in range(60):
        x = rng.uniform(-1, 1, size=2)
        u = rng.uniform(-1, 1, size=1)
        g = 0.1 * rng.standard_normal(2)
        state = admit_sample(state, x, u, A2 @ x + B2 @ u + g, A2, B2, W_big)
    F, G = fit_linear_parametric(state.buffer)
    Z = np.array([s.xi for s in state.buffer])
    Y = np.array([s.y for s in state.buffer])
    R = Y - Z @ np.hstack([F, G]).T
    assert np.max(np.abs(R.T @ Z)) <= 1e-8


def test_refit_updates_parametric_state():
    rng = np.random.default_rng(15)
    state = linear_parametric_oracle()
    W_big = HPolytope.box([-5, -5], [5, 5])
    for _ in range(30):
        x = rng.uniform(-1, 1, size=2)
        u = rng.uniform(-1, 1, size=1)
        state = admit_sample(state, x, u, A2 @ x + B2 @ u + 0.1 * x, A2, B2, W_big)
    state = refit(state)
    val = oracle_value(state, np.array([1.0, 0.0]), np.zeros(1))
    assert np.allclose(val, [0.1, 0.0], atol=1e-8)
    J = oracle_jacobian(state, np.array([1.0, 0.0]), np.zeros(1))
    assert np.allclose(J[:, :2], 0.1 * np.eye(2), atol=1e-8)


# ---------------------------------------------------------------------------
# zero / true-model oracles


def test_zero_oracle_value_and_jacobian():
    state = zero_oracle()
    assert state.kind is OracleKind.ZERO
    assert np.array_equal(oracle_value(state, np.ones(3), np.ones(2)), np.zeros(3))
    assert np.array_equal(oracle_jacobian(state, np.ones(3), np.ones(2)), np.zeros((3, 5)))


def test_true_model_oracle_zero_function():
    state = true_model_oracle(lambda x, u: np.zeros_like(x))
    assert np.array_equal(oracle_value(state, np.ones(2), np.ones(1)), np.zeros(2))
    assert np.allclose(oracle_jacobian(state, np.ones(2), np.ones(1)), 0.0, atol=1e-9)


def test_true_model_oracle_fd_jacobian():
    M = np.array([[0.3, -0.2, 0.1], [0.0, 0.5, -0.4]])

    def g(x, u):
        xi = np.concatenate([x, u])
        return M @ xi + np.array([xi[0] ** 2, 0.0])

    state = true_model_oracle(g)
    x = np.array([0.2, -0.1])
    u = np.array([0.4])
    J = oracle_jacobian(state, x, u)
    expect = M.copy()
    expect[0, 0] += 2 * x[0]
    assert np.max(np.abs(J - expect)) <= 1e-6


# ---------------------------------------------------------------------------
# buffer csv round trip


def test_buffer_csv_round_trip(tmp_path):
    state = _filled_l2nw(12, seed=7)
    path = tmp_path / "buffer.csv"
    export_buffer(state, path)
    fresh = import_buffer(l2nw_oracle(h=state.h, lam=state.lam), path)
    assert len(fresh.buffer) == 12
    for a, b in zip(state.buffer, fresh.buffer):
        assert np.array_equal(a.xi, b.xi)
        assert np.array_equal(a.y, b.y)

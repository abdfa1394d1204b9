"""Quantile head: pinball values and its three-valued gradient, loss masking,
sorting, clamping, and convexity."""

import numpy as np
import pytest

from patchcast.autodiff import Tensor
from patchcast.quantile import (
    QUANTILE_LEVELS,
    QuantileForecast,
    clamp_forecast,
    pinball,
    pinball_grad,
    quantile_loss,
    sort_quantiles,
)


def test_pinball_values():
    assert pinball(1.0, 0.0, 0.5) == 0.5
    assert pinball(3.0, 3.0, 0.7) == 0.0
    assert pinball(0.0, 1.0, 0.9) == pytest.approx(0.1)


def test_pinball_nonnegative_zero_iff_equal():
    rng = np.random.default_rng(0)
    y, q = rng.standard_normal(1000), rng.standard_normal(1000)
    vals = pinball(y, q, 0.3)
    assert np.all(vals >= 0)
    assert np.all((vals == 0) == (y == q))


def test_pinball_grad_three_values():
    assert pinball_grad(2.0, 1.0, 0.3) == pytest.approx(-0.3)
    assert pinball_grad(1.0, 1.0, 0.3) == 0.0
    assert pinball_grad(0.0, 1.0, 0.3) == pytest.approx(0.7)


def test_autodiff_pinball_equals_closed_form_exactly():
    rng = np.random.default_rng(1)
    n = 20_000
    y = rng.standard_normal(n)
    q = rng.standard_normal(n)
    taus = rng.choice(QUANTILE_LEVELS, size=n)
    assert np.all(y != q)
    qt = Tensor(q, requires_grad=True)
    qt.pinball(y, taus).backward(np.ones(n))
    expected = np.where(y > q, -taus, 1.0 - taus)
    np.testing.assert_array_equal(qt.grad, expected)


def test_quantile_loss_perfect_forecast():
    y = np.array([1.0, -2.0])
    q = np.repeat(y[:, None], 9, axis=1)
    loss, w = quantile_loss(y, q)
    assert loss == 0.0 and w == 2.0


def test_quantile_loss_unit_residual_mean_of_deciles():
    # y=1, all quantiles 0: mean over tau of tau*1 = 0.5
    loss, _ = quantile_loss(np.array([1.0]), np.zeros((1, 9)))
    assert loss == pytest.approx(0.5)


def test_quantile_loss_matches_loop_oracle():
    rng = np.random.default_rng(2)
    y = rng.standard_normal((3, 7))
    q = rng.standard_normal((3, 7, 9))
    obs = rng.uniform(size=(3, 7)) < 0.8
    loss, w = quantile_loss(y, q, obs)
    total, count = 0.0, 0
    for i in range(3):
        for j in range(7):
            if not obs[i, j]:
                continue
            count += 1
            total += sum(pinball(y[i, j], q[i, j, k], QUANTILE_LEVELS[k]) for k in range(9)) / 9.0
    assert w == count
    assert loss == pytest.approx(total / count, abs=1e-12)


def test_quantile_loss_all_unobserved():
    loss, w = quantile_loss(np.ones(4), np.zeros((4, 9)), observed=np.zeros(4, bool))
    assert loss == 0.0 and w == 0.0


def test_quantile_loss_convex_piecewise_linear_in_single_quantile():
    # grid scan: loss as a function of one q-hat has its minimum at q == y
    y = 0.3
    grid = np.linspace(-2, 2, 401)
    losses = []
    for g in grid:
        q = np.full((1, 9), y, dtype=float)
        q[0, 4] = g
        losses.append(quantile_loss(np.array([y]), q)[0])
    losses = np.array(losses)
    assert grid[np.argmin(losses)] == pytest.approx(y, abs=0.011)
    d2 = np.diff(losses, 2)
    assert np.all(d2 >= -1e-12)  # convex


def _forecast(values):
    return QuantileForecast(values=np.asarray(values, dtype=float), space="real")


def test_sort_quantiles_idempotent_and_reversal():
    sorted_vals = np.sort(np.random.default_rng(3).standard_normal((2, 4, 9)), axis=-1)
    f = _forecast(sorted_vals)
    np.testing.assert_array_equal(sort_quantiles(f).values, sorted_vals)
    np.testing.assert_array_equal(sort_quantiles(_forecast(sorted_vals[..., ::-1])).values,
                                  sorted_vals)


def test_sort_preserves_multiset():
    rng = np.random.default_rng(4)
    vals = rng.standard_normal((3, 5, 9))
    out = sort_quantiles(_forecast(vals)).values
    np.testing.assert_array_equal(np.sort(vals, axis=-1), np.sort(out, axis=-1))
    assert np.all(np.diff(out, axis=-1) >= 0)


def test_sort_never_increases_quantile_loss():
    rng = np.random.default_rng(5)
    for _ in range(50):
        y = rng.standard_normal(16)
        q = rng.standard_normal((16, 9)) * 2.0
        before, _ = quantile_loss(y, q)
        after, _ = quantile_loss(y, np.sort(q, axis=-1))
        assert after <= before + 1e-12


def test_clamp_forecast():
    vals = np.array([[[-2e4, 0.0, 5.0, 9.0, 10.0, 10.5, 11.0, 2e4, 3e38]]], dtype=float)
    vals = np.sort(vals, axis=-1)
    out = clamp_forecast(_forecast(vals), ctx_min=[0.0], ctx_max=[10.0], anchor_scale=[1.0])
    assert out.values.min() == -10000.0
    assert out.values.max() == 10010.0
    inside = _forecast(np.linspace(0, 10, 9).reshape(1, 1, 9))
    np.testing.assert_array_equal(
        clamp_forecast(inside, [0.0], [10.0], [1.0]).values, inside.values)


def test_clamp_requires_real_space_and_positive_anchor():
    f = QuantileForecast(values=np.zeros((1, 1, 9)), space="scaled")
    with pytest.raises(ValueError):
        clamp_forecast(f, [0.0], [1.0], [1.0])
    with pytest.raises(ValueError):
        clamp_forecast(_forecast(np.zeros((1, 1, 9))), [0.0], [1.0], [0.0])


def test_forecast_median_is_sorted_middle():
    rng = np.random.default_rng(6)
    vals = rng.standard_normal((2, 3, 9))
    f = _forecast(vals)
    np.testing.assert_array_equal(f.median(), np.sort(vals, axis=-1)[..., 4])

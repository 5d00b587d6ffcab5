import numpy as np
import pytest
import scipy.stats

from conflow import flow
from conflow.core import zero_center


def test_sample_time_matches_beta():
    rng = np.random.default_rng(0)
    draws = np.array([flow.sample_time(rng) for _ in range(20000)])
    assert draws.min() >= 0.0 and draws.max() <= 1.0
    # Beta(2,1) has cdf t^2
    stat, pvalue = scipy.stats.kstest(draws, scipy.stats.beta(2, 1).cdf)
    assert pvalue > 1e-3
    assert abs(draws.mean() - 2.0 / 3.0) < 0.01


def test_interpolate_endpoint_mixing():
    rng = np.random.default_rng(1)
    x0 = np.zeros((2000, 3))
    x1 = np.ones((2000, 3))
    x_t = flow.interpolate_coords(x0, x1, 0.25, sigma=0.0, rng=rng)
    assert np.allclose(x_t, 0.25)


def test_interpolate_noise_scale():
    rng = np.random.default_rng(2)
    x0 = np.zeros((200000, 3))
    x_t = flow.interpolate_coords(x0, x0, 0.5, sigma=0.2, rng=rng)
    # noise enters directly per coordinate, so the sample std sits at sigma
    assert abs(x_t.std() - 0.2) < 0.005


def test_interpolate_validates_t():
    rng = np.random.default_rng(3)
    x = np.zeros((4, 3))
    with pytest.raises(ValueError):
        flow.interpolate_coords(x, x, 1.5, 0.1, rng)
    with pytest.raises(ValueError):
        flow.interpolate_coords(x, np.zeros((5, 3)), 0.5, 0.1, rng)


def test_target_velocity():
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal((6, 3))
    x1 = rng.standard_normal((6, 3))
    assert np.allclose(flow.target_velocity(x0, x1), x1 - x0)


def test_cat_interp_extremes():
    rng = np.random.default_rng(5)
    a0 = rng.integers(0, 4, size=500)
    a1 = rng.integers(0, 4, size=500)
    assert np.array_equal(flow.cat_interp(0.0, a0, a1, rng), a0)
    assert np.array_equal(flow.cat_interp(1.0, a0, a1, rng), a1)


def test_cat_interp_marginal():
    rng = np.random.default_rng(6)
    n = 100000
    a0 = np.zeros(n, dtype=np.int64)
    a1 = np.ones(n, dtype=np.int64)
    t = 0.7
    taken = (flow.cat_interp(t, a0, a1, rng) == 1).mean()
    se = np.sqrt(t * (1 - t) / n)
    assert abs(taken - t) < 4 * se


def test_euler_step_closed_form():
    # x <- x + dt (target - x) / (1 - t), one full step from t=0 lands on target
    rng = np.random.default_rng(7)
    x0 = zero_center(rng.standard_normal((5, 3)))
    x1 = zero_center(rng.standard_normal((5, 3)))
    out = flow.euler_coord_step(x0, x1, t=0.0, dt=1.0)
    assert np.allclose(out, x1, atol=1e-12)


def test_euler_step_midpoint_value():
    x = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    target = np.array([[3.0, 0.0, 0.0], [-3.0, 0.0, 0.0]])
    out = flow.euler_coord_step(x, target, t=0.5, dt=0.25, recenter=False)
    expect = x + 0.25 * (target - x) / 0.5
    assert np.allclose(out, expect)


def test_euler_step_clamps_overshoot():
    x = np.zeros((3, 3))
    target = np.ones((3, 3))
    out = flow.euler_coord_step(x, target, t=0.9, dt=0.2, recenter=False)
    # effective dt is 0.1, landing exactly at t=1
    assert np.allclose(out, target)


def test_euler_step_recenters():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((6, 3)) + 2.0
    target = rng.standard_normal((6, 3)) + 5.0
    out = flow.euler_coord_step(x, target, t=0.2, dt=0.1)
    assert np.allclose(out.mean(axis=0), 0.0, atol=1e-12)


def test_euler_step_rejects_bad_time():
    x = np.zeros((2, 3))
    with pytest.raises(ValueError):
        flow.euler_coord_step(x, x, t=1.0, dt=0.1)
    with pytest.raises(ValueError):
        flow.euler_coord_step(x, x, t=0.5, dt=0.0)


def test_sample_categorical_frequencies():
    rng = np.random.default_rng(9)
    p = np.tile(np.array([0.1, 0.2, 0.7]), (50000, 1))
    draws = flow.sample_categorical(p, rng)
    freq = np.bincount(draws, minlength=3) / len(draws)
    assert np.allclose(freq, [0.1, 0.2, 0.7], atol=0.01)


def test_cat_update_jump_probability():
    rng = np.random.default_rng(10)
    n = 200000
    state = np.zeros(n, dtype=np.int64)
    p = np.tile(np.array([0.0, 1.0, 0.0]), (n, 1))
    out = flow.cat_update(state, p, t=0.5, dt=0.1, rng=rng)
    # jump probability dt / (1 - t) = 0.2, every jump goes to class 1
    frac = (out == 1).mean()
    assert abs(frac - 0.2) < 0.005


def test_cat_update_final_step_absorbs():
    rng = np.random.default_rng(11)
    state = np.zeros(1000, dtype=np.int64)
    p = np.tile(np.array([0.0, 0.0, 1.0]), (1000, 1))
    out = flow.cat_update(state, p, t=0.99, dt=0.01, rng=rng)
    assert (out == 2).all()


def test_cat_update_validates_probs():
    rng = np.random.default_rng(12)
    state = np.zeros(3, dtype=np.int64)
    bad = np.full((3, 3), 0.5)
    with pytest.raises(ValueError):
        flow.cat_update(state, bad, t=0.1, dt=0.1, rng=rng)


def test_toy_block_flow_frozen_values():
    # psi_i = z_i^2 + prod(block); at z = ones the block Jacobian is
    # 2 I + ones, with det (2 + 4) * 2^3 = 48 for a 4-block
    blocks, sizes = flow.toy_block_flow([4, 4])
    rep = flow.jacobian_block_check(blocks, sizes, np.ones(8))
    assert rep["block_dets"] == pytest.approx([48.0, 48.0], rel=1e-9)
    assert rep["det_full"] == pytest.approx(2304.0, rel=1e-7)
    assert rep["block_det_product"] == pytest.approx(2304.0, rel=1e-9)
    assert rep["max_offblock"] == 0.0


def test_jacobian_check_flags_coupled_map():
    def coupled(z):
        return np.array([z[0] + 0.5 * z[2], z[1]])

    def tail(z):
        return np.array([z[2], z[3]])

    rep = flow.jacobian_block_check([coupled, tail], [2, 2], np.ones(4))
    assert rep["max_offblock"] > 0.4


def test_jacobian_check_requires_matching_sizes():
    blocks, sizes = flow.toy_block_flow([4, 4])
    with pytest.raises(ValueError):
        flow.jacobian_block_check(blocks, sizes, np.ones(9))

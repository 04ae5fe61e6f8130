import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bhp_lab.model import BranchingRate
from bhp_lab.motion import (
    CEMETERY,
    MotionError,
    PathSegment,
    interval_density,
    interval_path_with_absorption,
    interval_step_with_absorption,
    local_time_pcaf,
    mehler_density_h,
    ou_h_step,
    ou_path,
    ou_step,
    pcaf_increment,
    rate_cumulative,
)

import oracles

RNG = lambda s=0: np.random.default_rng(s)


# --- ou_step -----------------------------------------------------------------

def test_ou_step_dt_zero_identity():
    assert ou_step(1.3, 0.0, 2.0, 1.0, RNG()) == 1.3


def test_ou_step_negative_dt():
    with pytest.raises(MotionError):
        ou_step(0.0, -0.1, 2.0, 1.0, RNG())


def test_ou_step_moments():
    n = 100_000
    xs = ou_step(np.full(n, 1.0), 0.5, 2.0, 1.0, RNG(1))
    mean, var = oracles.ou_step_mean_var(1.0, 0.5, 2.0)
    assert abs(xs.mean() - mean) <= 3.0 * math.sqrt(var / n)
    assert abs(xs.var() - var) <= 3.0 * var * math.sqrt(2.0 / n)


def test_ou_step_stationary_large_t():
    n = 100_000
    xs = ou_step(np.full(n, 3.0), 50.0, 2.0, 1.0, RNG(2))
    assert abs(xs.mean()) <= 3.0 * math.sqrt(0.25 / n)
    assert abs(xs.var() - 0.25) <= 3.0 * 0.25 * math.sqrt(2.0 / n)


def test_ou_h_step_stationary_variance():
    n = 100_000
    xs = ou_h_step(np.zeros(n), 40.0, 1.0, RNG(3))
    assert abs(xs.var() - 0.5) <= 3.0 * 0.5 * math.sqrt(2.0 / n)


def test_ou_h_step_mean_decay():
    n = 100_000
    xs = ou_h_step(np.full(n, 1.0), 0.7, 1.0, RNG(4))
    sd = math.sqrt((1.0 - math.exp(-1.4)) / 2.0)
    assert abs(xs.mean() - math.exp(-0.7)) <= 3.0 * sd / math.sqrt(n)


def test_ou_path_matches_step_distribution():
    # AR(1) path endpoint must match the one-shot exact transition law
    n = 40_000
    ends = np.array([ou_path(1.0, 50, 0.02, 2.0, 1.0, RNG(100 + i))[-1] for i in range(n)])
    mean, var = oracles.ou_step_mean_var(1.0, 1.0, 2.0)
    assert abs(ends.mean() - mean) <= 3.0 * math.sqrt(var / n)
    assert abs(ends.var() - var) <= 3.0 * var * math.sqrt(2.0 / n)


# --- mehler kernel -------------------------------------------------------------

def test_mehler_symmetry():
    for (x, y, t) in ((0.3, -1.2, 0.7), (2.0, 0.0, 1.5)):
        assert mehler_density_h(t, x, y, 1.0) == pytest.approx(
            mehler_density_h(t, y, x, 1.0), rel=1e-14)


def test_mehler_on_diagonal_formula():
    for x in (0.0, 1.0, -2.0):
        for t in (0.5, 2.0):
            target = (1.0 - math.exp(-2.0 * t)) ** -0.5 * math.exp(
                2.0 * x * x / (math.exp(t) + 1.0))
            assert mehler_density_h(t, x, x, 1.0) == pytest.approx(target, rel=1e-13)


def test_mehler_value_t5():
    assert mehler_density_h(5.0, 0.0, 0.0, 1.0) == pytest.approx(1.0000227007, abs=1e-9)


def test_mehler_rejects_t_zero():
    with pytest.raises(MotionError):
        mehler_density_h(0.0, 0.0, 0.0, 1.0)


def test_mehler_row_integrates_to_one():
    ys = np.linspace(-10, 10, 4001)
    mt = math.sqrt(1.0 / math.pi) * np.exp(-ys * ys)
    for t in (0.3, 1.0):
        for x in (0.0, -1.5):
            row = mehler_density_h(t, np.full_like(ys, x), ys, 1.0)
            assert np.trapezoid(row * mt, ys) == pytest.approx(1.0, abs=1e-6)


def test_mehler_uniform_convergence_to_one():
    xs = np.linspace(-2, 2, 41)
    vals = mehler_density_h(10.0, xs[:, None], xs[None, :], 1.0)
    assert np.max(np.abs(vals - 1.0)) <= 1e-3


# --- interval kernel ------------------------------------------------------------

def test_interval_density_boundary_vanishes():
    v = interval_density(0.5, 1e-9, math.pi / 2, 1.0).value
    assert abs(v) < 1e-8


def test_interval_density_value():
    out = interval_density(1.0, math.pi / 2, math.pi / 2, 1.0, n_terms=10)
    assert out.value == pytest.approx(1.06883926, abs=1e-7)
    assert out.value == pytest.approx(
        oracles.interval_fk_kernel(1.0, math.pi / 2, math.pi / 2, 1.0, 10), rel=1e-13)


def test_interval_density_domain_check():
    with pytest.raises(MotionError):
        interval_density(1.0, -0.1, 1.0, 1.0)


def test_interval_density_chapman_kolmogorov():
    zs = np.linspace(1e-4, math.pi - 1e-4, 3001)
    x, y, s, t = 1.0, 2.0, 0.4, 0.6
    ps = interval_density(s, np.full_like(zs, x), zs, 1.0).value
    pt = interval_density(t, zs, np.full_like(zs, y), 1.0).value
    lhs = np.trapezoid(ps * pt, zs)
    rhs = interval_density(s + t, x, y, 1.0).value
    assert lhs == pytest.approx(rhs, abs=1e-8)


def test_interval_density_tail_bound_controls_truncation():
    full = interval_density(0.5, 1.0, 2.0, 1.0, n_terms=80)
    out = interval_density(0.5, 1.0, 2.0, 1.0)
    assert abs(out.value - full.value) <= out.tail_bound + 1e-15


# --- killed stepping -------------------------------------------------------------

def test_interval_step_deep_interior_no_absorption():
    rng = RNG(5)
    for _ in range(2000):
        assert not math.isnan(interval_step_with_absorption(math.pi / 2, 1e-6, rng))


def test_interval_step_outside_domain_rejected():
    with pytest.raises(MotionError):
        interval_step_with_absorption(-0.5, 1e-3, RNG())


def test_interval_survival_matches_series():
    rng = RNG(6)
    n, dt = 30_000, 1e-3
    alive = sum(
        interval_path_with_absorption(math.pi / 2, np.full(1000, dt), rng)[1] < 0
        for _ in range(n))
    p = alive / n
    target = oracles.survival_series(1.0, math.pi / 2)
    se = math.sqrt(p * (1 - p) / n)
    assert abs(p - target) <= 3.0 * se + 3.0 * dt  # documented O(dt) bias budget


def test_interval_absorption_bias_shrinks_with_dt():
    target = oracles.survival_series(1.0, math.pi / 2)
    devs = []
    for dt, seed in ((4e-3, 7), (1e-3, 8)):
        rng = RNG(seed)
        n = 40_000
        alive = sum(
            interval_path_with_absorption(math.pi / 2, np.full(int(round(1 / dt)), dt), rng)[1] < 0
            for _ in range(n))
        devs.append(abs(alive / n - target))
    assert devs[1] <= devs[0] + 0.003


# --- additive functionals ---------------------------------------------------------

def _segment(times, positions):
    return PathSegment(np.asarray(times, float), np.asarray(positions, float))


def test_pcaf_constant_rate_exact():
    seg = _segment([0, 0.4, 1.0], [0.2, 0.5, 0.9])
    assert pcaf_increment(seg, BranchingRate(a=1.7)) == pytest.approx(1.7, abs=1e-15)


def test_pcaf_constant_path_quadratic():
    seg = _segment(np.linspace(0, 2, 21), np.full(21, 1.5))
    rate = BranchingRate(a=0.1, b=1.5)
    assert pcaf_increment(seg, rate) == pytest.approx((1.5 * 1.5 ** 2 + 0.1) * 2.0, abs=1e-12)


def test_pcaf_frozen_after_absorption():
    seg = _segment([0, 1, 2, 3], [1.0, 1.0, CEMETERY, CEMETERY])
    assert pcaf_increment(seg, BranchingRate(a=1.0)) == pytest.approx(1.0)


@given(st.integers(2, 30), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_pcaf_additive_over_concatenation(n_pts, seed):
    rng = np.random.default_rng(seed)
    times = np.sort(rng.uniform(0, 5, n_pts) + np.arange(n_pts) * 1e-6)
    pos = rng.standard_normal(n_pts)
    rate = BranchingRate(a=0.3, b=0.7)
    k = n_pts // 2
    whole = pcaf_increment(_segment(times, pos), rate)
    left = pcaf_increment(_segment(times[: k + 1], pos[: k + 1]), rate)
    right = pcaf_increment(_segment(times[k:], pos[k:]), rate)
    assert whole == pytest.approx(left + right, rel=1e-12, abs=1e-12)


def test_pcaf_stationary_ou_mean():
    # per-unit-time mean of the quadratic clock under the stationary OU law
    rng = RNG(9)
    rate = BranchingRate(a=0.1, b=1.5)
    n, steps, dt = 400, 2500, 1e-3
    vals = []
    for _ in range(n):
        x0 = rng.normal(0.0, 0.5)  # stationary sd = sqrt(1/(2c)) = 0.5
        path = np.concatenate([[x0], ou_path(x0, steps, dt, 2.0, 1.0, rng)])
        times = dt * np.arange(steps + 1)
        vals.append(pcaf_increment(_segment(times, path), rate) / (steps * dt))
    vals = np.asarray(vals)
    target = 1.5 * 0.25 + 0.1
    assert abs(vals.mean() - target) <= 3.0 * vals.std() / math.sqrt(n)


# --- local time --------------------------------------------------------------------

def test_local_time_never_in_window():
    seg = _segment(np.linspace(0, 1, 101), np.full(101, 2.0))
    assert local_time_pcaf(seg, 0.0, 0.05) == 0.0


def test_local_time_constant_path_at_center():
    seg = _segment(np.linspace(0, 3, 31), np.zeros(31))
    assert local_time_pcaf(seg, 0.0, 0.02, q=1.5) == pytest.approx(1.5 * 3.0 / 0.02)


def test_local_time_brownian_mean_extrapolated():
    # Richardson extrapolation in the window width against E L_1 = sqrt(2/pi)
    rng = RNG(10)
    n, steps, dt = 20_000, 5000, 2e-4
    eps_grid = (0.1, 0.05, 0.02)
    times = dt * np.arange(steps + 1)
    means = np.zeros(len(eps_grid))
    ses = np.zeros(len(eps_grid))
    samples = np.zeros((n, len(eps_grid)))
    for i in range(n):
        path = np.concatenate([[0.0], np.cumsum(math.sqrt(dt) * rng.standard_normal(steps))])
        seg = _segment(times, path)
        for j, eps in enumerate(eps_grid):
            samples[i, j] = local_time_pcaf(seg, 0.0, eps)
    means = samples.mean(axis=0)
    ses = samples.std(axis=0) / math.sqrt(n)
    # linear-in-eps extrapolation from the two smallest windows
    extrap = means[2] + (means[2] - means[1]) * eps_grid[2] / (eps_grid[1] - eps_grid[2])
    target = oracles.brownian_local_time_mean(1.0)
    assert abs(extrap - target) <= 3.0 * ses[2] + 0.01


def test_rate_cumulative_combines_point_and_density():
    class _M:
        rate = BranchingRate(a=1.0, point_x0=0.0, point_q=2.0)
        local_time_eps = 0.5

    times = np.linspace(0, 1, 101)
    positions = np.zeros(101)
    out = rate_cumulative(_M(), times, positions)
    assert out[-1] == pytest.approx(1.0 + 2.0 / 0.5, abs=1e-12)


# --- path segments -------------------------------------------------------------------

def test_segment_rejects_nonmonotone_times():
    with pytest.raises(MotionError):
        _segment([0, 1, 1], [0, 0, 0])


def test_segment_rejects_resurrection():
    with pytest.raises(MotionError):
        _segment([0, 1, 2], [0.0, CEMETERY, 1.0])


def test_segment_position_lookup():
    seg = _segment([0, 0.5, 1.0], [1.0, 2.0, 3.0])
    assert seg.position_at(0.75) == 2.0
    assert seg.position_at(0.5) == 2.0
    with pytest.raises(MotionError):
        seg.position_at(1.5)


def test_pcaf_accumulator_freezes():
    from bhp_lab.motion import PcafAccumulator

    acc = PcafAccumulator(rate=BranchingRate(a=2.0))
    acc.add_segment(_segment([0, 1], [0.5, 0.5]))
    assert acc.value == pytest.approx(2.0)
    acc.add_segment(_segment([1, 2], [0.5, CEMETERY]))
    frozen_at = acc.value
    assert acc.frozen
    acc.add_segment(_segment([2, 3], [0.5, 0.5]))
    assert acc.value == frozen_at


def test_pcaf_accumulator_nondecreasing():
    from bhp_lab.motion import PcafAccumulator

    rng = np.random.default_rng(3)
    acc = PcafAccumulator(rate=BranchingRate(a=0.2, b=1.0))
    prev = 0.0
    t = 0.0
    x = 0.3
    for _ in range(10):
        ts = t + np.sort(rng.uniform(0.01, 1.0, 5))
        xs = x + np.cumsum(rng.standard_normal(5) * 0.1)
        acc.add_segment(_segment(np.concatenate([[t], ts]), np.concatenate([[x], xs])))
        assert acc.value >= prev
        prev, t, x = acc.value, ts[-1], xs[-1]

"""Transition sampling, kernel evaluation, and additive-functional clocks.

OU transitions are exact Gaussians at any step size; killed Brownian
motion on an interval uses fixed-step Euler with a Brownian-bridge
boundary-crossing correction.  The branching clock is the additive
functional of the rate measure, accumulated along discretized paths by
the trapezoid rule (an eps-window occupation approximates the local
time when the rate has a point mass).

All functions here are pure given (inputs, random-stream state) and
parallel-safe as long as each worker owns its own stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

CEMETERY = math.nan


def is_alive(x) -> bool:
    return not math.isnan(x)


class MotionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# path segments
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class PathSegment:
    """Positions sampled at strictly increasing times; NaN marks the
    cemetery state, and absorption is permanent."""

    times: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float)
        if self.times.shape != self.positions.shape[: self.times.ndim]:
            raise MotionError("times/positions length mismatch")
        if self.times.size and np.any(np.diff(self.times) <= 0.0):
            raise MotionError("segment times must be strictly increasing")
        dead = np.isnan(self.positions)
        if dead.any():
            first = int(np.argmax(dead))
            if not dead[first:].all():
                raise MotionError("absorption must be permanent")

    @property
    def alive(self) -> np.ndarray:
        return ~np.isnan(self.positions)

    @property
    def birth_time(self) -> float:
        return float(self.times[0])

    @property
    def end_time(self) -> float:
        return float(self.times[-1])

    def position_at(self, t: float):
        """Value at the last sample time <= t (paths are grid-resolved)."""
        if t < self.times[0] - 1e-12 or t > self.times[-1] + 1e-12:
            raise MotionError(f"time {t!r} outside segment span")
        idx = int(np.searchsorted(self.times, t + 1e-12)) - 1
        out = self.positions[max(idx, 0)]
        return float(out) if np.ndim(out) == 0 else out


@dataclass(eq=False)
class PcafAccumulator:
    """Running value of the branching clock along consecutive segments.

    The value never decreases and freezes once a segment ends absorbed.
    """

    rate: object
    value: float = 0.0
    frozen: bool = False

    def add_segment(self, segment: "PathSegment") -> float:
        if not self.frozen:
            self.value += pcaf_increment(segment, self.rate)
            if np.isnan(segment.positions[-1]):
                self.frozen = True
        return self.value


# ---------------------------------------------------------------------------
# OU motion (exact transitions)
# ---------------------------------------------------------------------------

def ou_step(x, dt: float, c: float, sigma: float, rng) -> float | np.ndarray:
    """Exact OU transition: N(x e^{-c dt}, sigma^2 (1 - e^{-2 c dt}) / 2c)."""
    if dt < 0.0:
        raise MotionError("dt must be >= 0")
    if dt == 0.0:
        return x
    mean = np.asarray(x, dtype=float) * math.exp(-c * dt)
    sd = sigma * math.sqrt((1.0 - math.exp(-2.0 * c * dt)) / (2.0 * c))
    out = mean + sd * rng.standard_normal(np.shape(mean))
    return float(out) if out.ndim == 0 else out


def ou_h_step(x, dt: float, alpha: float, rng):
    """Transformed-motion step: OU with drift rate alpha and sigma = 1."""
    return ou_step(x, dt, alpha, 1.0, rng)


def ou_path(x0: float, n_steps: int, dt: float, c: float, sigma: float, rng) -> np.ndarray:
    """Exact OU sample path at times dt, 2dt, ..., n_steps*dt (AR(1) recursion)."""
    from scipy.signal import lfilter

    if n_steps <= 0:
        return np.empty(0)
    phi = math.exp(-c * dt)
    sd = sigma * math.sqrt((1.0 - phi * phi) / (2.0 * c))
    noise = sd * rng.standard_normal(n_steps)
    out, _ = lfilter([1.0], [1.0, -phi], noise, zi=np.array([phi * x0]))
    return out


def mehler_density_h(t: float, x, y, alpha: float, d: int = 1):
    """Transformed-OU transition density w.r.t. its invariant measure
    mtilde(dx) = (alpha/pi)^{d/2} e^{-alpha |x|^2} dx:

        p^h(t,x,y) = (1 - e^{-2 a t})^{-d/2}
                     exp( -a (|x|^2 + |y|^2 - 2 x.y e^{a t}) / (e^{2 a t} - 1) )
    """
    if t <= 0.0:
        raise MotionError("t must be > 0")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if d == 1:
        x2, y2, xy = x * x, y * y, x * y
    else:
        x2, y2, xy = np.sum(x * x, -1), np.sum(y * y, -1), np.sum(x * y, -1)
    e2 = math.expm1(2.0 * alpha * t)  # e^{2 a t} - 1
    pref = (1.0 - math.exp(-2.0 * alpha * t)) ** (-d / 2.0)
    out = pref * np.exp(-alpha * (x2 + y2 - 2.0 * xy * math.exp(alpha * t)) / e2)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# interval motion (killed Brownian motion on (0, L))
# ---------------------------------------------------------------------------

class IntervalDensity(NamedTuple):
    value: float | np.ndarray
    tail_bound: float
    n_terms: int


def _series_tail(t: float, n: int) -> float:
    # sum_{k > n} e^{-k^2 t / 2} <= geometric with ratio e^{-(2n+3) t / 2}
    first = math.exp(-((n + 1) ** 2) * t / 2.0)
    ratio = math.exp(-(2 * n + 3) * t / 2.0)
    return first / (1.0 - ratio)


def interval_density(
    t: float, x, y, beta: float, length: float = math.pi,
    n_terms: int | None = None, tail_tol: float = 1e-10,
) -> IntervalDensity:
    """Feynman-Kac kernel of the constant-rate interval model w.r.t. Lebesgue:

        p(t,x,y) = e^{beta t} sum_n e^{-n^2 pi^2 t / (2 L^2)} (2/L) sin(n pi x/L) sin(n pi y/L)

    truncated so the reported tail bound is below ``tail_tol`` unless
    ``n_terms`` is forced.
    """
    if t <= 0.0:
        raise MotionError("t must be > 0")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any((x <= 0.0) | (x >= length)) or np.any((y <= 0.0) | (y >= length)):
        raise MotionError("x, y must lie inside (0, L)")
    ts = t * (math.pi / length) ** 2  # rescaled time: unit-interval rates n^2 ts / 2
    if n_terms is None:
        n = 1
        while math.exp(beta * t) * (2.0 / length) * _series_tail(ts, n) > tail_tol:
            n += 1
    else:
        n = int(n_terms)
        if n < 1:
            raise MotionError("n_terms must be >= 1")
    ns = np.arange(1, n + 1)
    coef = math.exp(beta * t) * (2.0 / length) * np.exp(-ns * ns * ts / 2.0)
    sx = np.sin(np.multiply.outer(x, ns) * math.pi / length)
    sy = np.sin(np.multiply.outer(y, ns) * math.pi / length)
    val = np.einsum("...n,...n->...", sx * coef, sy)
    tail = math.exp(beta * t) * (2.0 / length) * _series_tail(ts, n)
    return IntervalDensity(float(val) if val.ndim == 0 else val, tail, n)


_BRIDGE_RANGE = 6.0  # in units of sigma sqrt(dt); beyond this both corrections skipped


def _bridge_absorb_prob(d0: float, d1: float, sigma2dt: float) -> float:
    return math.exp(-2.0 * d0 * d1 / sigma2dt)


def interval_step_with_absorption(
    x: float, dt: float, rng, length: float = math.pi, sigma: float = 1.0,
) -> float:
    """One Euler step of killed Brownian motion; returns CEMETERY on death.

    If the endpoint stays inside, a Brownian-bridge crossing check is
    applied to the nearer boundary when it is within 6 sigma sqrt(dt);
    the farther boundary's crossing mass is below exp(-72) and skipped.
    """
    if not 0.0 < x < length:
        raise MotionError("x must lie inside (0, L)")
    if dt <= 0.0:
        raise MotionError("dt must be > 0")
    y = x + sigma * math.sqrt(dt) * rng.standard_normal()
    if y <= 0.0 or y >= length:
        return CEMETERY
    guard = _BRIDGE_RANGE * sigma * math.sqrt(dt)
    lo0, lo1 = x, y
    hi0, hi1 = length - x, length - y
    if min(lo0, lo1) <= min(hi0, hi1):
        d0, d1 = lo0, lo1
    else:
        d0, d1 = hi0, hi1
    if min(d0, d1) < guard:
        if rng.random() < _bridge_absorb_prob(d0, d1, sigma * sigma * dt):
            return CEMETERY
    return y


def interval_path_with_absorption(
    x0: float, dts: np.ndarray, rng, length: float = math.pi, sigma: float = 1.0,
) -> tuple[np.ndarray, int]:
    """Vectorized killed-BM path over the given step sizes.

    Returns (positions after each step, absorption step index or -1).
    Positions past the absorbing step are set to CEMETERY.  Absorption
    is attributed to the end of its step.
    """
    n = len(dts)
    if n == 0:
        return np.empty(0), -1
    sqdt = np.sqrt(dts)
    path = x0 + sigma * np.cumsum(sqdt * rng.standard_normal(n))
    outside = (path <= 0.0) | (path >= length)
    exit_idx = int(np.argmax(outside)) if outside.any() else n
    prev = np.concatenate(([x0], path[:-1]))
    lo = np.minimum(prev, path)
    hi = np.minimum(length - prev, length - path)
    d0 = np.where(lo <= hi, prev, length - prev)
    d1 = np.where(lo <= hi, path, length - path)
    guard = _BRIDGE_RANGE * sigma * sqdt
    check = (np.minimum(d0, d1) < guard) & ~outside
    check[exit_idx:] = False
    bridge_idx = n
    if check.any():
        idxs = np.nonzero(check)[0]
        probs = np.exp(-2.0 * d0[idxs] * d1[idxs] / (sigma * sigma * dts[idxs]))
        hits = rng.random(len(idxs)) < probs
        if hits.any():
            bridge_idx = int(idxs[np.argmax(hits)])
    kill = min(exit_idx, bridge_idx)
    if kill < n:
        path[kill:] = CEMETERY
        return path, kill
    return path, -1


# ---------------------------------------------------------------------------
# additive-functional clocks
# ---------------------------------------------------------------------------

def pcaf_increment(segment: PathSegment, rate) -> float:
    """Trapezoid value of int beta(X_s) ds over the segment.

    The clock freezes at absorption: steps with a dead endpoint
    contribute nothing.
    """
    return float(pcaf_cumulative(segment.times, segment.positions, rate)[-1])


def _dead_mask(positions: np.ndarray) -> np.ndarray:
    dead = np.isnan(positions)
    return dead.any(axis=-1) if dead.ndim > 1 else dead


def pcaf_cumulative(times: np.ndarray, positions: np.ndarray, rate) -> np.ndarray:
    """Running trapezoid integral of beta along (times, positions)."""
    if len(times) == 0:
        return np.zeros(0)
    dead = _dead_mask(positions)
    vals = np.asarray(rate.beta(np.nan_to_num(positions)), dtype=float)
    vals = np.where(dead, 0.0, vals)
    alive_step = ~dead[1:] & ~dead[:-1]
    incs = 0.5 * (vals[1:] + vals[:-1]) * np.diff(times) * alive_step
    out = np.empty(len(times))
    out[0] = 0.0
    np.cumsum(incs, out=out[1:])
    return out


def occupation_cumulative(
    times: np.ndarray, positions: np.ndarray, x0: float, eps: float,
) -> np.ndarray:
    """Running trapezoid integral of the window indicator
    1_{(x0 - eps/2, x0 + eps/2)} along the path."""
    if eps <= 0.0:
        raise MotionError("eps must be > 0")
    if len(times) == 0:
        return np.zeros(0)
    ind = (np.abs(positions - x0) < eps / 2.0).astype(float)
    ind[np.isnan(positions)] = 0.0
    incs = 0.5 * (ind[1:] + ind[:-1]) * np.diff(times)
    out = np.empty(len(times))
    out[0] = 0.0
    np.cumsum(incs, out=out[1:])
    return out


def local_time_pcaf(segment: PathSegment, x0: float, eps: float, q: float = 1.0) -> float:
    """eps-window approximation of q times the local time at x0:
    q * occupation((x0 - eps/2, x0 + eps/2)) / eps, trapezoid-accumulated.
    Bias is O(eps) on diffusive paths (and the approximation diverges on
    paths sitting exactly at x0)."""
    occ = occupation_cumulative(segment.times, segment.positions, x0, eps)
    return q * float(occ[-1]) / eps


def rate_cumulative(model, times: np.ndarray, positions: np.ndarray, weight=None) -> np.ndarray:
    """Running value of the model's branching clock along a path.

    ``weight``: optional position function multiplying the rate (used for
    the (Q-1)- and Q-weighted clocks).  Combines the density part and the
    eps-window local-time part when the rate has a point mass.
    """
    rate = model.rate
    out = None
    if rate.has_function_part:
        if weight is None:
            out = pcaf_cumulative(times, positions, rate)
        else:
            dead = _dead_mask(positions)
            w = np.asarray(weight(np.nan_to_num(positions)), dtype=float)
            vals = np.asarray(rate.beta(np.nan_to_num(positions)), dtype=float) * w
            vals = np.where(dead, 0.0, vals)
            alive_step = ~dead[1:] & ~dead[:-1]
            incs = 0.5 * (vals[1:] + vals[:-1]) * np.diff(times) * alive_step
            out = np.empty(len(times))
            out[0] = 0.0
            np.cumsum(incs, out=out[1:])
    if rate.has_point_part:
        occ = occupation_cumulative(times, positions, rate.point_x0, model.local_time_eps)
        wq = rate.point_q / model.local_time_eps
        if weight is not None:
            wq *= float(np.asarray(weight(rate.point_x0)))
        out = wq * occ if out is None else out + wq * occ
    if out is None:
        out = np.zeros(len(times))
    return out

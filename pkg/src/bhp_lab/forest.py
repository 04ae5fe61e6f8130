"""Forward simulation of the branching process under the original measure.

Each particle carries an independent Exp(1) threshold and splits when the
accumulated branching clock first reaches it; at a split it is replaced
in place by its offspring, absorbed particles die childless, and
everything is truncated at the horizon.  Particles are processed
breadth-first in label order, so a (model, x, T, seed) tuple reproduces
the same forest bit-for-bit.

Positions along a lifetime are simulated in adaptive blocks: exact OU
transitions (AR(1) runs plus one partial step per block boundary) or
Euler steps with the Brownian-bridge absorption check for the killed
interval motion.  Requested sample times are inserted as exact step
boundaries, so time-t snapshots carry no interpolation error.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .model import IntervalMotion, ModelSpec, OuMotion, SpectralTriple
from .motion import (
    CEMETERY,
    PathSegment,
    interval_path_with_absorption,
    ou_step,
    rate_cumulative,
)

Label = tuple[int, ...]
ROOT: Label = ()

_TIME_EPS = 1e-12


class CapacityError(RuntimeError):
    """Population cap exceeded; the partial forest is discarded."""


class SnapshotError(ValueError):
    pass


@dataclass(eq=False)
class Node:
    label: Label
    birth_time: float
    end_time: float
    birth_position: float
    end_position: float       # CEMETERY if absorbed
    offspring_count: int      # 0 unless cause == "fission"
    cause: str                # fission | absorbed | horizon
    path: PathSegment | None = None


@dataclass(eq=False)
class Forest:
    nodes: dict[Label, Node]
    horizon: float
    x0: float
    model: ModelSpec
    seed_record: str = ""
    samples: dict[float, tuple[list[Label], list[float]]] = field(default_factory=dict)

    def children(self, label: Label) -> list[Label]:
        n = self.nodes[label].offspring_count
        return [label + (i,) for i in range(1, n + 1)]


@dataclass(eq=False)
class Snapshot:
    """Particles alive at time t: b_u <= t < zeta_u with position in E."""

    time: float
    labels: tuple[Label, ...]
    positions: np.ndarray


# ---------------------------------------------------------------------------
# single-lifetime simulation
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class _Segment:
    times: np.ndarray
    positions: np.ndarray
    cause: str                 # fission | absorbed | horizon
    end_time: float
    end_position: float
    hit_samples: list[tuple[float, float]]   # (sample time, position)


def _block_plan(t_cur: float, t_stop: float, dt: float) -> tuple[int, float]:
    """Full dt steps and final partial step covering (t_cur, t_stop]."""
    span = t_stop - t_cur
    n_full = int(math.floor(span / dt + _TIME_EPS))
    partial = span - n_full * dt
    if partial < 1e-9 * max(dt, 1.0):
        partial = 0.0
    return n_full, partial


def _ou_block(x0, n_full: int, dt: float, partial: float, c: float, sigma: float, rng):
    from scipy.signal import lfilter

    phi = math.exp(-c * dt)
    sd = sigma * math.sqrt((1.0 - phi * phi) / (2.0 * c))
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 0:
        noise = sd * rng.standard_normal(n_full)
        path, _ = lfilter([1.0], [1.0, -phi], noise, zi=np.array([phi * float(x0)]))
    else:
        noise = sd * rng.standard_normal((n_full, x0.size))
        path, _ = lfilter([1.0], [1.0, -phi], noise, axis=0, zi=(phi * x0)[None, :])
    if partial > 0.0:
        last = path[-1] if n_full else x0
        extra = ou_step(last, partial, c, sigma, rng)
        path = np.concatenate([path, np.asarray(extra, dtype=float).reshape((1,) + x0.shape)])
    return path


def _simulate_lifetime(
    model: ModelSpec, x: float, b: float, horizon: float, rng,
    cuts: list[float], sample_set: set[float], keep_path: bool,
) -> _Segment:
    """Simulate one particle from birth to fission/absorption/horizon."""
    motion = model.motion
    dt = model.dt
    rate = model.rate
    threshold = rng.exponential()
    t_cur, x_cur, a_cur = b, x, 0.0
    times_parts: list[np.ndarray] = []
    pos_parts: list[np.ndarray] = []
    hit: list[tuple[float, float]] = []
    if any(abs(b - s) <= _TIME_EPS for s in sample_set):
        hit.append((b, x))
    cut_iter = [ct for ct in cuts if ct > b + _TIME_EPS]
    ci = 0
    rate_floor = max(rate.a, 0.05)
    is_ou = isinstance(motion, OuMotion)
    scalar = np.ndim(x) == 0
    # clocks with no point mass and scalar state take a lean inline path
    fast_clock = not rate.has_point_part and scalar
    while t_cur < horizon - _TIME_EPS:
        t_next_cut = cut_iter[ci] if ci < len(cut_iter) else horizon
        rate_now = rate_floor
        if rate.has_function_part:
            if scalar:
                rate_now = max(rate.b * x_cur * x_cur + rate.a, rate_floor)
            else:
                r2 = float(np.sum(np.square(x_cur)))
                rate_now = max(rate.b * r2 + rate.a, rate_floor)
        expected = (threshold - a_cur) / rate_now if threshold > a_cur else dt
        block_len = min(max(1.5 * expected, 10.0 * dt), t_next_cut - t_cur)
        at_cut = block_len >= t_next_cut - t_cur - _TIME_EPS
        if at_cut:
            t_blk = t_next_cut
            n_full, partial = _block_plan(t_cur, t_blk, dt)
        else:
            # interior blocks stay on the whole-step grid: no partial step
            n_full = max(int(block_len / dt), 1)
            partial = 0.0
            t_blk = t_cur + n_full * dt
        if n_full == 0 and partial == 0.0:
            t_cur = t_blk
            if at_cut:
                ci += 1
                if t_cur < horizon - _TIME_EPS and any(
                    abs(t_cur - s) <= _TIME_EPS for s in sample_set
                ):
                    hit.append((t_cur, x_cur))
            continue
        kill = -1
        if is_ou:
            path = _ou_block(x_cur, n_full, dt, partial, motion.c, motion.sigma, rng)
            if partial > 0.0:
                dts = np.full(n_full + 1, dt)
                dts[-1] = partial
            else:
                dts = np.full(n_full, dt)
        else:
            dts = np.full(n_full, dt)
            if partial > 0.0:
                dts = np.append(dts, partial)
            path, kill = interval_path_with_absorption(
                x_cur, dts, rng, length=motion.length, sigma=motion.sigma)
        blk_times = t_cur + np.cumsum(dts)
        if at_cut:
            blk_times[-1] = t_next_cut  # land exactly on the cut
        if fast_clock:
            if rate.has_function_part:
                if rate.b == 0.0:
                    bv = np.full(len(path), rate.a)
                else:
                    bv = rate.b * path * path + rate.a
                left = np.empty_like(bv)
                left[0] = rate.b * x_cur * x_cur + rate.a
                left[1:] = bv[:-1]
                if kill >= 0:
                    bv[kill:] = 0.0
                    left[kill:] = 0.0
                a_blk = a_cur + np.cumsum(0.5 * (left + bv) * dts)
            else:
                a_blk = np.full(len(path), a_cur)
        else:
            full_t = np.concatenate([[t_cur], blk_times])
            if scalar:
                full_x = np.concatenate([[x_cur], path])
            else:
                full_x = np.vstack([np.asarray(x_cur)[None, :], path])
            a_blk = a_cur + rate_cumulative(model, full_t, full_x, None)[1:]
        limit = len(path) if kill < 0 else kill  # clock frozen in the killing step
        cross = int(np.searchsorted(a_blk[:limit], threshold)) if limit > 0 else limit
        if cross < limit:
            # fission inside the step ending at blk_times[cross]
            a_lo = a_cur if cross == 0 else float(a_blk[cross - 1])
            t_lo = t_cur if cross == 0 else float(blk_times[cross - 1])
            frac = (threshold - a_lo) / max(float(a_blk[cross]) - a_lo, 1e-300)
            zeta = t_lo + frac * (float(blk_times[cross]) - t_lo)
            end_pos = path[cross]
            times_parts.append(blk_times[: cross + 1])
            pos_parts.append(path[: cross + 1])
            seg = _finalize(b, x, times_parts, pos_parts, keep_path)
            seg.cause, seg.end_time, seg.end_position = "fission", float(zeta), end_pos
            seg.hit_samples = hit
            return seg
        if kill >= 0:
            times_parts.append(blk_times[: kill + 1])
            pos_parts.append(path[: kill + 1])
            zeta = float(blk_times[kill])
            seg = _finalize(b, x, times_parts, pos_parts, keep_path)
            seg.cause, seg.end_time, seg.end_position = "absorbed", zeta, CEMETERY
            seg.hit_samples = hit
            return seg
        times_parts.append(blk_times)
        pos_parts.append(path)
        a_cur = float(a_blk[-1])
        x_cur = path[-1]
        t_cur = float(blk_times[-1])
        if at_cut:
            ci += 1
            if t_cur < horizon - _TIME_EPS and any(abs(t_cur - s) <= _TIME_EPS for s in sample_set):
                hit.append((t_cur, x_cur))
    seg = _finalize(b, x, times_parts, pos_parts, keep_path)
    seg.cause, seg.end_time, seg.end_position = "horizon", horizon, x_cur
    # horizon itself counts as a sample time when requested
    if any(abs(horizon - s) <= _TIME_EPS for s in sample_set):
        seg.hit_samples = hit + [(horizon, x_cur)]
    else:
        seg.hit_samples = hit
    return seg


def _finalize(b, x, times_parts, pos_parts, keep_path) -> _Segment:
    times = np.concatenate([[b]] + times_parts) if times_parts else np.array([b])
    if np.ndim(x) == 0:
        positions = np.concatenate([[x]] + pos_parts) if pos_parts else np.array([float(x)])
    else:
        positions = np.vstack([np.asarray(x)[None, :]] + pos_parts) if pos_parts \
            else np.asarray(x)[None, :]
    return _Segment(times, positions, "", float(times[-1]),
                    positions[-1] if np.ndim(x) else float(positions[-1]), [])


# ---------------------------------------------------------------------------
# forest construction and observables
# ---------------------------------------------------------------------------

def simulate_forest(
    model: ModelSpec, x: float, horizon: float, rng, *,
    population_cap: int = 1_000_000,
    record_paths: bool = False,
    sample_times=(),
    label_prefix: Label = ROOT,
    birth_time: float = 0.0,
    seed_record: str = "",
) -> Forest:
    """Simulate the branching process started from one particle at x.

    ``sample_times`` are inserted as exact step boundaries and the alive
    (label, position) pairs at those times are cached on the forest; full
    paths are stored only when ``record_paths`` is set.
    """
    if horizon <= birth_time:
        raise ValueError("horizon must exceed the birth time")
    if isinstance(model.motion, IntervalMotion) and not 0.0 < x < model.motion.length:
        raise ValueError("initial position outside (0, L)")
    sample_set = {float(s) for s in sample_times}
    cuts = sorted(s for s in sample_set if birth_time < s <= horizon + _TIME_EPS)
    if not cuts or abs(cuts[-1] - horizon) > _TIME_EPS:
        cuts.append(horizon)
    samples: dict[float, tuple[list[Label], list[float]]] = {
        float(s): ([], []) for s in sample_set if birth_time - _TIME_EPS <= s <= horizon + _TIME_EPS
    }
    nodes: dict[Label, Node] = {}
    queue: deque[tuple[Label, float, float]] = deque([(label_prefix, birth_time, x)])
    while queue:
        if len(nodes) >= population_cap:
            raise CapacityError(f"population cap {population_cap} exceeded")
        label, b, pos = queue.popleft()
        seg = _simulate_lifetime(model, pos, b, horizon, rng, cuts, sample_set, record_paths)
        count = 0
        if seg.cause == "fission":
            count = model.offspring.sample(seg.end_position, rng)
            for i in range(1, count + 1):
                queue.append((label + (i,), seg.end_time, seg.end_position))
        nodes[label] = Node(
            label=label,
            birth_time=b,
            end_time=seg.end_time,
            birth_position=pos,
            end_position=seg.end_position,
            offspring_count=count,
            cause=seg.cause,
            path=PathSegment(seg.times, seg.positions) if record_paths else None,
        )
        for s, p in seg.hit_samples:
            key = _sample_key(samples, s)
            if key is not None:
                samples[key][0].append(label)
                samples[key][1].append(p)
    return Forest(nodes=nodes, horizon=horizon, x0=x, model=model,
                  seed_record=seed_record, samples=samples)


def _sample_key(samples: dict, t: float):
    if t in samples:
        return t
    for key in samples:
        if abs(key - t) <= _TIME_EPS:
            return key
    return None


def snapshot(forest: Forest, t: float) -> Snapshot:
    """Particles alive at t (positions at the cemetery are excluded)."""
    if t < -_TIME_EPS or t > forest.horizon + _TIME_EPS:
        raise SnapshotError(f"t = {t!r} outside [0, {forest.horizon!r}]")
    key = _sample_key(forest.samples, t)
    if key is not None:
        labels, pos = forest.samples[key]
        alive = [(l, p) for l, p in zip(labels, pos) if not np.any(np.isnan(p))]
        return Snapshot(time=t,
                        labels=tuple(l for l, _ in alive),
                        positions=np.asarray([p for _, p in alive], dtype=float))
    labels, positions = [], []
    for label, node in forest.nodes.items():
        if node.birth_time - _TIME_EPS <= t < node.end_time - _TIME_EPS or (
            node.birth_time - _TIME_EPS <= t and node.cause == "horizon"
            and t <= node.end_time + _TIME_EPS
        ):
            if node.path is None:
                if abs(t - node.birth_time) <= _TIME_EPS:
                    p = node.birth_position
                elif node.cause == "horizon" and abs(t - node.end_time) <= _TIME_EPS:
                    p = node.end_position
                else:
                    raise SnapshotError(
                        f"positions at t = {t!r} unavailable: simulate with "
                        "record_paths=True or request t in sample_times")
            else:
                p = node.path.position_at(t)
            if not np.any(np.isnan(p)):
                labels.append(label)
                positions.append(p)
    return Snapshot(time=t, labels=tuple(labels),
                    positions=np.asarray(positions, dtype=float))


def weigh(snap: Snapshot, f) -> float:
    """Linear functional sum_{u alive} f(X_u(t)); empty snapshot gives 0."""
    if len(snap.labels) == 0:
        return 0.0
    return float(np.sum(f(snap.positions)))


def martingale_value(forest: Forest, t: float, spectral: SpectralTriple) -> float:
    """M_t = e^{lambda_1 t} sum_u h(X_u(t))."""
    return math.exp(spectral.lambda1 * t) * weigh(snapshot(forest, t), spectral.h)


def check_structure(forest: Forest) -> None:
    """Debug traversal asserting the structural invariants."""
    assert ROOT in forest.nodes or forest.nodes, "root missing"
    root_label = min(forest.nodes, key=len)
    for label, node in forest.nodes.items():
        assert node.birth_time < node.end_time + _TIME_EPS
        if label != root_label:
            parent = forest.nodes[label[:-1]]
            assert parent.cause == "fission"
            assert 1 <= label[-1] <= parent.offspring_count
            assert abs(parent.end_time - node.birth_time) <= _TIME_EPS
            assert np.allclose(parent.end_position, node.birth_position, equal_nan=True)
        if node.cause == "fission":
            for i in range(1, node.offspring_count + 1):
                assert label + (i,) in forest.nodes, "missing child"
        else:
            assert node.offspring_count == 0

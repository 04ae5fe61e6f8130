"""Simulation under the size-biased measure with a distinguished spine.

The spine moves as the transformed (conservative) motion, its fission
clock runs at the accelerated rate measure Q(x) h(x)^2 mu(dx) (the time
rate Q beta along the path when mu = beta m, and the Q(x0)-weighted
local-time clock for a point mass), offspring counts at spine fissions
are size-biased, the next spine node is chosen uniformly among the
children, and the remaining children root independent subtrees under
the original measure.

The ledger keeps the three positive martingales of the measure change,
all normalized by h(x0) so Z(0) = 1:

    eta(t)  = exp(lambda_1 t + A_t^{(Q-1)mu}) h(X~_t) / h(x0)
    eta~(t) = exp(lambda_1 t) (h(X~_t)/h(x0)) prod_{v < node_t} A_v
    Z(t)    = exp(lambda_1 t) X_t(h) / h(x0)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import (
    GridFunction,
    IntervalMotion,
    ModelSpec,
    OuMotion,
    SpectralTriple,
    size_biased,
)
from .motion import PathSegment, ou_path, ou_step, rate_cumulative
from .forest import (
    CapacityError,
    Forest,
    Label,
    Node,
    ROOT,
    _TIME_EPS,
    simulate_forest,
    snapshot,
    weigh,
)


@dataclass(eq=False)
class WeightLedger:
    times: np.ndarray
    eta: np.ndarray
    eta_tilde: np.ndarray
    Z: np.ndarray
    pcaf_qm1: np.ndarray   # A_t^{(Q-1)mu} along the spine

    def index_of(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(float(self.times[i]) - t) > 1e-9:
            raise ValueError(f"time {t!r} not in ledger sample times")
        return i

    def z_at(self, t: float) -> float:
        return float(self.Z[self.index_of(t)])


@dataclass(eq=False)
class SpineTree:
    forest: Forest
    spine_labels: tuple[Label, ...]
    spine_path: PathSegment
    spine_fission_times: np.ndarray
    spine_fission_positions: np.ndarray
    spine_offspring_counts: np.ndarray
    ledger: WeightLedger

    def n_fissions(self, t: float) -> int:
        return int(np.searchsorted(self.spine_fission_times, t + _TIME_EPS))


# ---------------------------------------------------------------------------
# transformed-motion path samplers (conservative)
# ---------------------------------------------------------------------------

def _ou_h_path(x0: float, horizon: float, dt: float, alpha: float, cuts, rng):
    """Exact transformed-OU path on the dt grid with cut times inserted."""
    times = [0.0]
    t_cur = 0.0
    for ct in sorted(set(list(cuts) + [horizon])):
        if ct <= t_cur + _TIME_EPS or ct > horizon + _TIME_EPS:
            continue
        n_full = int(math.floor((ct - t_cur) / dt + _TIME_EPS))
        ts = t_cur + dt * np.arange(1, n_full + 1)
        if n_full and ct - ts[-1] < 1e-9 * dt:
            ts[-1] = ct
        elif ct - (ts[-1] if n_full else t_cur) > _TIME_EPS:
            ts = np.append(ts, ct)
        times.extend(ts.tolist())
        t_cur = ct
    times = np.asarray(times)
    positions = np.empty_like(times)
    positions[0] = x0
    dts = np.diff(times)
    i = 0
    while i < len(dts):
        run = i + 1
        while run < len(dts) and abs(dts[run] - dts[i]) < 1e-12:
            run += 1
        if run - i > 1:
            positions[i + 1: run + 1] = ou_path(positions[i], run - i, dts[i], alpha, 1.0, rng)
        else:
            positions[i + 1] = ou_step(positions[i], dts[i], alpha, 1.0, rng)
        i = run
    return times, positions


_BOUNDARY_ZONE = 0.15   # refine the Euler step this close to the interval ends
_FINE_DT = 1e-4


def _interval_h_path(x0: float, horizon: float, dt: float, length: float,
                     drift, cuts, rng):
    """Euler path of the transformed interval motion.

    ``drift`` is (log h)'; for the catalog ground state this is
    (pi/L) cot(pi x / L).  The transformed process never reaches the
    boundary, so steps landing outside (0, L) are resampled; the step
    size drops to 1e-4 inside the boundary zone.
    """
    cut_arr = sorted(ct for ct in set(list(cuts) + [horizon]) if 0.0 < ct <= horizon + _TIME_EPS)
    times = [0.0]
    positions = [x0]
    t_cur, x_cur = 0.0, x0
    ci = 0
    block = 256
    noise = rng.standard_normal(block)
    ni = 0
    while ci < len(cut_arr):
        next_cut = cut_arr[ci]
        near = min(x_cur, length - x_cur) < _BOUNDARY_ZONE
        step = min(_FINE_DT if near else dt, next_cut - t_cur)
        mu = drift(x_cur)
        sq = math.sqrt(step)
        for _ in range(64):
            if ni >= block:
                noise = rng.standard_normal(block)
                ni = 0
            y = x_cur + mu * step + sq * noise[ni]
            ni += 1
            if 0.0 < y < length:
                break
        else:
            y = x_cur  # pathological boundary squeeze; hold for one step
        if next_cut - t_cur - step < 1e-9 * max(step, 1e-12):
            t_cur = next_cut
        else:
            t_cur = t_cur + step
        x_cur = y
        times.append(t_cur)
        positions.append(x_cur)
        if t_cur >= next_cut - _TIME_EPS:
            ci += 1
    return np.asarray(times), np.asarray(positions)


def _interval_drift(model: ModelSpec, spectral: SpectralTriple):
    length = model.motion.length
    if isinstance(spectral.h, GridFunction):
        xs = spectral.h.xs
        with np.errstate(divide="ignore"):
            logh = np.log(np.maximum(spectral.h.ys, 1e-300))
        dlog = np.gradient(logh, xs)

        def drift(x, _xs=xs, _d=dlog):
            return float(np.interp(x, _xs, _d))

        return drift
    scale = math.pi / length

    def drift(x):
        return scale / math.tan(scale * x)

    return drift


def _q_weight(model: ModelSpec, shift: float = 0.0):
    """Vectorized x -> Q(x) + shift (shift=-1 gives the (Q-1) weight)."""

    def weight(y):
        return model.offspring.mean_vec(y) + shift

    return weight


# ---------------------------------------------------------------------------
# spine tree simulation
# ---------------------------------------------------------------------------

def simulate_spine_tree(
    model: ModelSpec, spectral: SpectralTriple, x: float, horizon: float, rng, *,
    population_cap: int = 1_000_000,
    record_paths: bool = False,
    sample_times=(),
) -> SpineTree:
    """Simulate the size-biased tree with its distinguished spine.

    The spine is conservative, so it is always alive at the horizon.
    Sample times (the horizon is always included) become exact path
    grid points and ledger evaluation times.
    """
    if horizon <= 0.0:
        raise ValueError("horizon must be positive")
    sample_set = sorted({float(s) for s in sample_times} | {horizon})

    if isinstance(model.motion, OuMotion):
        if model.motion.d != 1:
            raise NotImplementedError("spine simulation is 1-D")
        # catalog OU: transformed motion is OU with drift rate alpha = gap
        times, positions = _ou_h_path(x, horizon, model.dt, spectral.gap, sample_set, rng)
    elif isinstance(model.motion, IntervalMotion):
        times, positions = _interval_h_path(
            x, horizon, model.dt, model.motion.length,
            _interval_drift(model, spectral), sample_set, rng)
    else:
        raise NotImplementedError(type(model.motion))

    # accelerated clock along the spine, then Exp(1) threshold crossings
    accel = rate_cumulative(model, times, positions, weight=_q_weight(model))
    fission_times, fission_positions, fission_counts = [], [], []
    target = rng.exponential()
    total = float(accel[-1])
    while target <= total:
        j = int(np.searchsorted(accel, target))
        a_lo = float(accel[j - 1])
        frac = (target - a_lo) / max(float(accel[j]) - a_lo, 1e-300)
        zeta = float(times[j - 1]) + frac * (float(times[j]) - float(times[j - 1]))
        if zeta < horizon - 1e-9:
            pos = float(positions[j])
            fission_times.append(zeta)
            fission_positions.append(pos)
            fission_counts.append(size_biased(model.offspring, pos).sample(pos, rng))
        target += rng.exponential()

    # assemble: spine nodes plus off-spine subtrees under the original law
    nodes: dict[Label, Node] = {}
    samples: dict[float, tuple[list[Label], list[float]]] = {s: ([], []) for s in sample_set}
    spine_labels = [ROOT]
    birth, birth_pos = 0.0, x
    for zeta, pos, count in zip(fission_times, fission_positions, fission_counts):
        u = spine_labels[-1]
        nodes[u] = Node(label=u, birth_time=birth, end_time=zeta,
                        birth_position=birth_pos, end_position=pos,
                        offspring_count=count, cause="fission",
                        path=_slice_path(times, positions, birth, zeta) if record_paths else None)
        _record_samples(samples, u, times, positions, birth, zeta, False)
        child = int(rng.integers(1, count + 1))
        for idx in range(1, count + 1):
            if idx == child:
                continue
            sub = simulate_forest(
                model, pos, horizon, rng,
                population_cap=population_cap, record_paths=record_paths,
                sample_times=sample_set, label_prefix=u + (idx,), birth_time=zeta)
            if len(nodes) + len(sub.nodes) > population_cap:
                raise CapacityError(f"population cap {population_cap} exceeded")
            nodes.update(sub.nodes)
            for s, (ls, ps) in sub.samples.items():
                key = _find_key(samples, s)
                if key is not None:
                    samples[key][0].extend(ls)
                    samples[key][1].extend(ps)
        spine_labels.append(u + (child,))
        birth, birth_pos = zeta, pos
    tip = spine_labels[-1]
    nodes[tip] = Node(label=tip, birth_time=birth, end_time=horizon,
                      birth_position=birth_pos, end_position=float(positions[-1]),
                      offspring_count=0, cause="horizon",
                      path=_slice_path(times, positions, birth, horizon) if record_paths else None)
    _record_samples(samples, tip, times, positions, birth, horizon, True)

    forest = Forest(nodes=nodes, horizon=horizon, x0=x, model=model, samples=samples)
    spine_path = PathSegment(times, positions)
    ledger = _build_ledger(model, spectral, forest, spine_path,
                           np.asarray(fission_times), np.asarray(fission_counts), sample_set)
    return SpineTree(
        forest=forest,
        spine_labels=tuple(spine_labels),
        spine_path=spine_path,
        spine_fission_times=np.asarray(fission_times),
        spine_fission_positions=np.asarray(fission_positions),
        spine_offspring_counts=np.asarray(fission_counts, dtype=int),
        ledger=ledger,
    )


def _slice_path(times, positions, lo, hi) -> PathSegment:
    mask = (times >= lo - _TIME_EPS) & (times <= hi + _TIME_EPS)
    ts, ps = times[mask], positions[mask]
    if not len(ts) or ts[0] > lo + _TIME_EPS:
        j = max(int(np.searchsorted(times, lo + _TIME_EPS)) - 1, 0)
        ts = np.concatenate([[lo], ts])
        ps = np.concatenate([[positions[j]], ps])
    if ts[-1] < hi - _TIME_EPS:
        j = min(int(np.searchsorted(times, hi + _TIME_EPS)) - 1, len(positions) - 1)
        ts = np.concatenate([ts, [hi]])
        ps = np.concatenate([ps, [positions[max(j, 0)]]])
    return PathSegment(ts, ps)


def _record_samples(samples, label, times, positions, birth, death, inclusive_end) -> None:
    for s in samples:
        alive = birth - _TIME_EPS <= s < death - _TIME_EPS
        if inclusive_end:
            alive = alive or abs(s - death) <= _TIME_EPS
        if alive:
            j = int(np.searchsorted(times, s + _TIME_EPS)) - 1
            samples[s][0].append(label)
            samples[s][1].append(float(positions[max(j, 0)]))


def _find_key(samples, t):
    if t in samples:
        return t
    for key in samples:
        if abs(key - t) <= _TIME_EPS:
            return key
    return None


def _build_ledger(model, spectral, forest, spine_path, fission_times, fission_counts,
                  sample_set) -> WeightLedger:
    lam1 = spectral.lambda1
    h = spectral.h
    hx0 = float(np.asarray(h(forest.x0)))
    qm1 = rate_cumulative(model, spine_path.times, spine_path.positions,
                          weight=_q_weight(model, shift=-1.0))
    ts = np.asarray(sorted(sample_set))
    eta = np.empty(len(ts))
    eta_t = np.empty(len(ts))
    zz = np.empty(len(ts))
    pc = np.empty(len(ts))
    for i, t in enumerate(ts):
        j = max(int(np.searchsorted(spine_path.times, t + _TIME_EPS)) - 1, 0)
        xt = float(spine_path.positions[j])
        a_t = float(qm1[j])
        n_t = int(np.searchsorted(fission_times, t + _TIME_EPS))
        prod = float(np.prod(fission_counts[:n_t])) if n_t else 1.0
        ht = float(np.asarray(h(xt)))
        eta[i] = math.exp(lam1 * t + a_t) * ht / hx0
        eta_t[i] = math.exp(lam1 * t) * ht / hx0 * prod
        zz[i] = math.exp(lam1 * t) * weigh(snapshot(forest, t), h) / hx0
        pc[i] = a_t
    return WeightLedger(times=ts, eta=eta, eta_tilde=eta_t, Z=zz, pcaf_qm1=pc)


# ---------------------------------------------------------------------------
# spine functionals
# ---------------------------------------------------------------------------

def fission_count_given_path(spine_path: PathSegment, model: ModelSpec,
                             spectral: SpectralTriple | None = None) -> float:
    """Conditional fission-count mean given the spine path: the trapezoid
    value of the accelerated clock int Q(X~_s) beta(X~_s) ds (plus the
    Q-weighted local-time part for a point-mass rate).  Given the path,
    the fission count by t is Poisson with this parameter."""
    accel = rate_cumulative(model, spine_path.times, spine_path.positions,
                            weight=_q_weight(model))
    return float(accel[-1])


def spine_decomposition(tree: SpineTree, t: float, spectral: SpectralTriple) -> float:
    """Conditional mean of M_t given the full spine knowledge, divided by
    h(x0) to match the ledger normalization (so it pairs with Z, not M):

        [ e^{l1 t} h(X~_t)
          + sum_{fissions <= t} (A_u - 1) e^{l1 zeta_u} h(X~_{zeta_u}) ] / h(x0)
    """
    if t > tree.forest.horizon + _TIME_EPS:
        raise ValueError("t beyond the simulated horizon")
    lam1 = spectral.lambda1
    h = spectral.h
    xt = tree.spine_path.position_at(t)
    total = math.exp(lam1 * t) * float(np.asarray(h(xt)))
    n_t = tree.n_fissions(t)
    for zeta, pos, count in zip(tree.spine_fission_times[:n_t],
                                tree.spine_fission_positions[:n_t],
                                tree.spine_offspring_counts[:n_t]):
        total += (count - 1.0) * math.exp(lam1 * zeta) * float(np.asarray(h(pos)))
    return total / float(np.asarray(h(tree.forest.x0)))


def importance_estimate(G, model: ModelSpec, spectral: SpectralTriple, x: float,
                        horizon: float, n: int, rng, *, sample_times=()) -> tuple[float, float]:
    """Estimate the original-measure mean of G as the average of G/Z(T)
    over n size-biased trees (G must be a horizon-measurable functional
    of the forest part).  Returns (estimate, standard error)."""
    vals = np.empty(n)
    for i in range(n):
        tree = simulate_spine_tree(model, spectral, x, horizon, rng,
                                   sample_times=sample_times)
        vals[i] = G(tree.forest) / tree.ledger.z_at(horizon)
    se = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return float(vals.mean()), se

"""Statistical experiments exercising the limit theorems at desk scale.

Each experiment simulates replicated trees with per-replica random
streams, compares Monte Carlo estimates against closed-form or
quadrature oracles at the 3-standard-error level, and returns a
structured report: every numeric comparison records the oracle, its
provenance tag, the tolerance, and the achieved deviation.  Reports are
reproducible bit-for-bit from (config, seed) for any worker count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import spectral as spec_mod
from .forest import simulate_forest, snapshot, weigh, martingale_value
from .model import ModelSpec, OuMotion, SpectralTriple
from .rng import map_replicas
from .spine import fission_count_given_path, simulate_spine_tree, spine_decomposition


class DominationError(ValueError):
    """Test function is not dominated by the declared multiple of h."""


@dataclass(eq=False)
class ReportRow:
    statistic: str
    estimate: float
    verdict: str                 # pass | fail | info | hypothesis-not-met
    t: float | None = None
    stderr: float | None = None
    oracle: float | None = None
    provenance: str | None = None
    tolerance: float | None = None
    deviation: float | None = None


@dataclass(eq=False)
class ExperimentReport:
    name: str
    model_id: str
    base_seed: int
    sample_sizes: dict
    rows: list
    hypothesis_met: bool = True
    notes: list = field(default_factory=list)
    series: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.verdict != "fail" for r in self.rows)


def _row_3se(statistic, estimate, se, oracle, provenance, t=None, extra_tol=0.0,
             se_mult=3.0) -> ReportRow:
    tol = se_mult * se + extra_tol
    dev = abs(estimate - oracle)
    return ReportRow(statistic=statistic, t=t, estimate=estimate, stderr=se,
                     oracle=oracle, provenance=provenance, tolerance=tol,
                     deviation=dev, verdict="pass" if dev <= tol else "fail")


# ---------------------------------------------------------------------------
# test functions f and their inner products
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TestFunction:
    """f on E with a recorded domination constant c (f <= c h where required)."""

    __test__ = False           # mathematical test function, not a pytest item

    kind: str                  # h | one | h_indicator | indicator
    lo: float = -math.inf
    hi: float = math.inf
    c: float = 1.0
    spectral: SpectralTriple | None = None

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "h":
            return np.asarray(self.spectral.h(x))
        if self.kind == "one":
            return np.ones(x.shape) if x.shape else 1.0
        window = (x >= self.lo) & (x <= self.hi)
        if self.kind == "h_indicator":
            return np.where(window, np.asarray(self.spectral.h(x)), 0.0)
        if self.kind == "indicator":
            return window.astype(float)
        raise ValueError(f"unknown test function kind {self.kind!r}")


def make_test_function(desc: dict, spectral: SpectralTriple) -> TestFunction:
    allowed = {"kind", "lo", "hi", "c"}
    unknown = set(desc) - allowed
    if unknown:
        raise ValueError(f"unknown test-function keys {sorted(unknown)}")
    return TestFunction(kind=desc.get("kind", "h"),
                        lo=float(desc.get("lo", -math.inf)),
                        hi=float(desc.get("hi", math.inf)),
                        c=float(desc.get("c", 1.0)),
                        spectral=spectral)


def check_domination(f: TestFunction, model: ModelSpec, spectral: SpectralTriple,
                     n: int = 4001) -> None:
    nodes, _ = spec_mod.mtilde_quadrature(model, spectral, n)
    ratio = np.asarray(f(nodes)) / np.asarray(spectral.h(nodes))
    worst = float(np.max(ratio))
    if worst > f.c * (1.0 + 1e-9):
        raise DominationError(
            f"f/h reaches {worst:.6g} on the state space but the declared "
            f"domination constant is c = {f.c:g}")


def mtilde_mass(model: ModelSpec, spectral: SpectralTriple, lo: float, hi: float) -> float:
    """Closed-form mtilde((lo, hi)) for the catalog models."""
    if isinstance(model.motion, OuMotion):
        alpha = spectral.gap
        s = math.sqrt(alpha)
        a = -math.inf if lo == -math.inf else math.erf(s * lo)
        b = math.inf if hi == math.inf else math.erf(s * hi)
        b = 1.0 if b == math.inf else b
        a = -1.0 if a == -math.inf else a
        return 0.5 * (b - a)
    length = model.motion.length
    lo, hi = max(lo, 0.0), min(hi, length)
    if hi <= lo:
        return 0.0
    g = lambda y: y / length - math.sin(2.0 * math.pi * y / length) / (2.0 * math.pi)
    return g(hi) - g(lo)


def inner_fh(f: TestFunction, model: ModelSpec, spectral: SpectralTriple) -> float:
    """<f, h> = int (f/h) dmtilde (closed form for the h-window kinds)."""
    if f.kind == "h":
        return 1.0
    if f.kind == "h_indicator":
        return mtilde_mass(model, spectral, f.lo, f.hi)
    nodes, weights = spec_mod.mtilde_quadrature(model, spectral, 20001)
    return float(np.asarray(f(nodes)) / np.asarray(spectral.h(nodes)) @ weights)


# ---------------------------------------------------------------------------
# replica workers (top level: picklable for the worker pool)
# ---------------------------------------------------------------------------

def _martingale_replica(payload, idx, rng):
    model, spectral, x, ts, delta = payload
    forest = simulate_forest(model, x, max(ts), rng, sample_times=tuple(ts))
    ms = [martingale_value(forest, t, spectral) for t in ts]
    return ms + [1.0 if ms[-1] > delta else 0.0]


def _wlln_replica(payload, idx, rng):
    model, spectral, x, f, t_grid, t_max = payload
    forest = simulate_forest(model, x, t_max, rng,
                             sample_times=tuple(t_grid) + (t_max,))
    lam1 = spectral.lambda1
    vals = [math.exp(lam1 * t) * weigh(snapshot(forest, t), f) for t in t_grid]
    raw_last = weigh(snapshot(forest, t_max), f)
    return vals, martingale_value(forest, t_max, spectral), raw_last


def _slln_replica(payload, idx, rng):
    model, spectral, x, f, lattice, spots = payload
    t_max = lattice[-1]
    forest = simulate_forest(model, x, t_max, rng,
                             sample_times=tuple(lattice) + tuple(spots))
    xf = np.array([weigh(snapshot(forest, t), f) for t in lattice])
    xh = np.array([weigh(snapshot(forest, t), spectral.h) for t in lattice])
    sf = np.array([weigh(snapshot(forest, t), f) for t in spots])
    sh = np.array([weigh(snapshot(forest, t), spectral.h) for t in spots])
    return xf, xh, sf, sh


def _spine_replica(payload, idx, rng):
    model, spectral, x, horizon, f = payload
    tree = simulate_spine_tree(model, spectral, x, horizon, rng)
    g_val = weigh(snapshot(tree.forest, horizon), f)
    z = tree.ledger.z_at(horizon)
    lam = fission_count_given_path(tree.spine_path, model)
    return (g_val, z, lam, float(len(tree.spine_fission_times)),
            spine_decomposition(tree, horizon, spectral))


def _forest_functional_replica(payload, idx, rng):
    model, spectral, x, horizon, f = payload
    forest = simulate_forest(model, x, horizon, rng, sample_times=(horizon,))
    return weigh(snapshot(forest, horizon), f)


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    n = len(values)
    se = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return float(values.mean()), se


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def martingale_and_llogl_experiment(
    model: ModelSpec, spectral: SpectralTriple, x: float, t_list, n: int,
    base_seed: int, workers: int = 1, delta: float = 0.01,
    se_multiplier: float = 3.0,
) -> ExperimentReport:
    """Mean preservation of M_t at each t (target h(x)) plus a
    non-degeneracy proxy P(M_T > delta) > 0 at the largest horizon,
    gated on the L log L integrability verdict."""
    report = ExperimentReport(name="martingale", model_id=model.name,
                              base_seed=base_seed,
                              sample_sizes={"replicas": n}, rows=[],
                              thresholds={"se_multiplier": se_multiplier,
                                          "nondegeneracy_delta": delta})
    ll = spec_mod.llogl_value(model, spectral)
    report.rows.append(ReportRow(
        statistic="llogl_value", estimate=float(ll.value), verdict="info",
        provenance="[DERIVED: transformed-measure quadrature with tail majorants]"))
    if ll.verdict != "finite":
        report.hypothesis_met = False
        report.notes.append("L log L integral not finite: model outside theorem scope")
        report.rows.append(ReportRow(statistic="llogl_gate", estimate=math.nan,
                                     verdict="hypothesis-not-met"))
        return report
    ts = [float(t) for t in t_list]
    out = np.asarray(map_replicas(_martingale_replica,
                                  (model, spectral, x, ts, delta),
                                  n, base_seed, workers))
    hx = float(np.asarray(spectral.h(x)))
    for j, t in enumerate(ts):
        mean, se = _mean_se(out[:, j])
        report.rows.append(_row_3se("martingale_mean", mean, se, hx,
                                    "[DERIVED: closed-form ground state h(x)]", t=t,
                                    se_mult=se_multiplier))
    p, p_se = _mean_se(out[:, -1])
    report.rows.append(ReportRow(
        statistic="nondegeneracy_prob", t=ts[-1], estimate=p, stderr=p_se,
        oracle=0.0, provenance="[PAPER: limit is non-degenerate with positive probability]",
        tolerance=se_multiplier * p_se, deviation=p,
        verdict="pass" if p - se_multiplier * p_se > 0.0 else "fail"))
    report.series["t_list"] = ts
    report.series["martingale_means"] = [float(np.mean(out[:, j])) for j in range(len(ts))]
    report.series["martingale_stderr"] = [
        float(np.std(out[:, j], ddof=1) / math.sqrt(n)) for j in range(len(ts))]
    return report


def wlln_experiment(
    model: ModelSpec, spectral: SpectralTriple, x: float, f: TestFunction,
    t_grid, t_max: float, n: int, base_seed: int, workers: int = 1,
    halving_ratio: float = 0.5,
) -> ExperimentReport:
    """Decay of D(t) = E|e^{lambda_1 t} X_t(f) - M_proxy <f,h>| with the
    halving pass criterion over the grid, plus the ratio-form deviation.
    The limit object is proxied by M at the largest horizon."""
    report = ExperimentReport(name="wlln", model_id=model.name, base_seed=base_seed,
                              sample_sizes={"replicas": n}, rows=[],
                              thresholds={"halving_ratio": halving_ratio,
                                          "domination_c": f.c})
    w = spec_mod.check_condition_W(model, spectral, t0=1.0)
    report.rows.append(ReportRow(
        statistic="condition_W", estimate=float(w.value), verdict="info",
        provenance="[DERIVED: trace quadrature]"))
    if w.verdict != "finite":
        report.hypothesis_met = False
        report.rows.append(ReportRow(statistic="condition_W_gate", estimate=math.nan,
                                     verdict="hypothesis-not-met"))
        return report
    check_domination(f, model, spectral)
    t_grid = [float(t) for t in t_grid]
    fh = inner_fh(f, model, spectral)
    out = map_replicas(_wlln_replica, (model, spectral, x, f, t_grid, float(t_max)),
                       n, base_seed, workers)
    vals = np.asarray([o[0] for o in out])            # (n, len(t_grid))
    m_proxy = np.asarray([o[1] for o in out])
    raw_last = np.asarray([o[2] for o in out])
    d = np.abs(vals - m_proxy[:, None] * fh)
    d_mean = d.mean(axis=0)
    d_se = d.std(axis=0, ddof=1) / math.sqrt(n)
    for j, t in enumerate(t_grid):
        report.rows.append(ReportRow(
            statistic="wlln_D", t=t, estimate=float(d_mean[j]), stderr=float(d_se[j]),
            oracle=None, provenance="[DERIVED: MC deviation from the proxy limit]",
            verdict="info"))
    upper = d_mean[len(t_grid) // 2:]
    decreasing = bool(np.all(np.diff(upper) <= 1e-12))
    ratio = float(d_mean[-1] / d_mean[0])
    report.rows.append(ReportRow(
        statistic="wlln_upper_half_decreasing", estimate=float(decreasing),
        verdict="pass" if decreasing else "fail",
        provenance="[DERIVED: convergence is proved without a rate; halving property]"))
    report.rows.append(ReportRow(
        statistic="wlln_halving_ratio", estimate=ratio, oracle=halving_ratio,
        tolerance=0.0, deviation=max(ratio - halving_ratio, 0.0),
        provenance="[DERIVED: documented-seed halving property]",
        verdict="pass" if ratio < halving_ratio else "fail"))
    mean_x = spec_mod.many_to_one_quadrature(f, t_max, x, model, spectral)
    hx = float(np.asarray(spectral.h(x)))
    ratio_dev = np.abs(raw_last / mean_x - m_proxy / hx)
    rd_mean, rd_se = _mean_se(ratio_dev)
    report.rows.append(ReportRow(
        statistic="cor14_ratio_deviation", t=float(t_max), estimate=rd_mean,
        stderr=rd_se, provenance="[DERIVED: ratio form against the first-moment quadrature]",
        verdict="info"))
    report.series["t_grid"] = t_grid
    report.series["D"] = [float(v) for v in d_mean]
    report.series["D_stderr"] = [float(v) for v in d_se]
    return report


def slln_experiment(
    model: ModelSpec, spectral: SpectralTriple, x: float, f: TestFunction,
    sigma: float, n_max: int, n_paths: int, base_seed: int, workers: int = 1,
    r_tol: float = 0.2, pass_fraction: float = 0.9,
) -> ExperimentReport:
    """Lattice-time ratio stabilization r_n -> 1 per surviving path,
    gated on the bounded on-diagonal condition; models failing it get a
    hypothesis-not-met report, not a test failure."""
    report = ExperimentReport(name="slln", model_id=model.name, base_seed=base_seed,
                              sample_sizes={"paths": n_paths}, rows=[],
                              thresholds={"r_tol": r_tol,
                                          "pass_fraction": pass_fraction,
                                          "domination_c": f.c})
    aiu = spec_mod.check_condition_AIU(model, spectral, t1=0.5)
    report.rows.append(ReportRow(
        statistic="condition_AIU_sup", estimate=float(aiu.value), verdict="info",
        provenance="[DERIVED: on-diagonal kernel sup over the grid]"))
    if aiu.verdict != "passes":
        report.hypothesis_met = False
        report.notes.append(
            "bounded on-diagonal condition fails (sup grows with the window); "
            "the strong-limit hypothesis is not met for this model")
        report.rows.append(ReportRow(statistic="condition_AIU_gate", estimate=math.nan,
                                     verdict="hypothesis-not-met"))
        return report
    check_domination(f, model, spectral)
    lattice = [sigma * k for k in range(1, n_max + 1)]
    spots = [lattice[-1] - sigma * frac for frac in (0.29, 0.55, 0.83)]
    fh = inner_fh(f, model, spectral)
    out = map_replicas(_slln_replica, (model, spectral, x, f, lattice, spots),
                       n_paths, base_seed, workers)
    xf = np.asarray([o[0] for o in out])
    xh = np.asarray([o[1] for o in out])
    sf = np.asarray([o[2] for o in out])
    sh = np.asarray([o[3] for o in out])
    survived = xh[:, -1] > 0.0
    n_surv = int(survived.sum())
    report.sample_sizes["surviving_paths"] = n_surv
    q0 = 3 * n_max // 4   # last quarter: lattice indices q0 .. n_max-1
    with np.errstate(divide="ignore", invalid="ignore"):
        r = xf / (xh * fh)
    last = np.abs(r[survived][:, q0:] - 1.0)
    worst = last.max(axis=1)
    frac = float(np.mean(worst < r_tol)) if n_surv else 0.0
    report.rows.append(ReportRow(
        statistic="slln_fraction_within_tol", estimate=frac, oracle=pass_fraction,
        tolerance=0.0, deviation=max(pass_fraction - frac, 0.0),
        provenance="[DERIVED: property-based thresholds; no rate is proved]",
        verdict="pass" if frac >= pass_fraction else "fail"))
    with np.errstate(divide="ignore", invalid="ignore"):
        r_spot = sf[survived] / (sh[survived] * fh)
    spot_dev = float(np.nanmean(np.abs(r_spot - 1.0))) if n_surv else math.nan
    report.rows.append(ReportRow(
        statistic="slln_offlattice_ratio_dev", estimate=spot_dev, verdict="info",
        provenance="[DERIVED: continuous-time spot check at off-lattice times]"))
    med = np.nanmedian(np.where(survived[:, None], r, np.nan), axis=0)
    lo_q = np.nanquantile(np.where(survived[:, None], r, np.nan), 0.1, axis=0)
    hi_q = np.nanquantile(np.where(survived[:, None], r, np.nan), 0.9, axis=0)
    report.series["lattice"] = [float(t) for t in lattice]
    report.series["r_median"] = [float(v) for v in med]
    report.series["r_q10"] = [float(v) for v in lo_q]
    report.series["r_q90"] = [float(v) for v in hi_q]
    return report


def spine_consistency_experiment(
    model: ModelSpec, spectral: SpectralTriple, x: float, horizon: float, n: int,
    base_seed: int, workers: int = 1, f: TestFunction | None = None,
    se_multiplier: float = 3.0,
) -> ExperimentReport:
    """Three sub-checks of the measure change: the importance estimate of
    X_T(f) against plain Monte Carlo and the quadrature oracle (pairwise),
    the spine fission-count mean against its path-quadrature prediction,
    and Poisson equidispersion of the count given the path."""
    if f is None:
        f = TestFunction(kind="h", spectral=spectral)
    report = ExperimentReport(name="spine-consistency", model_id=model.name,
                              base_seed=base_seed,
                              sample_sizes={"spine_replicas": n, "forest_replicas": n},
                              rows=[], thresholds={"se_multiplier": se_multiplier})
    out = np.asarray(map_replicas(_spine_replica, (model, spectral, x, horizon, f),
                                  n, base_seed, workers))
    g_vals, z_vals, lams, counts = out[:, 0], out[:, 1], out[:, 2], out[:, 3]
    imp, imp_se = _mean_se(g_vals / z_vals)
    plain = np.asarray(map_replicas(_forest_functional_replica,
                                    (model, spectral, x, horizon, f),
                                    n, base_seed, workers, index_offset=n))
    pl, pl_se = _mean_se(plain)
    oracle = spec_mod.many_to_one_quadrature(f, horizon, x, model, spectral)
    report.rows.append(_row_3se("importance_vs_plain", imp,
                                math.hypot(imp_se, pl_se), pl,
                                "[DERIVED: two estimators of the same mean]", t=horizon,
                                se_mult=se_multiplier))
    report.rows.append(_row_3se("importance_vs_quadrature", imp, imp_se, oracle,
                                "[DERIVED: first-moment quadrature oracle]", t=horizon,
                                extra_tol=1e-9 * abs(oracle), se_mult=se_multiplier))
    report.rows.append(_row_3se("plain_vs_quadrature", pl, pl_se, oracle,
                                "[DERIVED: first-moment quadrature oracle]", t=horizon,
                                se_mult=se_multiplier))
    diff_mean, diff_se = _mean_se(counts - lams)
    report.rows.append(_row_3se("fission_count_minus_prediction", diff_mean, diff_se, 0.0,
                                "[PAPER: count given the path is Poisson with the clock value]",
                                t=horizon, se_mult=se_multiplier))
    disp = (counts - lams) ** 2 - lams
    disp_mean, disp_se = _mean_se(disp)
    report.rows.append(_row_3se("poisson_equidispersion", disp_mean, disp_se, 0.0,
                                "[PAPER: conditional Poisson equidispersion]", t=horizon,
                                se_mult=se_multiplier))
    return report


def spine_decomposition_experiment(
    model: ModelSpec, spectral: SpectralTriple, x: float, horizon: float, n: int,
    base_seed: int, workers: int = 1, se_multiplier: float = 3.0,
) -> ExperimentReport:
    """Tower identity: conditional-mean decomposition along the spine
    agrees with Z(T) in the size-biased mean (paired comparison)."""
    report = ExperimentReport(name="spine-decomposition", model_id=model.name,
                              base_seed=base_seed, sample_sizes={"spine_replicas": n},
                              rows=[], thresholds={"se_multiplier": se_multiplier})
    out = np.asarray(map_replicas(_spine_replica,
                                  (model, spectral, x, horizon,
                                   TestFunction(kind="h", spectral=spectral)),
                                  n, base_seed, workers))
    z_vals, decomp = out[:, 1], out[:, 4]
    diff_mean, diff_se = _mean_se(decomp - z_vals)
    report.rows.append(_row_3se("spine_decomposition_minus_Z", diff_mean, diff_se, 0.0,
                                "[PAPER: conditional-mean decomposition of the martingale]",
                                t=horizon, se_mult=se_multiplier))
    z_mean, z_se = _mean_se(z_vals)
    d_mean, d_se = _mean_se(decomp)
    report.rows.append(ReportRow(statistic="mean_Z", t=horizon, estimate=z_mean,
                                 stderr=z_se, verdict="info"))
    report.rows.append(ReportRow(statistic="mean_decomposition", t=horizon,
                                 estimate=d_mean, stderr=d_se, verdict="info"))
    return report

"""Model specifications, offspring laws, and the closed-form catalog.

The catalog holds the two desk-scale models with exact spectral data:

* branching Ornstein-Uhlenbeck motion on R^d with quadratic branching
  rate ``b|x|^2 + a`` and binary offspring, and
* Brownian motion killed outside the interval (0, L) with constant
  branching rate (optionally plus a point mass at an interior site,
  in which case the spectral data comes from the grid solver).

All types are immutable after construction and safe to share across
parallel workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MAX_OFFSPRING = 64
MASS_TOL = 1e-12


class ModelError(ValueError):
    """Invalid model parameters or violated operation precondition."""


class OffspringLawError(ModelError):
    """Structurally invalid offspring law."""


class SubcriticalModelError(ModelError):
    """Computed lambda_1 >= 0; the model must have lambda_1 < 0."""


# ---------------------------------------------------------------------------
# offspring laws
# ---------------------------------------------------------------------------

def _as_table(pmf) -> tuple[tuple[int, float], ...]:
    items = sorted((int(k), float(p)) for k, p in dict(pmf).items() if p != 0.0)
    return tuple(items)


@dataclass(frozen=True)
class OffspringLaw:
    """Offspring distribution, constant or piecewise-constant in position.

    ``tables[i]`` applies on the position cell (breaks[i-1], breaks[i]];
    a single table with no breaks is a constant law.
    """

    tables: tuple[tuple[tuple[int, float], ...], ...]
    breaks: tuple[float, ...] = ()

    @staticmethod
    def constant(pmf) -> "OffspringLaw":
        return OffspringLaw(tables=(_as_table(pmf),))

    @staticmethod
    def piecewise(breaks, pmfs) -> "OffspringLaw":
        breaks = tuple(float(b) for b in breaks)
        if len(pmfs) != len(breaks) + 1:
            raise OffspringLawError("piecewise law needs len(pmfs) == len(breaks)+1")
        if any(breaks[i] >= breaks[i + 1] for i in range(len(breaks) - 1)):
            raise OffspringLawError("cell boundaries must be strictly increasing")
        return OffspringLaw(tables=tuple(_as_table(p) for p in pmfs), breaks=breaks)

    def table_at(self, x) -> tuple[tuple[int, float], ...]:
        if not self.breaks:
            return self.tables[0]
        idx = int(np.searchsorted(np.asarray(self.breaks), float(x), side="left"))
        return self.tables[idx]

    @property
    def max_count(self) -> int:
        return max((k for t in self.tables for k, _ in t), default=0)

    def mean(self, x=0.0) -> float:
        return sum(k * p for k, p in self.table_at(x))

    def mean_vec(self, xs) -> np.ndarray:
        """Q(x) over an array of positions."""
        xs = np.asarray(xs, dtype=float)
        means = np.array([sum(k * p for k, p in t) for t in self.tables])
        if not self.breaks:
            return np.full(xs.shape, means[0])
        idx = np.searchsorted(np.asarray(self.breaks), xs, side="left")
        return means[idx]

    def max_mean(self) -> float:
        return max(sum(k * p for k, p in t) for t in self.tables)

    def sample(self, x, rng) -> int:
        table = self.table_at(x)
        u = rng.random()
        acc = 0.0
        for k, p in table:
            acc += p
            if u <= acc:
                return k
        return table[-1][0]


BINARY_LAW = OffspringLaw.constant({2: 1.0})


@dataclass(frozen=True)
class OffspringValidation:
    passed: bool
    violations: tuple[str, ...]
    degenerate: bool  # p_1 == 1 everywhere (excluded but still evaluable)


def validate_offspring(law: OffspringLaw) -> OffspringValidation:
    """Check p_0 = 0, unit mass, p_1 not identically 1, bounded mean."""
    violations = []
    for i, table in enumerate(law.tables):
        cell = f" (cell {i})" if law.breaks else ""
        pmf = dict(table)
        if pmf.get(0, 0.0) != 0.0:
            violations.append(f"p_0 = {pmf[0]!r} != 0{cell}")
        total = sum(pmf.values())
        if abs(total - 1.0) > MASS_TOL:
            violations.append(f"mass sum = {total!r} != 1{cell}")
        if any(p < 0.0 for p in pmf.values()):
            violations.append(f"negative mass{cell}")
        if any(k > MAX_OFFSPRING for k in pmf):
            violations.append(f"offspring count above cap {MAX_OFFSPRING}{cell}")
    degenerate = all(dict(t).get(1, 0.0) == 1.0 for t in law.tables)
    if degenerate:
        violations.append("p_1 identically 1 (excluded branching mechanism)")
    if not math.isfinite(law.max_mean()):
        violations.append("sup Q not finite")
    return OffspringValidation(not violations, tuple(violations), degenerate)


def _require_structurally_valid(law: OffspringLaw) -> OffspringValidation:
    report = validate_offspring(law)
    hard = [v for v in report.violations if "identically 1" not in v]
    if hard:
        raise OffspringLawError("; ".join(hard))
    return report


def mean_offspring(law: OffspringLaw, x=0.0) -> float:
    """Q(x), the offspring mean at position x."""
    _require_structurally_valid(law)
    return law.mean(x)


def size_biased(law: OffspringLaw, x=0.0) -> OffspringLaw:
    """Law with masses k p_k(x) / Q(x) (a constant law at position x)."""
    _require_structurally_valid(law)
    q = law.mean(x)
    if q <= 0.0:
        raise OffspringLawError("size-biasing needs Q(x) > 0")
    return OffspringLaw.constant({k: k * p / q for k, p in law.table_at(x)})


# ---------------------------------------------------------------------------
# motions and branching rates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OuMotion:
    """OU generator (1/2) sigma^2 Laplacian - c x . grad on R^d."""

    c: float
    sigma: float = 1.0
    d: int = 1


@dataclass(frozen=True)
class IntervalMotion:
    """Brownian motion on (0, length), killed at the boundary."""

    length: float
    sigma: float = 1.0


@dataclass(frozen=True)
class BranchingRate:
    """Rate measure ``(b|x|^2 + a) m(dx)`` plus optional point mass q at x0.

    The point mass models a measure-valued rate via the local time at x0;
    either part may be zero.
    """

    a: float = 0.0
    b: float = 0.0
    point_x0: float | None = None
    point_q: float = 0.0

    def beta(self, x):
        """Density part of the rate, vectorized over positions."""
        x = np.asarray(x, dtype=float)
        if self.b == 0.0:
            return np.full(x.shape, self.a) if x.shape else float(self.a)
        r2 = x * x if x.ndim <= 1 else np.sum(x * x, axis=-1)
        return self.b * r2 + self.a

    @property
    def has_function_part(self) -> bool:
        return self.a != 0.0 or self.b != 0.0

    @property
    def has_point_part(self) -> bool:
        return self.point_x0 is not None and self.point_q > 0.0


# ---------------------------------------------------------------------------
# ground-state function handles (picklable callables)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OuGroundState:
    """phi(x) = (alpha/c)^{d/4} exp((c-alpha)|x|^2 / 2)."""

    alpha: float
    c: float
    d: int = 1

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        # d > 1: the trailing axis holds coordinates (a point is shape (d,))
        r2 = x * x if self.d == 1 else np.sum(x * x, axis=-1)
        return (self.alpha / self.c) ** (self.d / 4.0) * np.exp(0.5 * (self.c - self.alpha) * r2)


@dataclass(frozen=True)
class SineGroundState:
    """h(x) = sqrt(2/L) sin(pi x / L) on (0, L), zero outside."""

    length: float

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x > 0.0) & (x < self.length)
        val = np.sqrt(2.0 / self.length) * np.sin(np.pi * x / self.length)
        out = np.where(inside, val, 0.0)
        return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Linear interpolant of grid values, zero outside the grid span."""

    xs: np.ndarray
    ys: np.ndarray

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.interp(x, self.xs, self.ys, left=0.0, right=0.0)
        return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# model spec and spectral data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    motion: OuMotion | IntervalMotion
    rate: BranchingRate
    offspring: OffspringLaw
    dt: float = 1e-3          # killed-motion stepping and PCAF accumulation
    local_time_eps: float = 0.02
    name: str = ""

    def __post_init__(self):
        _require_structurally_valid(self.offspring)
        if self.dt <= 0.0:
            raise ModelError("dt must be positive")
        if isinstance(self.motion, IntervalMotion):
            if self.motion.length <= 0.0:
                raise ModelError("interval length must be positive")
            x0 = self.rate.point_x0
            if x0 is not None and not 0.0 < x0 < self.motion.length:
                raise ModelError("point mass location outside (0, L)")

    def mean_offspring_at(self, x) -> float:
        return self.offspring.mean(x)


class InvalidSpectralData(ModelError):
    pass


@dataclass(frozen=True, eq=False)
class SpectralTriple:
    """(lambda_1, lambda_2, h) with gap lambda_h = lambda_2 - lambda_1 > 0."""

    lambda1: float
    lambda2: float
    h: OuGroundState | SineGroundState | GridFunction
    h_norm_check: float
    source: str = "closed-form"   # or "grid"

    def __post_init__(self):
        if not self.lambda1 < 0.0:
            raise InvalidSpectralData(f"lambda_1 = {self.lambda1!r} must be < 0")
        if not self.gap > 0.0:
            raise InvalidSpectralData(f"spectral gap {self.gap!r} must be > 0")
        if abs(self.h_norm_check - 1.0) > 1e-8:
            raise InvalidSpectralData(f"int h^2 dm = {self.h_norm_check!r} != 1")

    @property
    def gap(self) -> float:
        return self.lambda2 - self.lambda1


# ---------------------------------------------------------------------------
# reference-measure densities
# ---------------------------------------------------------------------------

def m_density(model: ModelSpec, x):
    """Density of the symmetrizing measure m with respect to Lebesgue."""
    x = np.asarray(x, dtype=float)
    if isinstance(model.motion, OuMotion):
        c, d = model.motion.c, model.motion.d
        r2 = x * x if d == 1 else np.sum(x * x, axis=-1)
        return (c / math.pi) ** (d / 2.0) * np.exp(-c * r2)
    inside = (x > 0.0) & (x < model.motion.length)
    out = np.where(inside, 1.0, 0.0)
    return float(out) if out.ndim == 0 else out


def mtilde_density(model: ModelSpec, spectral: SpectralTriple, x):
    """Density of mtilde = h^2 m with respect to Lebesgue."""
    return np.asarray(spectral.h(x)) ** 2 * m_density(model, x)


# ---------------------------------------------------------------------------
# catalog
# ---------------------------------------------------------------------------

def catalog_ou(c: float, b: float, a: float, d: int = 1) -> tuple[ModelSpec, SpectralTriple]:
    """Branching OU model with rate b|x|^2 + a and binary offspring.

    Requires c > sqrt(2 b) and a > 0.  Returns the exact spectral data:
    alpha = sqrt(c^2 - 2b), lambda_1 = -((c - alpha)/2 + a), ground state
    phi, and gap alpha (the lowest nonzero eigenvalue of the transformed
    OU motion; recorded as derived, not paper-sourced).
    """
    if b < 0.0:
        raise ModelError("quadratic rate coefficient b must be >= 0")
    if a <= 0.0:
        raise ModelError("constant rate a must be > 0")
    if c <= math.sqrt(2.0 * b):
        raise ModelError(f"need c > sqrt(2b): c={c!r}, sqrt(2b)={math.sqrt(2*b)!r}")
    alpha = math.sqrt(c * c - 2.0 * b)
    lam1 = -(0.5 * (c - alpha) + a)
    model = ModelSpec(
        motion=OuMotion(c=c, sigma=1.0, d=d),
        rate=BranchingRate(a=a, b=b),
        offspring=BINARY_LAW,
        name=f"ou(c={c:g},b={b:g},a={a:g},d={d})",
    )
    spectral = SpectralTriple(
        lambda1=lam1,
        lambda2=lam1 + alpha,
        h=OuGroundState(alpha=alpha, c=c, d=d),
        h_norm_check=1.0,   # exact: Gaussian integral of phi^2 dm
    )
    return model, spectral


def catalog_interval(
    beta: float,
    length: float = math.pi,
    point_mass: tuple[float, float] | None = None,
    grid_n: int = 4000,
) -> tuple[ModelSpec, SpectralTriple]:
    """Killed Brownian motion on (0, L) with constant rate beta, binary law.

    Without a point mass the spectral data is the explicit Dirichlet
    spectrum shifted by beta: lambda_n = n^2 pi^2 / (2 L^2) - beta and
    h = sqrt(2/L) sin(pi x / L).  With a point mass (x0, q) the triple is
    produced by the spectral module's grid solver.  Raises
    SubcriticalModelError when the computed lambda_1 >= 0.
    """
    if beta < 0.0:
        raise ModelError("constant rate beta must be >= 0")
    rate = BranchingRate(a=beta)
    dt = 1e-3
    if point_mass is not None:
        x0, q = point_mass
        if q <= 0.0:
            raise ModelError("point mass weight must be positive")
        rate = BranchingRate(a=beta, point_x0=float(x0), point_q=float(q))
        dt = 2.5e-4   # keep the Euler step below the local-time window
    model = ModelSpec(
        motion=IntervalMotion(length=length, sigma=1.0),
        rate=rate,
        offspring=BINARY_LAW,
        dt=dt,
        name=f"interval(beta={beta:g},L={length:g}"
        + (f",pm=({point_mass[0]:g},{point_mass[1]:g})" if point_mass else "")
        + ")",
    )
    if point_mass is None:
        lam = lambda n: 0.5 * (n * math.pi / length) ** 2 - beta
        if lam(1) >= 0.0:
            raise SubcriticalModelError(
                f"lambda_1 = {lam(1)!r} >= 0: need beta > {0.5 * (math.pi / length) ** 2!r}"
            )
        spectral = SpectralTriple(
            lambda1=lam(1),
            lambda2=lam(2),
            h=SineGroundState(length=length),
            h_norm_check=1.0,   # int_0^L (2/L) sin^2 = 1 exactly
        )
        return model, spectral
    from . import spectral as _spectral
    return model, _spectral.solve_model_spectrum(model, n=grid_n)

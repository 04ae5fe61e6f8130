"""Independent oracles used to freeze expected values in the tests.

Everything here is computed from first principles (series expansions,
Gaussian moments, root finding, quadrature) without touching the package
internals, so oracle and implementation can disagree meaningfully.
"""

import math

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq


# --- killed Brownian motion on (0, pi), constant branching rate beta ------

def dirichlet_eigenvalue(n: int, beta: float, length: float = math.pi) -> float:
    """n-th eigenvalue of the constant-rate interval form: n^2 pi^2/(2L^2) - beta."""
    return 0.5 * (n * math.pi / length) ** 2 - beta


def sine_ground_state(x, length: float = math.pi):
    return math.sqrt(2.0 / length) * np.sin(np.asarray(x) * math.pi / length)


def survival_series(t: float, x: float, terms: int = 400) -> float:
    """P_x(tau > t) for Brownian motion killed outside (0, pi)."""
    total = 0.0
    for n in range(1, terms + 1, 2):
        total += 4.0 / (n * math.pi) * math.exp(-n * n * t / 2.0) * math.sin(n * x)
    return total


def interval_mean_mass(t: float, x: float, beta: float) -> float:
    """E_x[X_t(1)] for the interval model: e^{beta t} kills/branches balance."""
    return math.exp(beta * t) * survival_series(t, x)


def interval_ph_diag(t: float, x: float, terms: int = 200) -> float:
    """p^h(t,x,x) for the interval model (independent of beta)."""
    s = 0.0
    for n in range(1, terms + 1):
        s += math.exp(-(n * n - 1.0) * t / 2.0) * math.sin(n * x) ** 2
    return s / math.sin(x) ** 2


def interval_trace(t: float, terms: int = 200) -> float:
    """mtilde-trace of the transformed semigroup at time t."""
    return sum(math.exp(-(n * n - 1.0) * t / 2.0) for n in range(1, terms + 1))


def interval_boundary_diag_limit(t: float, terms: int = 200) -> float:
    """lim_{x->0} p^h(t,x,x) = sum n^2 e^{-(n^2-1)t/2}."""
    return sum(n * n * math.exp(-(n * n - 1.0) * t / 2.0) for n in range(1, terms + 1))


def interval_fk_kernel(t: float, x: float, y: float, beta: float, terms: int) -> float:
    """Feynman-Kac kernel w.r.t. Lebesgue, truncated at `terms` modes."""
    s = 0.0
    for n in range(1, terms + 1):
        s += math.exp(-n * n * t / 2.0) * (2.0 / math.pi) * math.sin(n * x) * math.sin(n * y)
    return math.exp(beta * t) * s


# --- branching OU with quadratic rate (closed forms) -----------------------

def ou_alpha(c: float, b: float) -> float:
    return math.sqrt(c * c - 2.0 * b)


def ou_lambda1(c: float, b: float, a: float) -> float:
    return -(0.5 * (c - ou_alpha(c, b)) + a)


def ou_ground_state(x, c: float, b: float, d: int = 1):
    alpha = ou_alpha(c, b)
    x = np.asarray(x, dtype=float)
    r2 = x * x if x.ndim <= 1 else np.sum(x * x, axis=-1)
    return (alpha / c) ** (d / 4.0) * np.exp(0.5 * (c - alpha) * r2)


def ou_step_mean_var(x: float, t: float, c: float, sigma: float = 1.0):
    return x * math.exp(-c * t), sigma * sigma * (1.0 - math.exp(-2.0 * c * t)) / (2.0 * c)


def ou_h_trace(t: float, alpha: float, terms: int = 200) -> float:
    """mtilde-trace of the transformed OU semigroup: sum_k e^{-k alpha t}."""
    return sum(math.exp(-k * alpha * t) for k in range(terms))


def mehler_ph(t: float, x: float, y: float, alpha: float, d: int = 1) -> float:
    pref = (1.0 - math.exp(-2.0 * alpha * t)) ** (-d / 2.0)
    quad_form = (x * x + y * y - 2.0 * x * y * math.exp(alpha * t))
    return pref * math.exp(-alpha * quad_form / math.expm1(2.0 * alpha * t))


# --- delta-well spectral oracle --------------------------------------------

def delta_well_lambda1(q: float, x0: float = math.pi / 2, length: float = math.pi) -> float:
    """Principal eigenvalue of (1/2)u'' + q delta_{x0} u on (0, L), Dirichlet.

    For lambda = -kappa^2/2 < 0 the matching condition is
    coth(kappa x0) + coth(kappa (L - x0)) = 2 q / kappa.
    """
    def f(k):
        return 1.0 / math.tanh(k * x0) + 1.0 / math.tanh(k * (length - x0)) - 2.0 * q / k

    k_lo, k_hi = 1e-9, 2.0 * q
    if f(k_hi) < 0:
        k_hi = 10.0 * q
    root = brentq(f, k_lo, k_hi)
    return -0.5 * root * root


# --- misc -------------------------------------------------------------------

def yule_mean(beta: float, t: float) -> float:
    """Expected particle count of a binary branch-only process."""
    return math.exp(beta * t)


def brownian_local_time_mean(t: float) -> float:
    """E L_t at the starting level of standard Brownian motion."""
    return math.sqrt(2.0 * t / math.pi)


def llogl_interval(beta: float = 1.0, length: float = math.pi) -> float:
    """Independent quadrature of the L log L integral, binary offspring."""
    h = lambda y: math.sqrt(2.0 / length) * math.sin(math.pi * y / length)
    term_m = quad(lambda y: h(y) ** 2 * max(math.log(h(y)), 0.0), 0, length)[0]
    term_mu = quad(lambda y: 2.0 * h(y) ** 2 * max(math.log(2.0 * h(y)), 0.0) * beta,
                   0, length)[0]
    return term_m + term_mu


def llogl_ou(c: float, b: float, a: float) -> float:
    """Independent quadrature of the L log L integral for the OU catalog.

    Combined-exponent form: h^2 dm = sqrt(alpha/pi) e^{-alpha y^2} dy, so the
    integrands decay like a Gaussian and never overflow.
    """
    alpha = ou_alpha(c, b)
    gauss = lambda y: math.sqrt(alpha / math.pi) * math.exp(-alpha * y * y)
    log_h = lambda y: 0.25 * math.log(alpha / c) + 0.5 * (c - alpha) * y * y
    beta = lambda y: b * y * y + a
    f1 = lambda y: gauss(y) * max(log_h(y), 0.0)
    f2 = lambda y: 2.0 * gauss(y) * max(math.log(2.0) + log_h(y), 0.0) * beta(y)
    return quad(f1, -25, 25, limit=400)[0] + quad(f2, -25, 25, limit=400)[0]

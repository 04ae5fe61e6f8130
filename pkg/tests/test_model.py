import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bhp_lab.model import (
    BINARY_LAW,
    OffspringLaw,
    OffspringLawError,
    SubcriticalModelError,
    ModelError,
    catalog_interval,
    catalog_ou,
    m_density,
    mean_offspring,
    size_biased,
    validate_offspring,
)

import oracles


# --- mean_offspring ---------------------------------------------------------

def test_mean_binary():
    assert mean_offspring(BINARY_LAW) == 2.0


def test_mean_degenerate_p1_flagged_but_evaluable():
    law = OffspringLaw.constant({1: 1.0})
    assert mean_offspring(law) == 1.0
    report = validate_offspring(law)
    assert not report.passed and report.degenerate


def test_mean_uniform_123():
    law = OffspringLaw.constant({1: 1 / 3, 2: 1 / 3, 3: 1 / 3})
    assert mean_offspring(law) == pytest.approx(2.0, abs=1e-15)


def test_mean_rejects_structurally_invalid():
    law = OffspringLaw.constant({1: 0.5, 2: 0.6})
    with pytest.raises(OffspringLawError):
        mean_offspring(law)


# --- size_biased -------------------------------------------------------------

def test_size_biased_single_atom_fixed_point():
    assert size_biased(BINARY_LAW).tables[0] == ((2, 1.0),)


def test_size_biased_two_atoms():
    law = OffspringLaw.constant({1: 0.5, 3: 0.5})
    out = dict(size_biased(law).tables[0])
    assert out[1] == pytest.approx(0.25) and out[3] == pytest.approx(0.75)


def test_size_biased_uniform():
    law = OffspringLaw.constant({1: 1 / 3, 2: 1 / 3, 3: 1 / 3})
    out = dict(size_biased(law).tables[0])
    for k in (1, 2, 3):
        assert out[k] == pytest.approx(k / 6.0)


@st.composite
def offspring_laws(draw):
    ks = draw(st.lists(st.integers(1, 12), min_size=1, max_size=5, unique=True))
    ws = [draw(st.floats(0.05, 1.0)) for _ in ks]
    total = sum(ws)
    return OffspringLaw.constant({k: w / total for k, w in zip(ks, ws)})


@given(offspring_laws())
@settings(max_examples=60, deadline=None)
def test_size_biased_properties(law):
    sb = size_biased(law)
    table = dict(sb.tables[0])
    q = law.mean()
    assert abs(sum(table.values()) - 1.0) <= 1e-12
    assert abs(sum(p / k for k, p in table.items()) - 1.0 / q) <= 1e-12


# --- validate_offspring ------------------------------------------------------

def test_validate_passing():
    assert validate_offspring(BINARY_LAW).passed


def test_validate_p0_violation():
    rep = validate_offspring(OffspringLaw.constant({0: 0.1, 2: 0.9}))
    assert not rep.passed and any("p_0" in v for v in rep.violations)


def test_validate_mass_violation():
    rep = validate_offspring(OffspringLaw.constant({1: 0.5, 2: 0.6}))
    assert not rep.passed and any("mass sum" in v for v in rep.violations)


def test_piecewise_law_lookup():
    law = OffspringLaw.piecewise([0.0], [{2: 1.0}, {3: 1.0}])
    assert law.mean(-1.0) == 2.0 and law.mean(1.0) == 3.0
    np.testing.assert_allclose(law.mean_vec(np.array([-1.0, 1.0])), [2.0, 3.0])


# --- catalog_ou ---------------------------------------------------------------

def test_catalog_ou_example_values():
    model, sp = catalog_ou(2.0, 1.5, 0.1, d=1)
    assert sp.lambda1 == pytest.approx(-0.6, abs=1e-14)
    assert sp.gap == pytest.approx(1.0, abs=1e-14)
    assert float(sp.h(0.0)) == pytest.approx(0.840896415253715, abs=1e-12)


def test_catalog_ou_zero_quadratic_constant_h():
    model, sp = catalog_ou(2.0, 0.0, 0.1)
    assert sp.lambda1 == pytest.approx(-0.1, abs=1e-14)
    xs = np.linspace(-2, 2, 7)
    np.testing.assert_allclose(sp.h(xs), np.ones_like(xs))


def test_catalog_ou_precondition():
    with pytest.raises(ModelError):
        catalog_ou(1.0, 0.6, 0.2)


def test_catalog_ou_h_norm_quadrature():
    model, sp = catalog_ou(2.0, 1.5, 0.1)
    xs = np.linspace(-8, 8, 20001)
    vals = np.asarray(sp.h(xs)) ** 2 * m_density(model, xs)
    assert np.trapezoid(vals, xs) == pytest.approx(1.0, abs=1e-8)


def test_catalog_ou_eigenrelation_by_mehler_quadrature():
    # e^{lambda_1 t} P_t h(x) = h(x) via the transformed-kernel row integral
    from bhp_lab.motion import mehler_density_h

    model, sp = catalog_ou(2.0, 1.5, 0.1)
    alpha = sp.gap
    ys = np.linspace(-10, 10, 4001)
    mt = np.asarray(sp.h(ys)) ** 2 * m_density(model, ys)
    for t in (0.5, 1.0):
        for x in (0.0, 1.0, -1.0):
            row = mehler_density_h(t, np.full_like(ys, x), ys, alpha)
            lhs = float(np.asarray(sp.h(x))) * np.trapezoid(row * mt, ys)
            assert lhs == pytest.approx(float(np.asarray(sp.h(x))), abs=1e-6)


# --- catalog_interval ----------------------------------------------------------

def test_catalog_interval_example_values():
    model, sp = catalog_interval(1.0)
    assert sp.lambda1 == pytest.approx(oracles.dirichlet_eigenvalue(1, 1.0), abs=1e-14)
    assert sp.gap == pytest.approx(1.5, abs=1e-14)
    assert float(sp.h(math.pi / 2)) == pytest.approx(0.797884560802865, abs=1e-12)


def test_catalog_interval_subcritical():
    with pytest.raises(SubcriticalModelError):
        catalog_interval(0.25)


def test_catalog_interval_h_normalized():
    model, sp = catalog_interval(1.0)
    xs = np.linspace(0, math.pi, 40001)
    assert np.trapezoid(np.asarray(sp.h(xs)) ** 2, xs) == pytest.approx(1.0, abs=1e-10)


def test_catalog_interval_point_mass_delegates_to_grid():
    model, sp = catalog_interval(0.0, point_mass=(math.pi / 2, 1.0), grid_n=2000)
    assert sp.source == "grid"
    assert sp.lambda1 == pytest.approx(oracles.delta_well_lambda1(1.0), abs=2e-3)
    assert model.rate.has_point_part and not model.rate.has_function_part


def test_interval_kernel_on_diagonal_blowup_documented():
    # t -> 0+ on-diagonal series diverges; truncation must report a tail bound
    from bhp_lab.motion import interval_density

    out = interval_density(1e-3, math.pi / 2, math.pi / 2, 1.0, n_terms=50)
    assert out.value > 10.0 and out.tail_bound > 0.0


def test_model_immutable():
    model, _ = catalog_interval(1.0)
    with pytest.raises(Exception):
        model.dt = 0.1

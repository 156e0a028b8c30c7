#!/usr/bin/env python3
"""
Tests for residual certification, the collapse relation and cheap redistribution
"""

import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy.integrate import trapezoid

# Add backend directory to Python path
backend_dir = Path(__file__).parent
sys.path.insert(0, str(backend_dir))

from conftest import lq_scenario, trivial_scenario
from utils.exceptions import GridTooCoarse, SumMismatch, ValidationError
from utils.optimality import (SCHEME_ORDER, CheckResult, bump_density, certify,
                              cheap_redistribution, collapse_residual, collapse_terms,
                              convergence_order, ic_mapping_check, node_range,
                              not_applicable, optimality_residuals, simulate_cheap_control,
                              smooth_121)
from utils.scenario import TimeGrid
from utils.transcribe import build, solve

REFINEMENT = (48, 96, 192)


@pytest.fixture(scope='module')
def refinement():
    """Solutions of the smooth LQ problem on three grids, per scheme"""
    out = {}
    for scheme in ('euler', 'trapezoidal'):
        out[scheme] = []
        for n in REFINEMENT:
            scenario = lq_scenario(n)
            out[scheme].append((scenario, solve(build(scenario, scheme))))
    return out


def test_smooth_121_removes_alternating_mode():
    k = np.arange(11)
    smooth = 2.0 + 0.5 * k
    y = smooth + 3.0 * (-1.0) ** k
    np.testing.assert_allclose(smooth_121(y)[1:-1], smooth[1:-1])
    assert smooth_121(y)[0] == y[0]


def test_node_range():
    np.testing.assert_array_equal(node_range(10, 1, 'trapezoidal'), np.arange(2, 9))
    np.testing.assert_array_equal(node_range(10, 1, 'euler'), np.arange(3, 9))
    np.testing.assert_array_equal(node_range(20, 3, 'trapezoidal'), np.arange(4, 17))


def test_trivial_solution_has_zero_residuals():
    scenario = trivial_scenario()
    solution = solve(build(scenario, 'trapezoidal'))
    report = optimality_residuals(solution, scenario)
    assert report.worst() <= 1e-9
    assert collapse_residual(solution, scenario) <= 1e-9
    assert np.all(ic_mapping_check(solution, scenario) <= 1e-9)
    assert all(check.passed for check in certify(solution, scenario, report=report))


def test_coarse_grid_rejected():
    scenario = trivial_scenario(steps=4)
    solution = solve(build(scenario, 'trapezoidal'))
    with pytest.raises(GridTooCoarse):
        optimality_residuals(solution, scenario)
    with pytest.raises(GridTooCoarse):
        ic_mapping_check(solution, scenario)


def test_report_layout(lq, lq_solution):
    report = optimality_residuals(lq_solution, lq)
    assert set(report.equations()) == {'soc', 'ramp', 'costate', 'beta', 'usum', 'collapse'}
    assert report.first_node == 2
    assert report.last_node == lq_solution.steps - 2
    assert len(report.costate_per_class) == lq.M
    assert len(report.initial_mapping) == lq.M
    as_dict = report.to_dict()
    assert as_dict['soc']['max'] == report.soc.max
    assert all(np.isfinite(norm.max) for norm in report.equations().values())


def test_lq_solution_passes_certification(lq, lq_solution):
    checks = certify(lq_solution, lq)
    failed = [c.name for c in checks if not c.passed]
    assert failed == []
    names = {c.name for c in checks}
    assert {'balance', 'costate_collapse', 'price_duality', 'transversality',
            'initial_mapping'} <= names


def test_certification_flags_broken_balance(lq, lq_solution):
    broken = replace(lq_solution, g=lq_solution.g + 0.5)
    failed = {c.name for c in certify(broken, lq) if not c.passed}
    assert 'balance' in failed


@pytest.mark.parametrize('scheme', ['euler', 'trapezoidal'])
def test_collapse_residual_converges_at_scheme_order(refinement, scheme):
    """Residuals over a fixed time window shrink at the nominal order"""
    hs, values = [], []
    for scenario, solution in refinement[scheme]:
        hs.append(solution.h)
        values.append(collapse_residual(solution, scenario, skip_nodes=solution.steps // 12))
    order = convergence_order(hs, values)
    assert abs(order - SCHEME_ORDER[scheme]) <= 0.3


def test_trapezoidal_residuals_shrink_under_refinement(refinement):
    worst = []
    for scenario, solution in refinement['trapezoidal']:
        worst.append(optimality_residuals(solution, scenario, solution.steps // 12).costate.max)
    assert worst[0] > worst[1] > worst[2]


DUCK_ORDERED = ('soc', 'costate', 'beta', 'usum', 'collapse')


def test_duck_residuals_converge_at_second_order(duck_refinement):
    """Residuals over a fixed time window halve twice when N doubles from 576 to 1152"""
    hs, reports = [], []
    for steps in (576, 1152):
        scenario, solution = duck_refinement[steps]
        hs.append(solution.h)
        reports.append(optimality_residuals(solution, scenario, steps // 12))
    for name in DUCK_ORDERED:
        values = [getattr(r, name).max for r in reports]
        order = convergence_order(hs, values)
        assert abs(order - 2.0) <= 0.3, f"{name}: order {order:.2f}"


def test_duck_collapse_is_small_against_marginal_costs(duck_refinement):
    scenario, solution = duck_refinement[1152]
    marginal, _ = collapse_terms(solution, scenario)
    largest = float(np.max(np.abs(marginal[:, 1:])))
    assert largest > 0
    assert collapse_residual(solution, scenario) <= 1e-3 * largest


def test_not_applicable_check_passes():
    check = not_applicable('costate_collapse')
    assert check.passed
    assert check.status == 'N/A'
    assert CheckResult('balance', 2.0, 1.0).status == 'FAIL'


def test_ic_mapping_is_small(lq, lq_solution):
    """The collapse relation holds at t = 0+ as well"""
    marginal_scale = max(np.max(np.abs(cls.cost.d1(lq_solution.x[i, 1:])))
                         for i, cls in enumerate(lq.classes))
    assert np.max(ic_mapping_check(lq_solution, lq)) <= 5e-2 * marginal_scale


# ---------------------------------------------------------------------------
# Cheap redistribution
# ---------------------------------------------------------------------------

def test_bump_density_has_unit_mass():
    t = np.linspace(0.0, 0.2, 2001)
    assert trapezoid(bump_density(t, 0.2), t) == pytest.approx(1.0, rel=1e-6)
    assert bump_density(-0.1, 0.2) == 0.0
    assert bump_density(0.3, 0.2) == 0.0


def test_identity_redistribution_is_zero():
    control = cheap_redistribution([1.0, 2.0], [0.5, -0.5], [1.0, 2.0], [0.5, -0.5], 0.1)
    assert control.is_zero
    np.testing.assert_array_equal(control(np.linspace(0, 0.1, 5)), 0.0)


def test_redistribution_keeps_aggregate_input_zero():
    grid = TimeGrid(0.5, 50)
    control = cheap_redistribution([0.5, 0.5], [1.0, 2.0], [0.8, 0.2], [2.0, 1.0], 0.25, grid)
    samples = control.samples
    assert samples.shape == (2, 51)
    np.testing.assert_allclose(np.sum(samples, axis=0), 0.0, atol=1e-12)


def test_redistribution_reaches_target():
    """z lands exactly; x lands with an error proportional to delta"""
    alphas = [0.25, 0.04]
    x_from, z_from = np.array([0.5, 0.5]), np.array([1.0, 2.0])
    x_to, z_to = np.array([0.8, 0.2]), np.array([2.0, 1.0])
    ratios = []
    for delta in (0.1, 0.05, 0.025):
        control = cheap_redistribution(x_from, z_from, x_to, z_to, delta)
        x_end, z_end = simulate_cheap_control(control, alphas, x_from, z_from)
        np.testing.assert_allclose(z_end, z_to, atol=1e-8)
        ratios.append(np.max(np.abs(x_end - x_to)) / delta)
    assert max(ratios) / min(ratios) < 1.3


def test_redistribution_rejects_sum_change():
    with pytest.raises(SumMismatch):
        cheap_redistribution([1.0, 0.0], [0.0, 0.0], [1.0, 1.0], [0.0, 0.0], 0.1)
    with pytest.raises(ValidationError):
        cheap_redistribution([1.0], [0.0], [1.0], [0.0], 0.0)


def test_convergence_order():
    hs = np.array([0.4, 0.2, 0.1])
    assert convergence_order(hs, 3.0 * hs ** 2) == pytest.approx(2.0)
    assert np.isnan(convergence_order([0.1], [1.0]))
    assert np.isnan(convergence_order(hs, [1.0, 0.0, 1.0]))


def test_equal_sum_initial_states_cost_the_same_in_the_limit():
    """Redistributing the initial state between classes changes the optimum by O(h)"""
    x_a, z_a = np.array([1.0, -1.0]), np.array([0.5, -0.5])
    x_b, z_b = np.zeros(2), np.zeros(2)
    cheap_redistribution(x_a, z_a, x_b, z_b, 0.1)

    scaled = []
    for n in REFINEMENT:
        a = solve(build(lq_scenario(n, x0=x_a, z0=z_a), 'trapezoidal'))
        b = solve(build(lq_scenario(n, x0=x_b, z0=z_b), 'trapezoidal'))
        scaled.append(abs(a.objective - b.objective) / a.h)
    assert max(scaled) <= 1.5 * min(scaled)

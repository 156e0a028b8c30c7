#!/usr/bin/env python3
"""
Tests for scenario parsing, validation and net-load ingestion
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add backend directory to Python path
backend_dir = Path(__file__).parent
sys.path.insert(0, str(backend_dir))

from utils.costfn import Quadratic, ScaledPolynomial
from utils.exceptions import ParseError, ValidationError
from utils.scenario import (REFERENCE_CLASSES, LoadClass, TimeGrid, descriptor_state,
                            load_scenario, load_scenario_file, piecewise_constant_load,
                            read_netload_csv, reference_classes, synth_duck_curve,
                            uncontrolled_generation)

MINIMAL = """
name = "minimal"

[grid]
horizon_hours = 24.0
steps = 8

[[class]]
name = "acs"
alpha = 0.25
capacity = 4.0

[netload]
kind = "constant"
value = 30.0
"""


def test_load_trivial_file(scenario_dir):
    scenario = load_scenario_file(scenario_dir / 'trivial.toml')
    assert scenario.name == 'trivial'
    assert scenario.M == 2
    assert scenario.grid.steps == 16
    assert scenario.grid.h == pytest.approx(1.5)
    assert scenario.net_load.mean == pytest.approx(30.0)
    assert scenario.generation.cost_g.gain == 1.0
    assert scenario.generation.cost_g.center == pytest.approx(30.0)
    assert len(scenario.source_hash) == 64


def test_all_shipped_scenarios_load(scenario_dir):
    for path in sorted(scenario_dir.glob('*.toml')):
        scenario = load_scenario_file(path, steps=48)
        assert scenario.grid.steps == 48
        assert np.all(np.isfinite(scenario.net_load.values))


def test_defaults_and_steps_override():
    scenario = load_scenario(MINIMAL)
    assert scenario.classes[0].cost == ScaledPolynomial(kappa1=1.0, kappa2=0.1, capacity=4.0)
    np.testing.assert_array_equal(scenario.x0, [0.0])
    assert load_scenario(MINIMAL, steps=32).grid.steps == 32


def test_same_text_same_hash():
    assert load_scenario(MINIMAL).source_hash == load_scenario(MINIMAL).source_hash
    assert load_scenario(MINIMAL).source_hash != load_scenario(MINIMAL + '\n').source_hash


def test_malformed_toml_is_parse_error():
    with pytest.raises(ParseError):
        load_scenario('[grid\nsteps = 4')


def test_missing_file_is_parse_error(tmp_path):
    with pytest.raises(ParseError):
        load_scenario_file(tmp_path / 'nope.toml')


@pytest.mark.parametrize('old, new', [
    ('capacity = 4.0', 'capacity = 0.0'),
    ('alpha = 0.25', 'alpha = -0.1'),
    ('steps = 8', 'steps = 1'),
    ('value = 30.0', 'values = [1.0, 2.0]'),
    ('kind = "constant"', 'kind = "sawtooth"'),
    ('name = "acs"', 'name = "acs"\ncolour = "red"'),
])
def test_invalid_scenarios(old, new):
    with pytest.raises(ValidationError):
        load_scenario(MINIMAL.replace(old, new))


def test_inline_values_must_match_grid():
    text = MINIMAL.replace('kind = "constant"\nvalue = 30.0',
                           'kind = "inline"\nvalues = [1.0, 2.0, 3.0]')
    with pytest.raises(ValidationError):
        load_scenario(text)


def test_initial_state_length_checked():
    text = MINIMAL + '\n[initial]\nx0 = [0.0, 1.0]\n'
    with pytest.raises(ValidationError):
        load_scenario(text)


def test_duplicate_class_names():
    text = MINIMAL.replace('[netload]', '[[class]]\nname = "acs"\nalpha = 0.1\ncapacity = 1.0\n\n[netload]')
    with pytest.raises(ValidationError):
        load_scenario(text)


def test_load_class_validation():
    with pytest.raises(ValidationError):
        LoadClass('x', -0.1, 1.0, Quadratic(gain=1.0))
    with pytest.raises(ValidationError):
        LoadClass('x', 0.1, 0.0, Quadratic(gain=1.0))


def test_duck_curve_levels_and_determinism():
    grid = TimeGrid(24.0, 576)
    load = synth_duck_curve(grid, base=15.0, swing=40.0, seed=3)
    assert load.values.min() == pytest.approx(15.0, abs=1e-12)
    assert load.values.max() == pytest.approx(55.0, abs=1e-12)
    again = synth_duck_curve(grid, base=15.0, swing=40.0, seed=3)
    np.testing.assert_array_equal(load.values, again.values)
    # Exact spline slope agrees with finite differences of the samples
    fd = np.gradient(load.values, grid.h)
    assert np.max(np.abs(fd[1:-1] - load.derivative[1:-1])) < 1e-2 * np.max(np.abs(load.derivative))


def test_duck_curve_has_evening_peak_and_midday_trough():
    grid = TimeGrid(24.0, 288)
    load = synth_duck_curve(grid, base=15.0, swing=20.0, seed=0)
    t = grid.times
    assert 10.0 <= t[np.argmin(load.values)] <= 14.0
    assert 18.0 <= t[np.argmax(load.values)] <= 21.0


def test_piecewise_constant_load():
    grid = TimeGrid(24.0, 48)
    load = piecewise_constant_load(grid, [(0.0, 30.0), (18.0, 70.0)])
    t = grid.times
    np.testing.assert_allclose(load.values[t < 17.5 - 1e-9], 30.0)
    np.testing.assert_allclose(load.values[t >= 18.0 - 1e-9], 70.0)
    assert np.max(load.derivative) == pytest.approx(40.0 / grid.h / 2.0)

    with pytest.raises(ValidationError):
        piecewise_constant_load(grid, [(1.0, 30.0)])
    with pytest.raises(ValidationError):
        piecewise_constant_load(grid, [(0.0, 30.0), (12.0, 50.0), (12.0, 60.0)])


def test_read_netload_csv(tmp_path):
    path = tmp_path / 'load.csv'
    path.write_text('t_hours,load_gw\n0,10\n12,34\n24,10\n')
    load = read_netload_csv(path, TimeGrid(24.0, 4))
    np.testing.assert_allclose(load.values, [10.0, 22.0, 34.0, 22.0, 10.0])
    assert load.mean == pytest.approx(22.0)


def test_read_netload_csv_with_derivative(tmp_path):
    path = tmp_path / 'load.csv'
    path.write_text('t_hours,load_gw,dload_gw_per_h\n0,10,1\n24,34,1\n')
    load = read_netload_csv(path, TimeGrid(24.0, 4))
    np.testing.assert_allclose(load.derivative, 1.0)


def test_read_netload_csv_errors(tmp_path):
    grid = TimeGrid(24.0, 4)
    missing_col = tmp_path / 'a.csv'
    missing_col.write_text('t,load\n0,1\n24,1\n')
    with pytest.raises(ParseError):
        read_netload_csv(missing_col, grid)

    not_increasing = tmp_path / 'b.csv'
    not_increasing.write_text('t_hours,load_gw\n0,1\n12,1\n12,2\n24,1\n')
    with pytest.raises(ValidationError):
        read_netload_csv(not_increasing, grid)

    short = tmp_path / 'c.csv'
    short.write_text('t_hours,load_gw\n0,1\n12,1\n')
    with pytest.raises(ValidationError):
        read_netload_csv(short, grid)

    with pytest.raises(ParseError):
        read_netload_csv(tmp_path / 'missing.csv', grid)


def test_csv_netload_through_scenario_file(tmp_path):
    (tmp_path / 'load.csv').write_text('t_hours,load_gw\n0,20\n24,20\n')
    text = MINIMAL.replace('kind = "constant"\nvalue = 30.0', 'kind = "csv"\npath = "load.csv"')
    scenario_path = tmp_path / 'scenario.toml'
    scenario_path.write_text(text)
    scenario = load_scenario_file(scenario_path)
    np.testing.assert_allclose(scenario.net_load.values, 20.0)


def test_reference_classes():
    classes = reference_classes()
    assert [c.name for c in classes] == [name for name, _, _ in REFERENCE_CLASSES]
    pp = classes[-1]
    assert pp.cost == ScaledPolynomial(kappa1=0.0, kappa2=1.0, capacity=2.0)
    acs = classes[0]
    assert (acs.alpha, acs.capacity) == (0.25, 4.0)
    assert acs.cost.kappa1 == 1.0


def test_descriptor_state_and_baseline(trivial):
    x = np.array([[1.0, 2.0], [3.0, -1.0]])
    z = np.array([[0.5, 0.5], [-0.5, 1.5]])
    xs, zs = descriptor_state(x, z)
    np.testing.assert_array_equal(xs, [4.0, 1.0])
    np.testing.assert_array_equal(zs, [0.0, 2.0])
    np.testing.assert_array_equal(uncontrolled_generation(trivial.net_load), 30.0)


def test_with_initial(trivial):
    moved = trivial.with_initial([1.0, -1.0], [0.0, 0.0])
    np.testing.assert_array_equal(moved.x0, [1.0, -1.0])
    assert moved.grid == trivial.grid
    with pytest.raises(ValidationError):
        trivial.with_initial([1.0], [0.0])
    with pytest.raises(ValidationError):
        trivial.class_index('nope')

"""
Shared fixtures for the backend test suite
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add backend directory to Python path
backend_dir = Path(__file__).parent
sys.path.insert(0, str(backend_dir))

from config import Config
from utils.costfn import Quadratic
from utils.scenario import (GenerationModel, LoadClass, NetLoad, Scenario, TimeGrid,
                            load_scenario_file)
from utils.transcribe import build, solve

SCENARIO_DIR = Path(Config.SCENARIO_DIR)


def smooth_load(grid: TimeGrid, mean: float = 30.0, amplitude: float = 10.0) -> NetLoad:
    """Sinusoidal net load with its exact derivative"""
    w = 2.0 * np.pi / grid.horizon
    t = grid.times
    return NetLoad.from_values(grid, mean + amplitude * np.sin(w * t),
                               amplitude * w * np.cos(w * t))


def lq_scenario(steps: int = 96, x0=(0.0, 0.0), z0=(0.0, 0.0)) -> Scenario:
    """Two quadratic classes against a smooth load"""
    grid = TimeGrid(24.0, steps)
    load = smooth_load(grid)
    classes = (
        LoadClass('acs', 0.25, 4.0, Quadratic(gain=0.5)),
        LoadClass('fwh', 0.04, 2.0, Quadratic(gain=0.2)),
    )
    generation = GenerationModel(cost_g=Quadratic(gain=1.0, center=load.mean), ramp_kappa=1.0)
    return Scenario(classes, generation, grid, load,
                    np.asarray(x0, dtype=float), np.asarray(z0, dtype=float), name='lq')


def trivial_scenario(steps: int = 16) -> Scenario:
    """Constant load, resting classes: the optimum is g = l at zero cost"""
    grid = TimeGrid(24.0, steps)
    load = NetLoad.from_values(grid, np.full(steps + 1, 30.0), np.zeros(steps + 1))
    classes = (
        LoadClass('acs', 0.25, 4.0, Quadratic(gain=1.0)),
        LoadClass('fwh', 0.04, 2.0, Quadratic(gain=1.0)),
    )
    generation = GenerationModel(cost_g=Quadratic(gain=1.0, center=30.0), ramp_kappa=1.0)
    return Scenario(classes, generation, grid, load, np.zeros(2), np.zeros(2), name='trivial')


def duck_scenario(steps: int = 576) -> Scenario:
    """Five reference classes against a 40 GW-swing duck curve"""
    return load_scenario_file(SCENARIO_DIR / 'five_class_duck.toml', steps=steps)


@pytest.fixture
def trivial():
    return trivial_scenario()


@pytest.fixture(scope='module')
def lq():
    return lq_scenario()


@pytest.fixture(scope='module')
def lq_solution(lq):
    return solve(build(lq, 'trapezoidal'))


@pytest.fixture(scope='module')
def lq_euler_solution(lq):
    return solve(build(lq, 'euler'))


@pytest.fixture(scope='module')
def duck():
    return duck_scenario()


@pytest.fixture(scope='module')
def duck_solution(duck):
    return solve(build(duck, 'trapezoidal'))


@pytest.fixture
def scenario_dir():
    return SCENARIO_DIR


@pytest.fixture(scope='session')
def duck_refinement():
    """Trapezoidal duck solutions at N = 576 and N = 1152, keyed by N"""
    solutions = {}
    for steps in (576, 1152):
        scenario = duck_scenario(steps)
        solutions[steps] = (scenario, solve(build(scenario, 'trapezoidal')))
    return solutions

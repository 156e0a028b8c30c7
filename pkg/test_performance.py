#!/usr/bin/env python3
"""
Runtime and qualitative dispatch checks on the shipped reference scenarios
Run with pytest, or directly for a timing summary
"""

import statistics
import sys
import time
from pathlib import Path

import numpy as np

# Add backend directory to Python path
backend_dir = Path(__file__).parent / 'backend'
sys.path.insert(0, str(backend_dir))

from config import Config
from utils.economics import dispatch_summary
from utils.scenario import load_scenario_file
from utils.transcribe import build, solve

SCENARIOS = Path(Config.SCENARIO_DIR)
TCL_CLASSES = ('acs', 'fwh', 'swh', 'rfg')


def timed_solve(name: str, scheme: str = 'trapezoidal', steps: int = None):
    scenario = load_scenario_file(SCENARIOS / name, steps=steps)
    start = time.perf_counter()
    solution = solve(build(scenario, scheme))
    return scenario, solution, time.perf_counter() - start


def test_trivial_runtime():
    """Constant load at N = 576 solves in under a second"""
    _, solution, seconds = timed_solve('trivial.toml', steps=576)
    assert solution.objective <= 1e-9
    assert np.max(np.abs(solution.rho)) <= 1e-9
    assert seconds < 1.0


def test_reference_duck_runtime_and_peak():
    scenario, solution, seconds = timed_solve('five_class_duck.toml')
    assert seconds < 10.0
    summary = dispatch_summary(solution, scenario)
    assert summary['peak_generation'] < summary['peak_load']
    for name in TCL_CLASSES:
        assert summary['soc_utilisation'][name] <= 1.05, name


def test_reference_duck_euler_runtime():
    _, solution, seconds = timed_solve('five_class_duck.toml', scheme='euler')
    assert np.isfinite(solution.objective)
    assert seconds < 10.0


def test_step_profile_flattens_generation():
    """A 40 GW step is absorbed by the loads: flat generation, gentle ramps"""
    scenario, solution, _ = timed_solve('step40.toml')
    summary = dispatch_summary(solution, scenario)
    assert summary['std_generation'] <= 0.25 * summary['std_load']
    assert summary['max_ramp'] <= 0.5 * summary['max_load_ramp']


def main():
    print("Dispatch solver timings")
    print("=" * 40)
    for name in ('trivial.toml', 'lq_two_class.toml', 'five_class_duck.toml', 'step40.toml'):
        for scheme in Config.SCHEMES:
            runs = [timed_solve(name, scheme)[2] for _ in range(3)]
            print(f"{name:24s} {scheme:12s} mean {statistics.mean(runs):.3f}s "
                  f"min {min(runs):.3f}s")


if __name__ == "__main__":
    main()

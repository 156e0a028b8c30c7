"""
Utilities package for the demand-dispatch solver
"""

from .costfn import CostFunction, Quadratic, ScaledPolynomial
from .scenario import Scenario, load_scenario, load_scenario_file
from .transcribe import DiscreteProgram, DiscreteSolution, build, solve

__all__ = [
    'CostFunction', 'Quadratic', 'ScaledPolynomial',
    'Scenario', 'load_scenario', 'load_scenario_file',
    'DiscreteProgram', 'DiscreteSolution', 'build', 'solve',
]

"""
Certification of discrete solutions against the continuous optimality system
Residuals of the state, co-state and input equations, the co-state collapse
relation, the initial mapping, and the cheap redistribution control
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import solve_ivp

from config import Config
from .exceptions import GridTooCoarse, SumMismatch, ValidationError
from .scenario import Scenario, TimeGrid
from .transcribe import DiscreteSolution

logger = logging.getLogger(__name__)

# Nominal convergence order of each scheme
SCHEME_ORDER = {'euler': 1.0, 'trapezoidal': 2.0}


def smooth_121(y: np.ndarray) -> np.ndarray:
    """
    1-2-1 nodal average along the last axis; endpoints are left unchanged

    Annihilates the (-1)^k mode and (-1)^k * k.
    """
    y = np.asarray(y, dtype=float)
    out = y.copy()
    out[..., 1:-1] = 0.25 * (y[..., :-2] + 2.0 * y[..., 1:-1] + y[..., 2:])
    return out


def time_derivative(y: np.ndarray, h: float) -> np.ndarray:
    """Central differences inside, second-order one-sided at the ends"""
    return np.gradient(np.asarray(y, dtype=float), h, axis=-1, edge_order=2)


def jump_node(scheme: str) -> int:
    """First node past the initial jump: trapezoidal absorbs it in interval 0, euler in interval 1"""
    return 2 if scheme == 'euler' else 1


def node_range(steps: int, skip_nodes: int = Config.DEFAULT_SKIP_NODES,
               scheme: str = Config.DEFAULT_SCHEME) -> np.ndarray:
    """Checked nodes: skip past the first post-jump node, up to N - skip - 1"""
    skip = max(1, int(skip_nodes))
    return np.arange(jump_node(scheme) + skip, steps - skip)


def _controls(solution: DiscreteSolution) -> Tuple[np.ndarray, np.ndarray]:
    if solution.scheme == 'trapezoidal':
        return smooth_121(solution.z), smooth_121(solution.u)
    return solution.z, solution.u


@dataclass(frozen=True)
class ResidualNorm:
    max: float
    rms: float
    relative: float

    @classmethod
    def of(cls, residual: np.ndarray, scale: float) -> 'ResidualNorm':
        r = np.abs(np.asarray(residual, dtype=float))
        peak = float(np.max(r)) if r.size else 0.0
        rms = float(np.sqrt(np.mean(r ** 2))) if r.size else 0.0
        rel = peak / scale if scale > 0 else peak
        return cls(max=peak, rms=rms, relative=rel)


@dataclass(frozen=True)
class ResidualReport:
    """Residual norms of the optimality system over the checked node range"""
    scheme: str
    h: float
    steps: int
    first_node: int
    last_node: int
    soc: ResidualNorm
    ramp: ResidualNorm
    costate: ResidualNorm
    beta: ResidualNorm
    usum: ResidualNorm
    collapse: ResidualNorm
    costate_per_class: List[float] = field(default_factory=list)
    initial_mapping: List[float] = field(default_factory=list)

    def equations(self) -> Dict[str, ResidualNorm]:
        return {
            'soc': self.soc, 'ramp': self.ramp, 'costate': self.costate,
            'beta': self.beta, 'usum': self.usum, 'collapse': self.collapse,
        }

    def worst(self) -> float:
        """Largest max-norm over the optimality equations"""
        return max(norm.max for norm in self.equations().values())

    def to_dict(self) -> dict:
        return asdict(self)


def _check_grid(solution: DiscreteSolution):
    if solution.steps < Config.MIN_CHECK_STEPS:
        raise GridTooCoarse(
            f"Certification needs N >= {Config.MIN_CHECK_STEPS}, got N={solution.steps}"
        )


def collapse_terms(solution: DiscreteSolution, scenario: Scenario) -> Tuple[np.ndarray, np.ndarray]:
    """
    Both sides of c'_i(x_i) = alpha_i * lambda - lambda' at every node

    Returns:
        (marginal_costs, costate_side), each (M, N+1)
    """
    lam_dot = time_derivative(solution.lam, solution.h)
    marginal = np.vstack([cls.cost.d1(solution.x[i]) for i, cls in enumerate(scenario.classes)])
    return marginal, scenario.alphas[:, None] * solution.lam - lam_dot


def collapse_residual(solution: DiscreteSolution, scenario: Scenario,
                      skip_nodes: int = Config.DEFAULT_SKIP_NODES) -> float:
    """
    max over classes and checked nodes of |c'_i(x_i) - (alpha_i * lambda - lambda')|
    """
    ks = node_range(solution.steps, skip_nodes, solution.scheme)
    marginal, costate_side = collapse_terms(solution, scenario)
    if ks.size == 0:
        return 0.0
    return float(np.max(np.abs(marginal[:, ks] - costate_side[:, ks])))


def ic_mapping_check(solution: DiscreteSolution, scenario: Scenario) -> np.ndarray:
    """
    Collapse relation at t = 0+ (first node past the jump) with a one-sided lambda'

    Returns:
        Per-class |c'_i(x_i(0+)) - (alpha_i * lambda(0+) - lambda'(0+))|
    """
    _check_grid(solution)
    h = solution.h
    lam = solution.lam
    j = jump_node(solution.scheme)
    lam_dot = (-3.0 * lam[:, j] + 4.0 * lam[:, j + 1] - lam[:, j + 2]) / (2.0 * h)
    out = np.empty(scenario.M)
    for i, cls in enumerate(scenario.classes):
        out[i] = abs(cls.cost.d1(solution.x[i, j]) - (cls.alpha * lam[i, j] - lam_dot[i]))
    return out


def optimality_residuals(solution: DiscreteSolution, scenario: Scenario,
                       skip_nodes: int = Config.DEFAULT_SKIP_NODES) -> ResidualReport:
    """
    Residuals of the 3M + 2 optimality equations at interior nodes

    Time derivatives use central differences. With the trapezoidal rule the
    controls z and u are read through the 1-2-1 average.

    Args:
        solution: Converged discrete solution
        scenario: Scenario it was solved for
        skip_nodes: Nodes excluded at each end

    Returns:
        ResidualReport
    """
    _check_grid(solution)
    h = solution.h
    ks = node_range(solution.steps, skip_nodes, solution.scheme)
    alphas = scenario.alphas[:, None]
    gen = scenario.generation
    load = scenario.net_load

    z, u = _controls(solution)
    lam = solution.lam
    lam_c = solution.costate
    beta = solution.beta_common

    x_dot = time_derivative(solution.x, h)
    z_dot = time_derivative(solution.z, h)
    lam_dot = time_derivative(lam, h)
    beta_dot = time_derivative(beta, h)
    marginal = np.vstack([cls.cost.d1(solution.x[i]) for i, cls in enumerate(scenario.classes)])
    mc_g = gen.cost_g.d1(load.values - np.sum(z, axis=0))
    u_sigma = np.sum(u, axis=0)

    r_soc = (x_dot + alphas * solution.x + z)[:, ks]
    r_ramp = (z_dot - u)[:, ks]
    r_lam = (lam_dot + marginal - alphas * lam)[:, ks]
    r_beta = (beta_dot - mc_g - lam_c)[ks]
    r_usum = (u_sigma - load.derivative + beta / (2.0 * gen.ramp_kappa))[ks]

    def scale(*terms):
        return max(float(np.max(np.abs(t[..., ks]))) if ks.size else 0.0 for t in terms)

    per_class = [float(np.max(np.abs(r_lam[i]))) if ks.size else 0.0 for i in range(scenario.M)]
    report = ResidualReport(
        scheme=solution.scheme,
        h=h,
        steps=solution.steps,
        first_node=int(ks[0]) if ks.size else 0,
        last_node=int(ks[-1]) if ks.size else 0,
        soc=ResidualNorm.of(r_soc, scale(x_dot, alphas * solution.x, z)),
        ramp=ResidualNorm.of(r_ramp, scale(z_dot, u)),
        costate=ResidualNorm.of(r_lam, scale(lam_dot, marginal, alphas * lam)),
        beta=ResidualNorm.of(r_beta, scale(beta_dot, mc_g, lam_c)),
        usum=ResidualNorm.of(r_usum, scale(u_sigma, load.derivative, beta / (2.0 * gen.ramp_kappa))),
        collapse=ResidualNorm.of(r_lam, scale(marginal, alphas * lam - lam_dot)),
        costate_per_class=per_class,
        initial_mapping=ic_mapping_check(solution, scenario).tolist(),
    )
    logger.debug(f"Optimality residuals (N={solution.steps}, {solution.scheme}): "
                 f"worst max-norm {report.worst():.3e}")
    return report


# ---------------------------------------------------------------------------
# Certification suite
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    tolerance: float
    applicable: bool = True

    @property
    def passed(self) -> bool:
        return not self.applicable or bool(self.value <= self.tolerance)

    @property
    def status(self) -> str:
        if not self.applicable:
            return 'N/A'
        return 'PASS' if self.passed else 'FAIL'


def not_applicable(name: str) -> CheckResult:
    return CheckResult(name, float('nan'), float('nan'), applicable=False)


def terminal_costate(solution: DiscreteSolution) -> float:
    """
    Largest raw last-interval multiplier of lambda and beta, relative to 1 + max|lambda|

    Both vanish at T in continuous time; the discrete values are O(h).
    """
    terminal = np.r_[solution.lam_terminal, solution.beta_terminal]
    scale = 1.0 + float(np.max(np.abs(solution.lam)))
    return float(np.max(np.abs(terminal))) / scale


def transversality_check(solution: DiscreteSolution) -> CheckResult:
    if solution.lam_terminal is None or solution.beta_terminal is None:
        return not_applicable('transversality')
    return CheckResult('transversality', terminal_costate(solution),
                       Config.TERMINAL_COSTATE_FACTOR * solution.h)


def certify(solution: DiscreteSolution, scenario: Scenario,
            skip_nodes: int = Config.DEFAULT_SKIP_NODES,
            report: Optional[ResidualReport] = None) -> List[CheckResult]:
    """
    Structural checks of a solution: balance, co-state collapse, price
    duality, transversality and the relative optimality residuals
    """
    report = report or optimality_residuals(solution, scenario, skip_nodes)
    load = scenario.net_load.values
    N = solution.steps
    lam = solution.lam
    tol_lam = Config.COSTATE_RTOL * (1.0 + float(np.max(np.abs(lam))))
    interior = np.arange(1, N)

    balance = np.abs(solution.g + solution.z_sigma - load) / (1.0 + np.abs(load))
    checks = [CheckResult('balance', float(np.max(balance)), Config.BALANCE_RTOL)]
    if solution.per_class_costates:
        checks += [
            CheckResult('costate_collapse', float(np.max(np.ptp(lam[:, 1:], axis=0))), tol_lam),
            CheckResult('beta_collapse', float(np.max(np.ptp(solution.beta[:, 1:], axis=0))),
                        tol_lam),
            CheckResult('generator_costate',
                        float(np.max(np.abs(solution.eta + solution.beta_common))), tol_lam),
        ]
    else:
        checks += [not_applicable(name)
                   for name in ('costate_collapse', 'beta_collapse', 'generator_costate')]
    checks.append(CheckResult(
        'price_duality',
        float(np.max(np.abs(solution.rho[interior] + solution.costate[interior]))), tol_lam))
    checks.append(transversality_check(solution))
    for name, norm in report.equations().items():
        checks.append(CheckResult(f'residual_{name}', norm.relative, Config.CHECK_RESIDUAL_RTOL))

    marginal, _ = collapse_terms(solution, scenario)
    ic_scale = float(np.max(np.abs(marginal[:, 1:])))
    ic_value = max(report.initial_mapping)
    checks.append(CheckResult('initial_mapping', ic_value / ic_scale if ic_scale > 0 else ic_value,
                              Config.CHECK_RESIDUAL_RTOL))
    for check in checks:
        if not check.passed:
            logger.warning(f"Check '{check.name}' failed: {check.value:.3e} > {check.tolerance:.3e}")
    return checks


# ---------------------------------------------------------------------------
# Cheap redistribution control
# ---------------------------------------------------------------------------

def bump_density(t, delta: float):
    """f(t) = 30 s^2 (1 - s)^2 / delta on (0, delta), s = t / delta; unit mass"""
    s = np.asarray(t, dtype=float) / delta
    inside = (s > 0.0) & (s < 1.0)
    return np.where(inside, 30.0 * s ** 2 * (1.0 - s) ** 2 / delta, 0.0)


def bump_density_derivative(t, delta: float):
    s = np.asarray(t, dtype=float) / delta
    inside = (s > 0.0) & (s < 1.0)
    return np.where(inside, 60.0 * s * (1.0 - s) * (1.0 - 2.0 * s) / delta ** 2, 0.0)


@dataclass(frozen=True)
class CheapControl:
    """u_i(t) = dz_i f(t) - dx_i f'(t), supported on (0, delta)"""
    dx: np.ndarray
    dz: np.ndarray
    delta: float
    times: Optional[np.ndarray] = None

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        f = bump_density(t, self.delta)
        fp = bump_density_derivative(t, self.delta)
        return np.multiply.outer(self.dz, f) - np.multiply.outer(self.dx, fp)

    @property
    def samples(self) -> Optional[np.ndarray]:
        """Control on the attached grid times, shape (M, N+1)"""
        return None if self.times is None else self(self.times)

    @property
    def is_zero(self) -> bool:
        return not (np.any(self.dx) or np.any(self.dz))


def cheap_redistribution(x_from: Sequence[float], z_from: Sequence[float],
                         x_to: Sequence[float], z_to: Sequence[float],
                         delta: float, grid: Optional[TimeGrid] = None) -> CheapControl:
    """
    Input that moves (x, z) between two states with equal class sums

    Args:
        x_from, z_from: Starting per-class state
        x_to, z_to: Target per-class state
        delta: Duration of the redistribution (hours)
        grid: Optional grid on which samples are provided

    Returns:
        CheapControl with sum_i u_i(t) = 0 for every t
    """
    x_from, z_from = np.asarray(x_from, dtype=float), np.asarray(z_from, dtype=float)
    x_to, z_to = np.asarray(x_to, dtype=float), np.asarray(z_to, dtype=float)
    if delta <= 0:
        raise ValidationError(f"delta must be positive, got {delta}")
    dx_sum = abs(np.sum(x_to) - np.sum(x_from))
    dz_sum = abs(np.sum(z_to) - np.sum(z_from))
    if dx_sum > Config.SUM_MISMATCH_TOL or dz_sum > Config.SUM_MISMATCH_TOL:
        raise SumMismatch(f"Class sums differ: |dx_sigma|={dx_sum:.3e}, |dz_sigma|={dz_sum:.3e}")
    return CheapControl(dx=x_to - x_from, dz=z_to - z_from, delta=float(delta),
                        times=None if grid is None else grid.times)


def simulate_cheap_control(control: CheapControl, alphas: Sequence[float],
                           x_from: Sequence[float], z_from: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Integrate x' = -alpha x - z, z' = u over [0, delta]

    Returns:
        (x(delta), z(delta))
    """
    alphas = np.asarray(alphas, dtype=float)
    m = alphas.size

    def rhs(t, state):
        x, z = state[:m], state[m:]
        return np.r_[-alphas * x - z, control(t)]

    sol = solve_ivp(rhs, (0.0, control.delta), np.r_[np.asarray(x_from, float), np.asarray(z_from, float)],
                    method='DOP853', rtol=1e-12, atol=1e-13, max_step=control.delta / 50.0)
    end = sol.y[:, -1]
    return end[:m], end[m:]


def convergence_order(hs: Sequence[float], values: Sequence[float]) -> float:
    """
    Least-squares slope of log(value) against log(h)

    Returns NaN for fewer than two points or non-positive values.
    """
    hs = np.asarray(hs, dtype=float)
    values = np.asarray(values, dtype=float)
    if hs.size < 2 or np.any(values <= 0) or np.any(hs <= 0):
        return float('nan')
    slope, _ = np.polyfit(np.log(hs), np.log(values), 1)
    return float(slope)

"""
Prices and market interpretation of a dispatch solution
Equilibrium price, Lagrangian decomposition into generator and load-class
subproblems, duality checks, average-price identities, welfare and QoS
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.integrate import trapezoid

from config import Config
from .exceptions import AlphaZero
from .optimality import node_range, time_derivative
from .scenario import LoadClass, Scenario
from .transcribe import (SCHEME_THETA, DenseKKTSolver, DiscreteSolution, SparseKKTSolver,
                         balance_scale, newton_kkt, quadrature_weights)

logger = logging.getLogger(__name__)

_DENSE_SUBPROBLEM_LIMIT = 200


def equilibrium_price(solution: DiscreteSolution) -> np.ndarray:
    """
    Price trajectory: -lambda on (0, T]; node 0 carries the right limit
    """
    price = -solution.costate.copy()
    price[0] = price[1]
    return price


def normalized_price(price: np.ndarray) -> np.ndarray:
    """Price scaled to [-1, 1] for display"""
    price = np.asarray(price, dtype=float)
    peak = np.max(np.abs(price)) if price.size else 0.0
    return price / peak if peak > 0 else np.zeros_like(price)


# ---------------------------------------------------------------------------
# Lagrangian decomposition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BestResponse:
    """Optimizers of the decoupled subproblems at a given price"""
    scheme: str
    rho: np.ndarray
    g: np.ndarray
    gamma: np.ndarray
    x: np.ndarray
    v: np.ndarray
    generator_value: float
    class_values: List[float]
    load_payment: float

    @property
    def total(self) -> float:
        return self.generator_value + float(np.sum(self.class_values)) + self.load_payment


def _kkt_solver(A: sparse.spmatrix):
    if sum(A.shape) < _DENSE_SUBPROBLEM_LIMIT:
        return DenseKKTSolver(A)
    return SparseKKTSolver(A)


def _interval_rows(N: int, h: float, theta: float, first_row: int):
    """
    Rows y_{k+1} - y_k - h * (theta * w_{k+1} + (1 - theta) * w_k) on interleaved [y_k, w_k]
    """
    k = np.arange(N)
    rows = np.repeat(first_row + k, 4)
    cols = np.column_stack([2 * (k + 1), 2 * k, 2 * (k + 1) + 1, 2 * k + 1]).ravel()
    vals = np.tile([1.0, -1.0, -theta * h, -(1.0 - theta) * h], N)
    return rows, cols, vals


def _solve_generator(scenario: Scenario, linear_price: np.ndarray, scheme: str):
    """min sum w c_g(g) + w kappa gamma^2 - linear_price . g, with g' = gamma and g_0 pinned"""
    grid = scenario.grid
    N, h = grid.steps, grid.h
    w_state, w_ramp = quadrature_weights(grid, scheme)
    gen = scenario.generation
    load = scenario.net_load

    r, c, v = _interval_rows(N, h, SCHEME_THETA[scheme], first_row=1)
    A = sparse.csr_matrix((np.r_[1.0, v], (np.r_[0, r], np.r_[0, c])), shape=(N + 1, 2 * (N + 1)))
    A.eliminate_zeros()
    b = np.zeros(N + 1)
    b[0] = load.values[0] - np.sum(scenario.z0)

    def gradient(y):
        grad = np.empty_like(y)
        grad[0::2] = w_state * gen.cost_g.d1(y[0::2]) - linear_price
        grad[1::2] = w_ramp * gen.ramp_marginal(y[1::2])
        return grad

    def hessian(y):
        diag = np.empty_like(y)
        diag[0::2] = w_state * gen.cost_g.d2(y[0::2])
        diag[1::2] = w_ramp * 2.0 * gen.ramp_kappa
        return diag

    y0 = np.empty(2 * (N + 1))
    y0[0::2] = load.values
    y0[0] = b[0]
    y0[1::2] = load.derivative
    result = newton_kkt(A, b, gradient, hessian, y0, _kkt_solver(A))
    g, gamma = result.v[0::2], result.v[1::2]
    value = (np.dot(w_state, gen.cost_g.value(g)) + np.dot(w_ramp, gen.ramp_cost(gamma))
             - np.dot(linear_price, g))
    return g, gamma, float(value)


def _solve_class(scenario: Scenario, index: int, linear_price: np.ndarray, scheme: str):
    """
    min sum w c_i(x) + linear_price . (v + alpha x), with x' = v

    v = -alpha x - z is the state-of-charge rate; v_0 follows from the pinned
    initial state.
    """
    grid = scenario.grid
    N, h = grid.steps, grid.h
    cls: LoadClass = scenario.classes[index]
    w_state, _ = quadrature_weights(grid, scheme)
    x0, z0 = scenario.x0[index], scenario.z0[index]

    r, c, v = _interval_rows(N, h, SCHEME_THETA[scheme], first_row=2)
    rows, cols, vals = [0, 1], [0, 1], [1.0, 1.0]
    b = np.zeros(N + 2 + (scheme == 'euler'))
    b[0], b[1] = x0, -cls.alpha * x0 - z0
    if scheme == 'euler':
        # v_N enters no interval row; its price is zero at a consistent optimum
        rows.append(N + 2)
        cols.append(2 * N + 1)
        vals.append(1.0)
    A = sparse.csr_matrix((np.r_[vals, v], (np.r_[rows, r], np.r_[cols, c])),
                          shape=(b.size, 2 * (N + 1)))
    A.eliminate_zeros()

    def gradient(y):
        grad = np.empty_like(y)
        grad[0::2] = w_state * cls.cost.d1(y[0::2]) + cls.alpha * linear_price
        grad[1::2] = linear_price
        return grad

    def hessian(y):
        diag = np.zeros_like(y)
        diag[0::2] = w_state * cls.cost.d2(y[0::2])
        return diag

    y0 = np.zeros(2 * (N + 1))
    y0[0::2] = x0
    y0[1] = b[1]
    result = newton_kkt(A, b, gradient, hessian, y0, _kkt_solver(A))
    x, xdot = result.v[0::2], result.v[1::2]
    value = np.dot(w_state, cls.cost.value(x)) + np.dot(linear_price, xdot + cls.alpha * x)
    return x, xdot, float(value)


def agent_best_response(rho: np.ndarray, scenario: Scenario,
                        scheme: str = Config.DEFAULT_SCHEME) -> BestResponse:
    """
    Solve the generator problem and each load-class problem at price rho

    The balance rows at nodes 1..N are relaxed; node 0 is fixed by the
    initial state.

    Args:
        rho: Price on the grid nodes
        scenario: Scenario
        scheme: Quadrature scheme matching the primal solve

    Returns:
        BestResponse; for euler with a nonzero terminal price the class
        problems are unbounded and their values are -inf
    """
    rho = np.asarray(rho, dtype=float)
    N = scenario.grid.steps
    s = balance_scale(scenario.grid, scheme)
    linear = s * rho
    linear[0] = 0.0

    g, gamma, gen_value = _solve_generator(scenario, linear, scheme)

    unbounded = (scheme == 'euler' and
                 abs(rho[N]) > Config.COSTATE_RTOL * (1.0 + float(np.max(np.abs(rho)))))
    if unbounded:
        logger.warning(f"Terminal price {rho[N]:.3e} leaves the euler class problems unbounded")

    xs, vs, values = [], [], []
    for i in range(scenario.M):
        x, v, value = _solve_class(scenario, i, linear, scheme)
        xs.append(x)
        vs.append(v)
        values.append(float('-inf') if unbounded else value)

    payment = float(np.dot(linear, scenario.net_load.values))
    return BestResponse(
        scheme=scheme, rho=rho, g=g, gamma=gamma, x=np.vstack(xs), v=np.vstack(vs),
        generator_value=gen_value, class_values=values, load_payment=payment,
    )


def dual_value(rho: np.ndarray, scenario: Scenario, scheme: str = Config.DEFAULT_SCHEME) -> float:
    """
    Lagrangian dual function at price rho

    Sum of the M + 1 decoupled subproblem optima plus the load payment
    sum_k s_k rho_k l_k. Never exceeds the primal optimum.
    """
    response = agent_best_response(rho, scenario, scheme)
    logger.debug(f"Dual value {response.total:.9g} at price with peak {np.max(np.abs(rho)):.3g}")
    return response.total


@dataclass(frozen=True)
class EulerLagrangeReport:
    generator: float
    per_class: List[float]
    terminal_ramp: float
    terminal_price: float

    def to_dict(self) -> dict:
        return asdict(self)


def euler_lagrange_residuals(rho: np.ndarray, response: BestResponse, scenario: Scenario,
                             skip_nodes: int = Config.DEFAULT_SKIP_NODES) -> EulerLagrangeReport:
    """
    Residuals of the subproblem optimality equations at interior nodes

    generator: c_g'(g) - 2 kappa gamma' - rho
    class i:   c_i'(x_i) + alpha_i rho - rho'
    plus the terminal values 2 kappa gamma(T) and rho(T).
    """
    rho = np.asarray(rho, dtype=float)
    grid = scenario.grid
    ks = node_range(grid.steps, skip_nodes, response.scheme)
    kappa = scenario.generation.ramp_kappa
    rho_dot = time_derivative(rho, grid.h)
    gamma_dot = time_derivative(response.gamma, grid.h)

    r_gen = scenario.generation.cost_g.d1(response.g) - 2.0 * kappa * gamma_dot - rho
    per_class = []
    for i, cls in enumerate(scenario.classes):
        r = cls.cost.d1(response.x[i]) + cls.alpha * rho - rho_dot
        per_class.append(float(np.max(np.abs(r[ks]))) if ks.size else 0.0)

    return EulerLagrangeReport(
        generator=float(np.max(np.abs(r_gen[ks]))) if ks.size else 0.0,
        per_class=per_class,
        terminal_ramp=float(abs(2.0 * kappa * response.gamma[-1])),
        terminal_price=float(abs(rho[-1])),
    )


# ---------------------------------------------------------------------------
# Averages, welfare and quality of service
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PriceReport:
    """Average-price identities and welfare figures of one solution"""
    class_names: List[str]
    price: List[float]
    rho_avg: float
    mc_g_avg: float
    mv_avg: List[float]
    e_d: List[Optional[float]]
    e_g: float
    identity_mv: List[Optional[float]]
    identity_mc: float
    applicable: List[bool]
    price_consistency: float
    welfare: float
    qos: List[float]
    dual_value: Optional[float] = None
    duality_gap: Optional[float] = None
    units: str = 'cost per GW of balance'

    def to_dict(self) -> dict:
        return asdict(self)


def _right_limit(y: np.ndarray) -> np.ndarray:
    """Node 0 replaced by node 1: the state jumps at t = 0 and averages run over (0, T]"""
    out = np.array(y, dtype=float)
    out[0] = out[1]
    return out


def welfare_and_qos(solution: DiscreteSolution, scenario: Scenario) -> Tuple[float, np.ndarray]:
    """
    Social welfare (negative total cost) and per-class QoS integral of c_i(x_i)
    """
    t = solution.times
    qos = np.array([trapezoid(cls.cost.value(solution.x[i]), t)
                    for i, cls in enumerate(scenario.classes)])
    return -solution.objective, qos


def averages(solution: DiscreteSolution, scenario: Scenario, with_dual: bool = True,
             strict: bool = False) -> PriceReport:
    """
    Time averages of price, generator marginal cost and class marginal values

    Identity residuals are relative to the price scale max |price|.

    Args:
        solution: Converged solution
        scenario: Scenario it was solved for
        with_dual: Also evaluate the dual function at the solution's price
        strict: Raise AlphaZero instead of marking a leakage-free class not applicable

    Returns:
        PriceReport
    """
    t = solution.times
    T = scenario.grid.horizon
    price = equilibrium_price(solution)
    scale = float(np.max(np.abs(price)))
    norm = scale if scale > 0 else 1.0

    def avg(y):
        return float(trapezoid(y, t) / T)

    rho_avg = avg(price)
    mc_g_avg = avg(scenario.generation.cost_g.d1(solution.g))
    kappa = scenario.generation.ramp_kappa
    e_g = 2.0 * kappa * (solution.gamma[1] - solution.gamma[-1])
    identity_mc = (rho_avg - mc_g_avg - e_g / T) / norm

    mv_avg, e_d, identity_mv, applicable = [], [], [], []
    for i, cls in enumerate(scenario.classes):
        mv = avg(_right_limit(-cls.cost.d1(solution.x[i])))
        mv_avg.append(mv)
        if cls.alpha == 0.0:
            if strict:
                raise AlphaZero(f"Class '{cls.name}' has alpha = 0; marginal-value identity undefined")
            e_d.append(None)
            identity_mv.append(None)
            applicable.append(False)
            continue
        ed = (price[-1] - price[1]) / cls.alpha
        e_d.append(float(ed))
        identity_mv.append(float((rho_avg - mv / cls.alpha - ed / T) / norm))
        applicable.append(True)

    interior = slice(1, solution.steps)
    consistency = float(np.max(np.abs(price[interior] - solution.rho[interior])))
    welfare, qos = welfare_and_qos(solution, scenario)

    dual = gap = None
    if with_dual:
        dual = dual_value(solution.rho, scenario, solution.scheme)
        gap = solution.objective - dual

    logger.info(f"Price report: rho_avg={rho_avg:.4g}, MC_g avg={mc_g_avg:.4g}, "
                f"welfare={welfare:.6g}" + (f", duality gap={gap:.3e}" if gap is not None else ""))
    return PriceReport(
        class_names=list(solution.class_names),
        price=price.tolist(),
        rho_avg=rho_avg,
        mc_g_avg=mc_g_avg,
        mv_avg=mv_avg,
        e_d=e_d,
        e_g=float(e_g),
        identity_mv=identity_mv,
        identity_mc=float(identity_mc),
        applicable=applicable,
        price_consistency=consistency,
        welfare=float(welfare),
        qos=qos.tolist(),
        dual_value=dual,
        duality_gap=gap,
    )


def dispatch_summary(solution: DiscreteSolution, scenario: Scenario) -> Dict[str, object]:
    """Peak, spread and ramp of optimal generation against the uncontrolled case"""
    load = scenario.net_load
    return {
        'peak_generation': float(np.max(solution.g)),
        'peak_load': float(np.max(load.values)),
        'std_generation': float(np.std(solution.g)),
        'std_load': float(np.std(load.values)),
        'max_ramp': float(np.max(np.abs(solution.gamma))),
        'max_load_ramp': float(np.max(np.abs(load.derivative))),
        'soc_utilisation': {
            cls.name: float(np.max(np.abs(solution.x[i])) / cls.capacity)
            for i, cls in enumerate(scenario.classes)
        },
    }

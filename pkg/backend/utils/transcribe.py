"""
Direct transcription of the dispatch program
Builds the equality-constrained discrete program on the time grid and solves
it by Newton iteration on the KKT system
"""

import logging
import time
import warnings
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.linalg import LinAlgError, solve_banded
from scipy.sparse.linalg import MatrixRankWarning, spsolve

from config import Config
from .exceptions import MaxIters, SingularKKT, ValidationError
from .scenario import Scenario, TimeGrid

logger = logging.getLogger(__name__)

# Weight of the new endpoint in each interval row
SCHEME_THETA = {'euler': 0.0, 'trapezoidal': 0.5}


def quadrature_weights(grid: TimeGrid, scheme: str) -> Tuple[np.ndarray, np.ndarray]:
    """
    Node weights for the state costs and for the ramp cost

    Args:
        grid: Time grid
        scheme: 'euler' or 'trapezoidal'

    Returns:
        (state_weights, ramp_weights), each of length N+1
    """
    h = grid.h
    n = grid.steps + 1
    if scheme == 'trapezoidal':
        w = np.full(n, h)
        w[0] = w[-1] = 0.5 * h
        return w, w.copy()
    # Right-endpoint rule for x and g, every gamma node charged
    w_state = np.full(n, h)
    w_state[0] = 0.0
    return w_state, np.full(n, h)


def balance_scale(grid: TimeGrid, scheme: str) -> np.ndarray:
    if scheme == 'trapezoidal':
        return quadrature_weights(grid, scheme)[0]
    return np.full(grid.steps + 1, grid.h)


def node_costate(interval_values: np.ndarray, scheme: str) -> np.ndarray:
    """
    Map per-interval multipliers (first axis N) to node values (first axis N+1)

    Node N takes the transversality value 0; the raw last-interval values are
    kept on DiscreteSolution and certified there.
    """
    nu = np.asarray(interval_values, dtype=float)
    out = np.zeros((nu.shape[0] + 1,) + nu.shape[1:])
    if scheme == 'euler':
        out[:-1] = nu
    else:
        out[0] = nu[0]
        out[1:-1] = 0.5 * (nu[:-1] + nu[1:])
    return out


@dataclass(frozen=True)
class VariableLayout:
    """Flat indices of x, z, u (M x N+1) and g, gamma (N+1); node k owns one contiguous block"""
    M: int
    N: int

    @property
    def block(self) -> int:
        return 3 * self.M + 2

    @property
    def size(self) -> int:
        return (self.N + 1) * self.block

    def _grid(self, offset: int) -> np.ndarray:
        k = np.arange(self.N + 1)
        i = np.arange(self.M)[:, None]
        return k[None, :] * self.block + offset + i

    @property
    def x(self) -> np.ndarray:
        return self._grid(0)

    @property
    def z(self) -> np.ndarray:
        return self._grid(self.M)

    @property
    def u(self) -> np.ndarray:
        return self._grid(2 * self.M)

    @property
    def g(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.block + 3 * self.M

    @property
    def gamma(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.block + 3 * self.M + 1


@dataclass(frozen=True)
class RowLayout:
    """Row indices of every constraint family"""
    M: int
    N: int
    scheme: str = Config.DEFAULT_SCHEME

    @property
    def pin_x(self) -> np.ndarray:
        return np.arange(self.M)

    @property
    def pin_z(self) -> np.ndarray:
        return self.M + np.arange(self.M)

    @property
    def balance(self) -> np.ndarray:
        return 2 * self.M + np.arange(self.N + 1)

    @property
    def x_dyn(self) -> np.ndarray:
        start = 2 * self.M + self.N + 1
        return start + np.arange(self.N * self.M).reshape(self.N, self.M)

    @property
    def z_dyn(self) -> np.ndarray:
        start = 2 * self.M + self.N + 1 + self.N * self.M
        return start + np.arange(self.N * self.M).reshape(self.N, self.M)

    @property
    def g_dyn(self) -> np.ndarray:
        start = 2 * self.M + self.N + 1 + 2 * self.N * self.M
        return start + np.arange(self.N)

    @property
    def closure(self) -> np.ndarray:
        start = 2 * self.M + self.N + 1 + self.N * (2 * self.M + 1)
        return start + np.arange(self.M)

    @property
    def split(self) -> np.ndarray:
        """Euler only: classes 1..M-1 share the last control increment of class 0"""
        start = 2 * self.M + self.N + 1 + self.N * (2 * self.M + 1) + self.M
        count = self.M - 1 if self.scheme == 'euler' else 0
        return start + np.arange(count)

    @property
    def size(self) -> int:
        return 2 * self.M + (self.N + 1) + self.N * (2 * self.M + 1) + self.M + self.split.size


@dataclass(frozen=True)
class DiscreteProgram:
    """Convex objective f(v) subject to A v = b"""
    scenario: Scenario
    scheme: str
    A: sparse.csr_matrix
    b: np.ndarray
    variables: VariableLayout
    rows: RowLayout
    w_state: np.ndarray
    w_ramp: np.ndarray
    s_balance: np.ndarray

    @property
    def n_vars(self) -> int:
        return self.variables.size

    @property
    def n_rows(self) -> int:
        return self.rows.size

    def unpack(self, v: np.ndarray):
        """Split a flat point into (x, z, u, g, gamma)"""
        lay = self.variables
        return v[lay.x], v[lay.z], v[lay.u], v[lay.g], v[lay.gamma]

    def pack(self, x, z, u, g, gamma) -> np.ndarray:
        lay = self.variables
        v = np.empty(lay.size)
        v[lay.x], v[lay.z], v[lay.u] = x, z, u
        v[lay.g], v[lay.gamma] = g, gamma
        return v

    def gradient(self, v: np.ndarray) -> np.ndarray:
        sc = self.scenario
        lay = self.variables
        x, _, _, g, gamma = self.unpack(v)
        grad = np.zeros_like(v)
        for i, cls in enumerate(sc.classes):
            grad[lay.x[i]] = self.w_state * cls.cost.d1(x[i])
        grad[lay.g] = self.w_state * sc.generation.cost_g.d1(g)
        grad[lay.gamma] = self.w_ramp * sc.generation.ramp_marginal(gamma)
        return grad

    def hessian_diagonal(self, v: np.ndarray) -> np.ndarray:
        sc = self.scenario
        lay = self.variables
        x, _, _, g, _ = self.unpack(v)
        diag = np.zeros_like(v)
        for i, cls in enumerate(sc.classes):
            diag[lay.x[i]] = self.w_state * cls.cost.d2(x[i])
        diag[lay.g] = self.w_state * sc.generation.cost_g.d2(g)
        diag[lay.gamma] = self.w_ramp * 2.0 * sc.generation.ramp_kappa
        return diag

    def ordering(self) -> np.ndarray:
        """
        Permutation of [variables; rows] that groups everything owned by node k

        Interval rows sit between node k and node k+1, which keeps the KKT
        matrix banded with a bandwidth of a few node blocks.
        """
        N = self.variables.N
        lay, rows = self.variables, self.rows
        var_node = np.arange(lay.size) // lay.block
        row_node = np.empty(rows.size)
        row_rank = np.empty(rows.size)
        row_node[rows.pin_x] = 0
        row_node[rows.pin_z] = 0
        row_rank[np.r_[rows.pin_x, rows.pin_z]] = 1
        row_node[rows.balance] = np.arange(N + 1)
        row_rank[rows.balance] = 1
        for family in (rows.x_dyn, rows.z_dyn):
            row_node[family] = np.arange(N)[:, None]
            row_rank[family] = 2
        row_node[rows.g_dyn] = np.arange(N)
        row_rank[rows.g_dyn] = 2
        row_node[rows.closure] = N
        row_rank[rows.closure] = 3
        row_node[rows.split] = N - 1
        row_rank[rows.split] = 3

        node = np.r_[var_node, row_node]
        rank = np.r_[np.zeros(lay.size), row_rank]
        return np.lexsort((np.arange(node.size), rank, node))


def build(scenario: Scenario, scheme: str = Config.DEFAULT_SCHEME) -> DiscreteProgram:
    """
    Transcribe the scenario into a sparse equality-constrained program

    Args:
        scenario: Validated scenario
        scheme: 'euler' or 'trapezoidal'

    Returns:
        DiscreteProgram with constraint matrix A and right-hand side b
    """
    if scheme not in SCHEME_THETA:
        raise ValidationError(f"Unknown scheme '{scheme}'; choose from {Config.SCHEMES}")

    grid = scenario.grid
    M, N, h = scenario.M, grid.steps, grid.h
    theta = SCHEME_THETA[scheme]
    lay = VariableLayout(M, N)
    rows = RowLayout(M, N, scheme)
    w_state, w_ramp = quadrature_weights(grid, scheme)
    s = balance_scale(grid, scheme)

    r_idx: List[np.ndarray] = []
    c_idx: List[np.ndarray] = []
    vals: List[np.ndarray] = []
    b = np.zeros(rows.size)

    def put(r, c, v):
        r, c = np.broadcast_arrays(np.asarray(r), np.asarray(c))
        r_idx.append(r.ravel())
        c_idx.append(c.ravel())
        vals.append(np.broadcast_to(np.asarray(v, dtype=float), r.shape).ravel())

    # Initial state pinned class by class
    put(rows.pin_x, lay.x[:, 0], 1.0)
    put(rows.pin_z, lay.z[:, 0], 1.0)
    b[rows.pin_x] = scenario.x0
    b[rows.pin_z] = scenario.z0

    # Power balance, written as s_k * (-g_k - z_sigma,k) = -s_k * l_k
    put(rows.balance, lay.g, -s)
    put(rows.balance[None, :], lay.z, -s[None, :])
    b[rows.balance] = -s * scenario.net_load.values

    # x_{k+1} - x_k + h * avg(alpha x + z) = 0
    alpha = scenario.alphas[None, :]
    xk, xk1 = lay.x[:, :-1].T, lay.x[:, 1:].T
    zk, zk1 = lay.z[:, :-1].T, lay.z[:, 1:].T
    uk, uk1 = lay.u[:, :-1].T, lay.u[:, 1:].T
    put(rows.x_dyn, xk1, 1.0 + theta * h * alpha)
    put(rows.x_dyn, xk, -1.0 + (1.0 - theta) * h * alpha)
    put(rows.x_dyn, zk1, theta * h)
    put(rows.x_dyn, zk, (1.0 - theta) * h)

    # z_{k+1} - z_k - h * avg(u) = 0
    put(rows.z_dyn, zk1, 1.0)
    put(rows.z_dyn, zk, -1.0)
    put(rows.z_dyn, uk1, -theta * h)
    put(rows.z_dyn, uk, -(1.0 - theta) * h)

    # g_{k+1} - g_k - h * avg(gamma) = 0
    put(rows.g_dyn, lay.g[1:], 1.0)
    put(rows.g_dyn, lay.g[:-1], -1.0)
    put(rows.g_dyn, lay.gamma[1:], -theta * h)
    put(rows.g_dyn, lay.gamma[:-1], -(1.0 - theta) * h)

    # Closure of the free control mode
    if scheme == 'euler':
        put(rows.closure, lay.u[:, N], 1.0)
        put(rows.closure, lay.u[:, N - 1], -1.0)
        # z_N only meets the balance row, so the class split of the last increment is fixed
        others = np.arange(1, M)
        put(rows.split, lay.u[others, N - 1], 1.0)
        put(rows.split, lay.u[others, N - 2], -1.0)
        put(rows.split, lay.u[0, N - 1], -1.0)
        put(rows.split, lay.u[0, N - 2], 1.0)
    else:
        put(rows.closure, lay.u[:, N], 1.0)
        put(rows.closure, lay.u[:, N - 1], -2.0)
        put(rows.closure, lay.u[:, N - 2], 1.0)

    A = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(r_idx), np.concatenate(c_idx))),
        shape=(rows.size, lay.size),
    )
    A.eliminate_zeros()

    logger.debug(f"Built {scheme} program: {lay.size} variables, {rows.size} rows, nnz={A.nnz}")
    return DiscreteProgram(
        scenario=scenario, scheme=scheme, A=A, b=b, variables=lay, rows=rows,
        w_state=w_state, w_ramp=w_ramp, s_balance=s,
    )


def objective(program: DiscreteProgram, point) -> float:
    """
    Quadrature of c_g(g) + kappa * gamma^2 + sum_i c_i(x_i)

    Args:
        program: Discrete program
        point: Flat vector or DiscreteSolution

    Returns:
        Objective value
    """
    if isinstance(point, DiscreteSolution):
        v = program.pack(point.x, point.z, point.u, point.g, point.gamma)
    else:
        v = np.asarray(point, dtype=float)
    sc = program.scenario
    x, _, _, g, gamma = program.unpack(v)
    total = np.dot(program.w_state, sc.generation.cost_g.value(g))
    total += np.dot(program.w_ramp, sc.generation.ramp_cost(gamma))
    for i, cls in enumerate(sc.classes):
        total += np.dot(program.w_state, cls.cost.value(x[i]))
    return float(total)


def reduced_cost(scenario: Scenario, x: np.ndarray, z: np.ndarray, u: np.ndarray,
                 scheme: str = Config.DEFAULT_SCHEME) -> float:
    """
    Running cost with the balance constraint eliminated

    c_X(x) + c_g(l - z_sigma) + kappa * (u_sigma - l')^2 integrated with the
    scheme's quadrature. Agrees with `objective` on feasible points up to the
    discretisation error of l'.
    """
    w_state, w_ramp = quadrature_weights(scenario.grid, scheme)
    load = scenario.net_load
    g = load.values - np.sum(z, axis=0)
    gamma = load.derivative - np.sum(u, axis=0)
    total = np.dot(w_state, scenario.generation.cost_g.value(g))
    total += np.dot(w_ramp, scenario.generation.ramp_cost(gamma))
    for i, cls in enumerate(scenario.classes):
        total += np.dot(w_state, cls.cost.value(x[i]))
    return float(total)


@dataclass(frozen=True)
class DiscreteSolution:
    """
    Primal trajectories and node multipliers of a solved program

    Arrays indexed by class are shaped (M, N+1); node arrays are (N+1,).
    """
    scheme: str
    times: np.ndarray
    class_names: Tuple[str, ...]
    x: np.ndarray
    z: np.ndarray
    u: np.ndarray
    g: np.ndarray
    gamma: np.ndarray
    lam: np.ndarray
    beta: np.ndarray
    rho: np.ndarray
    eta: np.ndarray
    objective: float
    beta_raw: Optional[np.ndarray] = None
    newton_iters: int = 0
    kkt_residual: float = 0.0
    seconds: float = 0.0
    # Raw multipliers of the last interval rows, per class; None when not stored
    lam_terminal: Optional[np.ndarray] = None
    beta_terminal: Optional[np.ndarray] = None
    per_class_costates: bool = True

    @property
    def h(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def steps(self) -> int:
        return self.times.size - 1

    @property
    def x_sigma(self) -> np.ndarray:
        return np.sum(self.x, axis=0)

    @property
    def z_sigma(self) -> np.ndarray:
        return np.sum(self.z, axis=0)

    @property
    def u_sigma(self) -> np.ndarray:
        return np.sum(self.u, axis=0)

    @property
    def costate(self) -> np.ndarray:
        """Class-averaged lambda"""
        return np.mean(self.lam, axis=0)

    @property
    def beta_common(self) -> np.ndarray:
        return np.mean(self.beta, axis=0)


class BandedKKTSolver:
    """
    Solves [[H, A^T], [A, 0]] w = r with a banded LU factorisation

    `ordering` permutes [variables; rows] into a banded order. The sparsity
    pattern is fixed; only the Hessian diagonal changes between iterations.
    """

    def __init__(self, A: sparse.spmatrix, ordering: np.ndarray):
        A = A.tocoo()
        n = A.shape[1]
        self.size = n + A.shape[0]
        self.perm = ordering
        position = np.empty_like(self.perm)
        position[self.perm] = np.arange(self.perm.size)

        diag = np.arange(n)
        rows = np.r_[diag, n + A.row, A.col]
        cols = np.r_[diag, A.col, n + A.row]
        self._pr = position[rows]
        self._pc = position[cols]
        self._a_vals = np.r_[A.data, A.data]
        self.lower = int(max(0, np.max(self._pr - self._pc)))
        self.upper = int(max(0, np.max(self._pc - self._pr)))
        logger.debug(f"KKT size {self.size}, bandwidth ({self.lower}, {self.upper})")

    def solve(self, hessian_diag: np.ndarray, rhs: np.ndarray) -> np.ndarray:
        ab = np.zeros((self.lower + self.upper + 1, self.size))
        ab[self.upper + self._pr - self._pc, self._pc] = np.r_[hessian_diag, self._a_vals]
        try:
            w = solve_banded((self.lower, self.upper), ab, rhs[self.perm])
        except (LinAlgError, ValueError) as e:
            raise SingularKKT(f"Banded KKT factorisation failed: {e}")
        out = np.empty_like(w)
        out[self.perm] = w
        return out


class SparseKKTSolver:
    """General sparse LU on the KKT matrix"""

    def __init__(self, A: sparse.spmatrix):
        self.A = sparse.csr_matrix(A)

    def solve(self, hessian_diag: np.ndarray, rhs: np.ndarray) -> np.ndarray:
        K = sparse.bmat([[sparse.diags(hessian_diag), self.A.T], [self.A, None]], format='csc')
        try:
            with warnings.catch_warnings():
                warnings.simplefilter('error', MatrixRankWarning)
                return spsolve(K, rhs)
        except (MatrixRankWarning, RuntimeError) as e:
            raise SingularKKT(f"Sparse KKT solve failed: {e}")


class DenseKKTSolver:
    """Full dense KKT solve, used for small programs and as a test oracle"""

    def __init__(self, A: sparse.spmatrix):
        self.A = A.toarray()

    def solve(self, hessian_diag: np.ndarray, rhs: np.ndarray) -> np.ndarray:
        m, n = self.A.shape
        K = np.zeros((n + m, n + m))
        K[:n, :n] = np.diag(hessian_diag)
        K[:n, n:] = self.A.T
        K[n:, :n] = self.A
        try:
            return np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError as e:
            raise SingularKKT(f"Dense KKT solve failed: {e}")


def _linear_solver(program: DiscreteProgram, method: str):
    if method == 'dense' or (method == 'auto' and
                             program.n_vars + program.n_rows < Config.DENSE_FALLBACK_LIMIT):
        return DenseKKTSolver(program.A)
    if method in ('banded', 'auto'):
        return BandedKKTSolver(program.A, program.ordering())
    if method == 'sparse':
        return SparseKKTSolver(program.A)
    raise ValidationError(f"Unknown linear solver '{method}'")


@dataclass(frozen=True)
class NewtonResult:
    v: np.ndarray
    nu: np.ndarray
    iters: int
    residual: float


def newton_kkt(A: sparse.spmatrix, b: np.ndarray, gradient: Callable, hessian_diagonal: Callable,
               v0: np.ndarray, linear, tol: float = Config.NEWTON_TOL,
               max_iters: int = Config.NEWTON_MAX_ITERS) -> NewtonResult:
    """
    Infeasible-start Newton for min f(v) s.t. A v = b with separable f

    Stationarity is grad f = A^T nu. Steps are damped by backtracking on the
    2-norm of the KKT residual.

    Args:
        A, b: Linear equality constraints
        gradient: v -> grad f(v)
        hessian_diagonal: v -> diagonal of the Hessian of f
        v0: Start point
        linear: KKT linear solver with solve(hessian_diag, rhs)
        tol: Bound on the infinity norm of the KKT residual
        max_iters: Iteration cap

    Raises:
        MaxIters: Tolerance not reached within max_iters
        SingularKKT: Rank-deficient KKT matrix
    """
    n = A.shape[1]
    AT = A.T.tocsr()

    def residual(v, nu):
        return np.r_[gradient(v) - AT @ nu, A @ v - b]

    v = np.asarray(v0, dtype=float).copy()
    nu = np.zeros(A.shape[0])
    r = residual(v, nu)
    iters = 0
    while np.max(np.abs(r)) > tol:
        if iters >= max_iters:
            raise MaxIters(
                f"No convergence after {max_iters} Newton iterations "
                f"(KKT residual {np.max(np.abs(r)):.3e} > {tol:g})"
            )
        step = linear.solve(hessian_diagonal(v), -r)
        if not np.all(np.isfinite(step)):
            raise SingularKKT("Non-finite Newton step")
        dv, dnu = step[:n], -step[n:]

        merit = np.linalg.norm(r)
        t = 1.0
        for _ in range(Config.MAX_BACKTRACKS):
            r_trial = residual(v + t * dv, nu + t * dnu)
            if np.linalg.norm(r_trial) <= (1.0 - 0.01 * t) * merit:
                break
            t *= Config.BACKTRACK_FACTOR
        else:
            logger.warning(f"Line search exhausted at iteration {iters}; taking step t={t:.2e}")
            r_trial = residual(v + t * dv, nu + t * dnu)

        v, nu, r = v + t * dv, nu + t * dnu, r_trial
        iters += 1
        logger.debug(f"Newton iter {iters}: t={t:.3g} residual={np.max(np.abs(r)):.3e}")

    return NewtonResult(v=v, nu=nu, iters=iters, residual=float(np.max(np.abs(r))))


def _start_point(program: DiscreteProgram) -> np.ndarray:
    sc = program.scenario
    lay = program.variables
    v = np.zeros(lay.size)
    v[lay.x[:, 0]] = sc.x0
    v[lay.z[:, 0]] = sc.z0
    g = sc.net_load.values.copy()
    g[0] -= np.sum(sc.z0)
    v[lay.g] = g
    v[lay.gamma] = sc.net_load.derivative
    return v


def solve(program: DiscreteProgram, tol: float = Config.NEWTON_TOL,
          max_iters: int = Config.NEWTON_MAX_ITERS,
          linear_solver: str = 'auto') -> DiscreteSolution:
    """
    Solve the discrete program by Newton iteration on its KKT system

    Args:
        program: Program from `build`
        tol: Bound on the infinity norm of the KKT residual
        max_iters: Newton iteration cap
        linear_solver: 'auto', 'banded', 'sparse' or 'dense'

    Returns:
        DiscreteSolution
    """
    started = time.perf_counter()
    result = newton_kkt(
        program.A, program.b, program.gradient, program.hessian_diagonal,
        _start_point(program), _linear_solver(program, linear_solver),
        tol=tol, max_iters=max_iters,
    )
    solution = _assemble(program, result.v, result.nu, result.iters, result.residual,
                         time.perf_counter() - started)
    logger.info(f"Solved {program.scheme} program N={program.variables.N} "
                f"M={program.variables.M}: objective={solution.objective:.6g}, "
                f"{result.iters} Newton iterations, {solution.seconds:.2f} s")
    return solution


def _assemble(program: DiscreteProgram, v: np.ndarray, nu: np.ndarray,
              iters: int, residual: float, seconds: float) -> DiscreteSolution:
    rows = program.rows
    sc = program.scenario
    x, z, u, g, gamma = program.unpack(v)

    nu_x, nu_z, nu_g = nu[rows.x_dyn], nu[rows.z_dyn], nu[rows.g_dyn]
    lam = node_costate(nu_x, program.scheme).T
    beta_raw = node_costate(nu_z, program.scheme).T
    eta = node_costate(nu_g, program.scheme)

    return DiscreteSolution(
        scheme=program.scheme,
        times=sc.grid.times,
        class_names=tuple(sc.class_names),
        x=x, z=z, u=u, g=g, gamma=gamma,
        lam=lam,
        beta=beta_raw - eta[None, :],
        rho=-nu[rows.balance],
        eta=eta,
        objective=objective(program, v),
        beta_raw=beta_raw,
        newton_iters=iters,
        kkt_residual=residual,
        seconds=seconds,
        lam_terminal=nu_x[-1].copy(),
        beta_terminal=nu_z[-1] - nu_g[-1],
    )


def solve_scenario(scenario: Scenario, scheme: str = Config.DEFAULT_SCHEME,
                   tol: float = Config.NEWTON_TOL,
                   max_iters: int = Config.NEWTON_MAX_ITERS) -> DiscreteSolution:
    """Build and solve in one call"""
    return solve(build(scenario, scheme), tol=tol, max_iters=max_iters)

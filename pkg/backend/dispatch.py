#!/usr/bin/env python3
"""
Demand-dispatch command line
Solve a scenario, re-certify a stored solution, recover load classes from
two observed ones, and run grid-refinement sweeps
"""

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

# Add backend directory to Python path
backend_dir = Path(__file__).parent
sys.path.insert(0, str(backend_dir))

from config import Config, config as configs
from utils.collapse import reconstruct, recover_class, smooth_derivative_check
from utils.economics import (agent_best_response, averages, dispatch_summary,
                             equilibrium_price, euler_lagrange_residuals, normalized_price)
from utils.exceptions import (AlphaZero, BracketFailure, CheckFailure, DispatchError,
                              GridTooCoarse, MaxIters, ParseError, SingularKKT,
                              SingularPair, SumMismatch, ValidationError)
from utils.exporter import ResultStore, RunManifest, read_manifest, read_solution_csv
from utils.optimality import (CheckResult, certify, collapse_residual, convergence_order,
                              optimality_residuals)
from utils.scenario import Scenario, load_scenario_file
from utils.transcribe import DiscreteSolution, build, objective, solve

logger = logging.getLogger('dispatch')

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SOLVER = 3
EXIT_CHECK = 4
EXIT_SINGULAR_PAIR = 5

_EXIT_CODES = (
    (SingularPair, EXIT_SINGULAR_PAIR),
    (CheckFailure, EXIT_CHECK),
    ((MaxIters, SingularKKT, BracketFailure, GridTooCoarse), EXIT_SOLVER),
    ((ParseError, ValidationError, SumMismatch, AlphaZero), EXIT_INPUT),
)


def setup_logging(config: Config = Config()):
    level = 'DEBUG' if config.DEBUG else str(config.LOG_LEVEL).upper()
    handlers = [logging.StreamHandler()]
    if config.LOG_FILE:
        handlers.append(logging.FileHandler(config.LOG_FILE))
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format=config.LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


def exit_code_for(error: DispatchError) -> int:
    for kinds, code in _EXIT_CODES:
        if isinstance(error, kinds):
            return code
    return EXIT_SOLVER


def _tolerances(args) -> dict:
    return {
        'newton_tol': getattr(args, 'tol', Config.NEWTON_TOL),
        'costate_rtol': Config.COSTATE_RTOL,
        'gap_rtol': Config.GAP_RTOL,
        'check_residual_rtol': Config.CHECK_RESIDUAL_RTOL,
        'balance_rtol': Config.BALANCE_RTOL,
    }


def _parse_steps(text: str) -> List[int]:
    try:
        steps = [int(s) for s in text.split(',') if s.strip()]
    except ValueError:
        raise ParseError(f"--steps must be a comma-separated list of integers, got '{text}'")
    if not steps:
        raise ParseError("--steps is empty")
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise ValidationError(f"--steps must be strictly increasing, got {steps}")
    return steps


def _print_checks(checks: Sequence[CheckResult]):
    table = pd.DataFrame({
        'check': [c.name for c in checks],
        'value': [f'{c.value:.3e}' for c in checks],
        'tolerance': [f'{c.tolerance:.3e}' for c in checks],
        'status': [c.status for c in checks],
    })
    print(table.to_string(index=False))


def duality_checks(solution: DiscreteSolution, scenario: Scenario, primal: float) -> List[CheckResult]:
    """Weak duality always; strong duality only when the dual value is finite"""
    response = agent_best_response(solution.rho, scenario, solution.scheme)
    eps = Config.GAP_RTOL * (1.0 + abs(primal))
    gap = primal - response.total
    checks = [CheckResult('weak_duality', -gap, eps)]
    if np.isfinite(response.total):
        checks.append(CheckResult('duality_gap', abs(gap), eps))
    else:
        logger.warning(f"Dual value unbounded under the {solution.scheme} scheme; "
                       f"skipping the duality gap check")
    return checks


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------

def cmd_solve(args) -> int:
    started = time.perf_counter()
    scenario = load_scenario_file(args.scenario, steps=args.steps)
    solution = solve(build(scenario, args.scheme), tol=args.tol, max_iters=args.max_iters)

    store = ResultStore(args.out)
    price = equilibrium_price(solution)
    store.write_solution(solution, price)

    residuals = {'grid': {'steps': solution.steps, 'h': solution.h, 'scheme': solution.scheme}}
    try:
        report = optimality_residuals(solution, scenario, args.skip_nodes)
        checks = certify(solution, scenario, args.skip_nodes, report)
        residuals.update({
            'report': report.to_dict(),
            'collapse_residual': collapse_residual(solution, scenario, args.skip_nodes),
            'checks': [{'name': c.name, 'value': c.value, 'tolerance': c.tolerance,
                        'applicable': c.applicable, 'passed': c.passed} for c in checks],
        })
    except GridTooCoarse as e:
        logger.warning(f"Skipping residual certification: {e}")
        residuals['report'] = None
    residuals['dispatch'] = dispatch_summary(solution, scenario)
    store.write_json(Config.RESIDUAL_FILE, residuals)

    prices = averages(solution, scenario, with_dual=False)
    response = agent_best_response(solution.rho, scenario, solution.scheme)
    prices = replace(prices, dual_value=response.total,
                     duality_gap=solution.objective - response.total)
    payload = prices.to_dict()
    payload['normalized_price'] = normalized_price(price)
    payload['euler_lagrange'] = euler_lagrange_residuals(
        solution.rho, response, scenario, args.skip_nodes).to_dict()
    store.write_json(Config.PRICE_FILE, payload)

    store.write_manifest(RunManifest(
        command='solve',
        scenario_hash=scenario.source_hash,
        scenario_name=scenario.name,
        steps=scenario.grid.steps,
        horizon_hours=scenario.grid.horizon,
        scheme=solution.scheme,
        tolerances=_tolerances(args),
        seconds=time.perf_counter() - started,
        objective=solution.objective,
        newton_iters=solution.newton_iters,
        terminal_multipliers={'lambda': solution.lam_terminal, 'beta': solution.beta_terminal},
    ))
    print(f"objective={solution.objective:.12g} newton_iters={solution.newton_iters} "
          f"kkt_residual={solution.kkt_residual:.3e} -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------

def _load_stored(args):
    """Scenario resampled to the stored grid, and the stored solution"""
    manifest = read_manifest(Path(args.solution).parent) or {}
    scheme = args.scheme or manifest.get('scheme', Config.DEFAULT_SCHEME)
    template = load_scenario_file(args.scenario)
    stored = read_solution_csv(args.solution, template, scheme)
    scenario = load_scenario_file(args.scenario, steps=stored.steps)
    return scenario, _with_terminal(stored, manifest)


def _with_terminal(stored: DiscreteSolution, manifest: dict) -> DiscreteSolution:
    """Attach the manifest's terminal multipliers when they match the stored classes"""
    terminal = manifest.get('terminal_multipliers') or {}
    if manifest.get('steps') != stored.steps or manifest.get('scheme') != stored.scheme:
        return stored
    try:
        lam = np.asarray(terminal['lambda'], dtype=float)
        beta = np.asarray(terminal['beta'], dtype=float)
    except (KeyError, TypeError, ValueError):
        return stored
    M = len(stored.class_names)
    if lam.shape != (M,) or beta.shape != (M,):
        return stored
    return replace(stored, lam_terminal=lam, beta_terminal=beta)


def cmd_check(args) -> int:
    scenario, stored = _load_stored(args)
    primal = objective(build(scenario, stored.scheme), stored)
    stored = replace(stored, objective=primal)

    checks = certify(stored, scenario, args.skip_nodes)
    checks += duality_checks(stored, scenario, primal)
    _print_checks(checks)

    failed = [c.name for c in checks if not c.passed]
    if failed:
        raise CheckFailure(failed)
    logger.info(f"All {len(checks)} checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# recover
# ---------------------------------------------------------------------------

def cmd_recover(args) -> int:
    scenario, stored = _load_stored(args)
    sources = [s.strip() for s in args.from_classes.split(',')]
    if len(sources) != 2:
        raise ParseError(f"--from needs exactly two class names, got '{args.from_classes}'")
    ia, ib = (scenario.class_index(s) for s in sources)
    rec = reconstruct(stored.x[ia], stored.x[ib], scenario.classes[ia], scenario.classes[ib])

    if args.target == 'all':
        targets = [i for i in range(scenario.M) if i not in (ia, ib)]
    else:
        targets = [scenario.class_index(args.target)]

    columns = {'t': stored.times, 'lambda': rec.lam, 'dlambda': rec.lam_dot}
    summary = {'sources': list(rec.sources), 'condition': rec.condition,
               'derivative_consistency': smooth_derivative_check(rec, stored.h), 'targets': {}}
    for i in targets:
        cls = scenario.classes[i]
        x_rec = recover_class(rec, cls)
        columns[f'x_{cls.name}_recovered'] = x_rec
        err = float(np.max(np.abs(x_rec[1:] - stored.x[i, 1:])))
        summary['targets'][cls.name] = {'max_error': err, 'relative_to_capacity': err / cls.capacity}
        print(f"{cls.name}: max |x_recovered - x| = {err:.3e} ({100.0 * err / cls.capacity:.3f}% of C)")

    out = args.out or str(Path(args.solution).parent)
    store = ResultStore(out)
    store.write_frame(Config.RECOVERY_FILE, pd.DataFrame(columns))
    store.write_json(Config.RECOVERY_SUMMARY_FILE, summary)
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def _sweep_point(args, steps: int) -> dict:
    scenario = load_scenario_file(args.scenario, steps=steps)
    solution = solve(build(scenario, args.scheme), tol=args.tol, max_iters=args.max_iters)
    report = optimality_residuals(solution, scenario, args.skip_nodes)
    row = {'steps': steps, 'h': solution.h, 'objective': solution.objective,
           'newton_iters': solution.newton_iters}
    for name, norm in report.equations().items():
        row[name] = norm.max
    return row


def cmd_sweep(args) -> int:
    started = time.perf_counter()
    steps = _parse_steps(args.steps)
    workers = max(1, min(Config.DISPATCH_THREADS, len(steps)))

    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_sweep_point, args, n) for n in steps]
        rows = [f.result() for f in tqdm(futures, desc='sweep', unit='solve')]

    table = pd.DataFrame(rows)
    orders = {}
    for name in ('soc', 'ramp', 'costate', 'beta', 'usum', 'collapse'):
        order = convergence_order(table['h'], table[name])
        orders[name] = 'n/a' if not np.isfinite(order) else order

    print(table.to_string(index=False))
    print('orders: ' + ', '.join(f'{k}={v if isinstance(v, str) else f"{v:.2f}"}'
                                 for k, v in orders.items()))

    scenario = load_scenario_file(args.scenario, steps=steps[0])
    store = ResultStore(args.out)
    store.write_json(Config.SWEEP_FILE, {'scheme': args.scheme, 'rows': rows, 'orders': orders})
    store.write_manifest(RunManifest(
        command='sweep',
        scenario_hash=scenario.source_hash,
        scenario_name=scenario.name,
        steps=steps[-1],
        horizon_hours=scenario.grid.horizon,
        scheme=args.scheme,
        tolerances=_tolerances(args),
        seconds=time.perf_counter() - started,
    ))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Optimal demand dispatch for flexible loads')
    sub = parser.add_subparsers(dest='command', required=True)

    def solver_flags(p):
        p.add_argument('--scheme', choices=Config.SCHEMES, default=Config.DEFAULT_SCHEME,
                       help='Transcription scheme')
        p.add_argument('--tol', type=float, default=Config.NEWTON_TOL,
                       help='KKT residual tolerance')
        p.add_argument('--max-iters', type=int, default=Config.NEWTON_MAX_ITERS,
                       help='Newton iteration cap')
        p.add_argument('--skip-nodes', type=int, default=Config.DEFAULT_SKIP_NODES,
                       help='Nodes excluded at each end when certifying')
        p.add_argument('--out', type=str, default='results', help='Output directory')

    p = sub.add_parser('solve', help='Solve a scenario and write all reports')
    p.add_argument('--scenario', required=True, help='Scenario TOML file')
    p.add_argument('--steps', type=int, default=None, help='Override grid steps')
    solver_flags(p)
    p.set_defaults(handler=cmd_solve)

    p = sub.add_parser('check', help='Re-certify a stored solution')
    p.add_argument('--solution', required=True, help='Solution CSV')
    p.add_argument('--scenario', required=True, help='Scenario TOML file')
    p.add_argument('--scheme', choices=Config.SCHEMES, default=None,
                   help='Scheme of the stored solution (default: from its manifest)')
    p.add_argument('--skip-nodes', type=int, default=Config.DEFAULT_SKIP_NODES)
    p.set_defaults(handler=cmd_check)

    p = sub.add_parser('recover', help='Recover load classes from two observed classes')
    p.add_argument('--solution', required=True, help='Solution CSV')
    p.add_argument('--scenario', required=True, help='Scenario TOML file')
    p.add_argument('--from', dest='from_classes', required=True, help='Two class names, e.g. acs,fwh')
    p.add_argument('--target', default='all', help="Class name or 'all'")
    p.add_argument('--scheme', choices=Config.SCHEMES, default=None)
    p.add_argument('--out', type=str, default=None, help='Output directory (default: next to the solution)')
    p.set_defaults(handler=cmd_recover)

    p = sub.add_parser('sweep', help='Grid-refinement study')
    p.add_argument('--scenario', required=True, help='Scenario TOML file')
    p.add_argument('--steps', required=True, help='Comma-separated, strictly increasing N values')
    solver_flags(p)
    p.set_defaults(handler=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    setup_logging(configs.get(os.environ.get('DISPATCH_ENV', 'default'), Config))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INPUT if e.code else EXIT_OK

    try:
        return args.handler(args)
    except DispatchError as e:
        code = exit_code_for(e)
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error ({type(e).__name__}): {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())

"""
Result Store for dispatch runs
Writes solution CSVs, JSON reports and run manifests atomically and reads
solution CSVs back for re-certification
"""

import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, is_dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd

from config import Config
from .exceptions import ParseError
from .scenario import Scenario
from .transcribe import DiscreteSolution

logger = logging.getLogger(__name__)

BASE_COLUMNS = ['t', 'g', 'gamma', 'rho', 'lambda', 'beta']


@dataclass
class RunManifest:
    """Provenance of one command invocation"""
    command: str
    scenario_hash: str
    scenario_name: str
    steps: int
    horizon_hours: float
    scheme: str
    tolerances: Dict[str, float]
    outputs: List[str] = field(default_factory=list)
    seconds: float = 0.0
    objective: Optional[float] = None
    newton_iters: Optional[int] = None
    # Raw last-interval multipliers (lambda, beta) per class, for transversality
    terminal_multipliers: Optional[Dict[str, List[float]]] = None


def to_jsonable(value: Any) -> Any:
    """Plain JSON types; NaN and infinities become null"""
    if is_dataclass(value) and not isinstance(value, type):
        return to_jsonable(asdict(value))
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def solution_frame(solution: DiscreteSolution, price: Optional[np.ndarray] = None) -> pd.DataFrame:
    """
    One row per node: t, g, gamma, rho, lambda, beta, eta, then x_*, z_*, u_*,
    lambda_*, beta_* per class and optionally price

    lambda and beta are the class means of the per-class columns.
    """
    columns = {
        't': solution.times,
        'g': solution.g,
        'gamma': solution.gamma,
        'rho': solution.rho,
        'lambda': solution.costate,
        'beta': solution.beta_common,
        'eta': solution.eta,
    }
    for prefix, values in (('x', solution.x), ('z', solution.z), ('u', solution.u),
                           ('lambda', solution.lam), ('beta', solution.beta)):
        for name, row in zip(solution.class_names, values):
            columns[f'{prefix}_{name}'] = row
    if price is not None:
        columns['price'] = price
    return pd.DataFrame(columns)


def read_solution_csv(path: Union[str, Path], scenario: Scenario,
                      scheme: str = Config.DEFAULT_SCHEME) -> DiscreteSolution:
    """
    Rebuild a DiscreteSolution from an exported CSV

    The grid is inferred from the t column and must span the scenario horizon.
    Objective and Newton statistics are not stored and come back as NaN / 0.

    Raises:
        ParseError: Missing file, missing columns, non-numeric or truncated data
    """
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError:
        raise ParseError(f"Solution file not found: {path}")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ParseError(f"Malformed solution CSV {path}: {e}")

    names = scenario.class_names
    required = BASE_COLUMNS + [f'{p}_{n}' for p in 'xzu' for n in names]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise ParseError(f"Solution CSV {path} lacks columns {missing}")

    try:
        data = frame[required].to_numpy(dtype=float)
    except ValueError as e:
        raise ParseError(f"Non-numeric data in {path}: {e}")
    if data.shape[0] < 2 or not np.all(np.isfinite(data)):
        raise ParseError(f"Solution CSV {path} is truncated or has missing values")

    t = frame['t'].to_numpy(dtype=float)
    steps = int(round(scenario.grid.horizon / (t[1] - t[0])))
    if t.size != steps + 1 or not np.isclose(t[-1], scenario.grid.horizon):
        raise ParseError(
            f"Solution CSV {path} has {t.size} rows; a grid with h={t[1] - t[0]:g} "
            f"over {scenario.grid.horizon} h needs {steps + 1}"
        )

    def block(prefix):
        return np.vstack([frame[f'{prefix}_{n}'].to_numpy(dtype=float) for n in names])

    lam_mean = frame['lambda'].to_numpy(dtype=float)
    beta_mean = frame['beta'].to_numpy(dtype=float)
    costate_columns = [f'{p}_{n}' for p in ('lambda', 'beta') for n in names] + ['eta']
    per_class = all(c in frame.columns for c in costate_columns)
    if per_class:
        try:
            lam, beta = block('lambda'), block('beta')
            eta = frame['eta'].to_numpy(dtype=float)
        except ValueError as e:
            raise ParseError(f"Non-numeric co-state data in {path}: {e}")
        if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(beta)) and np.all(np.isfinite(eta))):
            raise ParseError(f"Solution CSV {path} has missing co-state values")
        for label, rows, mean in (('lambda', lam, lam_mean), ('beta', beta, beta_mean)):
            scale = 1.0 + float(np.max(np.abs(rows)))
            if np.max(np.abs(np.mean(rows, axis=0) - mean)) > 1e-9 * scale:
                raise ParseError(f"Column '{label}' of {path} is not the class mean of its "
                                 f"per-class columns")
    else:
        logger.warning(f"{path} has no per-class co-state columns; "
                       f"co-state agreement checks are not applicable")
        lam = np.tile(lam_mean, (len(names), 1))
        beta = np.tile(beta_mean, (len(names), 1))
        eta = -beta_mean.copy()
    logger.info(f"Read solution with N={steps} from {path}")
    return DiscreteSolution(
        scheme=scheme,
        times=t,
        class_names=tuple(names),
        x=block('x'), z=block('z'), u=block('u'),
        g=frame['g'].to_numpy(dtype=float),
        gamma=frame['gamma'].to_numpy(dtype=float),
        lam=lam,
        beta=beta,
        rho=frame['rho'].to_numpy(dtype=float),
        eta=eta,
        objective=float('nan'),
        per_class_costates=per_class,
    )


class ResultStore:
    """
    Writes run outputs into one directory

    Every file is written to a temporary sibling first and moved into place.
    """

    def __init__(self, out_dir: Union[str, Path], config: Config = Config()):
        self.config = config
        self.out_dir = Path(out_dir)
        self.written: List[str] = []
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def _atomic_write(self, name: str, text: str) -> Path:
        target = self.out_dir / name
        fd, tmp = tempfile.mkstemp(dir=self.out_dir, prefix=f'.{name}.', suffix='.tmp')
        try:
            with os.fdopen(fd, 'w', encoding='utf-8', newline='') as f:
                f.write(text)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        if name not in self.written:
            self.written.append(name)
        logger.info(f"Wrote {target}")
        return target

    def write_frame(self, name: str, frame: pd.DataFrame) -> Path:
        return self._atomic_write(name, frame.to_csv(index=False, float_format=self.config.FLOAT_FORMAT))

    def write_json(self, name: str, payload: Any) -> Path:
        return self._atomic_write(name, json.dumps(to_jsonable(payload), indent=2) + '\n')

    def write_solution(self, solution: DiscreteSolution, price: Optional[np.ndarray] = None) -> Path:
        return self.write_frame(self.config.SOLUTION_FILE, solution_frame(solution, price))

    def write_manifest(self, manifest: RunManifest) -> Path:
        manifest.outputs = list(self.written)
        return self.write_json(self.config.MANIFEST_FILE, manifest)


def read_manifest(directory: Union[str, Path]) -> Optional[Dict[str, Any]]:
    """Manifest next to a solution file, if one exists"""
    path = Path(directory) / Config.MANIFEST_FILE
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        logger.warning(f"Ignoring unreadable manifest {path}: {e}")
        return None

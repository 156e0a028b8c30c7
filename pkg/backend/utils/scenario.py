"""
Scenario model for demand dispatch
Load classes, generation model, time grid, net load and initial condition,
plus scenario-file parsing and net-load ingestion
"""

import hashlib
import logging

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import pydantic
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.integrate import trapezoid
from scipy.interpolate import CubicSpline

from config import Config
from .costfn import CostFunction, Quadratic, ScaledPolynomial, from_config
from .exceptions import ParseError, ValidationError

logger = logging.getLogger(__name__)

# Leakage (1/h) and capacity (GWh) of the five reference load classes
REFERENCE_CLASSES = (
    ('acs', 0.25, 4.0),
    ('fwh', 0.04, 2.0),
    ('swh', 0.01, 5.0),
    ('rfg', 0.10, 0.5),
    ('pp', 0.004, 2.0),
)

# 24 h duck shape: night plateau, midday solar trough, steep evening ramp
_DUCK_HOURS = np.array([0.0, 3.0, 6.0, 9.0, 12.0, 15.0, 18.0, 20.0, 22.0, 24.0])
_DUCK_SHAPE = np.array([0.55, 0.45, 0.50, 0.25, 0.00, 0.15, 0.85, 1.00, 0.80, 0.55])


@dataclass(frozen=True)
class LoadClass:
    """Homogeneous class of flexible loads modelled as a leaky virtual battery"""
    name: str
    alpha: float
    capacity: float
    cost: CostFunction

    def __post_init__(self):
        if self.alpha < 0:
            raise ValidationError(f"Class '{self.name}': alpha must be >= 0, got {self.alpha}")
        if self.capacity <= 0:
            raise ValidationError(f"Class '{self.name}': capacity must be > 0, got {self.capacity}")


@dataclass(frozen=True)
class GenerationModel:
    """Traditional generation: level cost c_g and quadratic ramp cost kappa * gamma^2"""
    cost_g: CostFunction
    ramp_kappa: float

    def __post_init__(self):
        if self.ramp_kappa <= 0:
            raise ValidationError(f"ramp_kappa must be > 0, got {self.ramp_kappa}")

    def ramp_cost(self, gamma):
        return self.ramp_kappa * np.asarray(gamma, dtype=float) ** 2

    def ramp_marginal(self, gamma):
        return 2.0 * self.ramp_kappa * np.asarray(gamma, dtype=float)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with N steps"""
    horizon: float
    steps: int

    def __post_init__(self):
        if self.steps < 2:
            raise ValidationError(f"Need at least 2 grid steps, got {self.steps}")
        if self.horizon <= 0:
            raise ValidationError(f"Horizon must be positive, got {self.horizon}")

    @property
    def h(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)

    def refined(self, factor: int = 2) -> 'TimeGrid':
        return TimeGrid(self.horizon, self.steps * factor)


@dataclass(frozen=True)
class NetLoad:
    """Net load on the grid nodes (GW), its derivative (GW/h) and time average"""
    values: np.ndarray
    derivative: np.ndarray
    mean: float

    @classmethod
    def from_values(cls, grid: TimeGrid, values: Sequence[float],
                    derivative: Optional[Sequence[float]] = None) -> 'NetLoad':
        values = np.asarray(values, dtype=float)
        if values.shape != (grid.steps + 1,):
            raise ValidationError(
                f"Net load has {values.size} values, grid needs {grid.steps + 1}"
            )
        if derivative is None:
            derivative = np.gradient(values, grid.h, edge_order=2)
        derivative = np.asarray(derivative, dtype=float)
        if derivative.shape != values.shape:
            raise ValidationError("Net-load derivative length does not match its values")
        mean = float(trapezoid(values, grid.times) / grid.horizon)
        return cls(values=values, derivative=derivative, mean=mean)


@dataclass(frozen=True)
class Scenario:
    """Complete input of one allocation problem"""
    classes: Tuple[LoadClass, ...]
    generation: GenerationModel
    grid: TimeGrid
    net_load: NetLoad
    x0: np.ndarray
    z0: np.ndarray
    name: str = 'scenario'
    source_hash: str = ''

    def __post_init__(self):
        m = len(self.classes)
        if m < 1:
            raise ValidationError("A scenario needs at least one load class")
        if np.shape(self.x0) != (m,) or np.shape(self.z0) != (m,):
            raise ValidationError(f"x0 and z0 must have {m} entries")
        if self.net_load.values.shape != (self.grid.steps + 1,):
            raise ValidationError("Net load does not match the grid")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ValidationError(f"Duplicate class names: {names}")

    @property
    def M(self) -> int:
        return len(self.classes)

    @property
    def alphas(self) -> np.ndarray:
        return np.array([c.alpha for c in self.classes])

    @property
    def capacities(self) -> np.ndarray:
        return np.array([c.capacity for c in self.classes])

    @property
    def class_names(self) -> List[str]:
        return [c.name for c in self.classes]

    def class_index(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise ValidationError(f"Unknown class '{name}'; known: {self.class_names}")

    def with_initial(self, x0: Sequence[float], z0: Sequence[float]) -> 'Scenario':
        return Scenario(self.classes, self.generation, self.grid, self.net_load,
                        np.asarray(x0, dtype=float), np.asarray(z0, dtype=float),
                        self.name, self.source_hash)


# ---------------------------------------------------------------------------
# Net-load generators
# ---------------------------------------------------------------------------

def synth_duck_curve(grid: TimeGrid, base: float, swing: float, seed: int = 0) -> NetLoad:
    """
    Synthetic C^1 duck curve: midday trough at `base`, evening peak at `base + swing`

    Args:
        grid: Time grid (the 24 h shape repeats for longer horizons)
        base: Trough level (GW)
        swing: Peak minus trough (GW)
        seed: Seed for the small knot jitter

    Returns:
        NetLoad sampled on the grid with exact spline derivative
    """
    if swing < 0:
        raise ValidationError(f"Swing must be non-negative, got {swing}")
    t = grid.times
    if swing == 0:
        return NetLoad.from_values(grid, np.full(t.shape, float(base)), np.zeros(t.shape))

    rng = np.random.default_rng(seed)
    shape = _DUCK_SHAPE.copy()
    shape[1:-1] += rng.uniform(-0.03, 0.03, size=shape.size - 2)
    spline = CubicSpline(_DUCK_HOURS, shape, bc_type='periodic', extrapolate='periodic')

    s = spline(t)
    ds = spline(t, 1)
    lo, hi = s.min(), s.max()
    scale = swing / (hi - lo)
    values = base + scale * (s - lo)
    logger.debug(f"Duck curve: base={base} swing={swing} seed={seed} on {grid.steps} steps")
    return NetLoad.from_values(grid, values, scale * ds)


def piecewise_constant_load(grid: TimeGrid, levels: Sequence[Tuple[float, float]]) -> NetLoad:
    """
    Step profile; each step edge is ramped linearly over one grid interval ending at the edge

    Args:
        grid: Time grid
        levels: (start_hour, GW) pairs, first start at 0, starts strictly increasing

    Returns:
        NetLoad with central-difference derivative
    """
    if not levels:
        raise ValidationError("At least one level is required")
    starts = np.array([float(s) for s, _ in levels])
    gw = np.array([float(v) for _, v in levels])
    if starts[0] != 0.0:
        raise ValidationError("The first level must start at hour 0")
    if np.any(np.diff(starts) <= 0):
        raise ValidationError(f"Level starts must be strictly increasing: {starts.tolist()}")

    h = grid.h
    knots_t, knots_v = [0.0], [gw[0]]
    for j in range(1, len(starts)):
        edge = starts[j]
        knots_t += [max(edge - h, knots_t[-1]), edge]
        knots_v += [gw[j - 1], gw[j]]
    knots_t.append(max(grid.horizon, knots_t[-1]))
    knots_v.append(gw[-1])

    values = np.interp(grid.times, knots_t, knots_v)
    return NetLoad.from_values(grid, values)


def read_netload_csv(path: Union[str, Path], grid: TimeGrid) -> NetLoad:
    """
    Read `t_hours,load_gw[,dload_gw_per_h]` and resample onto the grid

    Args:
        path: CSV file path
        grid: Target grid

    Returns:
        NetLoad on the grid
    """
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError:
        raise ParseError(f"Net-load file not found: {path}")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ParseError(f"Malformed net-load CSV {path}: {e}")

    missing = {'t_hours', 'load_gw'} - set(frame.columns)
    if missing:
        raise ParseError(f"Net-load CSV {path} lacks columns {sorted(missing)}")

    t = frame['t_hours'].to_numpy(dtype=float)
    if np.any(np.diff(t) <= 0):
        raise ValidationError(f"Net-load CSV {path}: t_hours must be strictly increasing")
    if t[0] > 0.0 or t[-1] < grid.horizon:
        raise ValidationError(
            f"Net-load CSV {path} covers [{t[0]}, {t[-1]}] h, horizon is [0, {grid.horizon}] h"
        )

    values = np.interp(grid.times, t, frame['load_gw'].to_numpy(dtype=float))
    derivative = None
    if 'dload_gw_per_h' in frame.columns:
        derivative = np.interp(grid.times, t, frame['dload_gw_per_h'].to_numpy(dtype=float))
    return NetLoad.from_values(grid, values, derivative)


def uncontrolled_generation(net_load: NetLoad) -> np.ndarray:
    """Generation required without load control (g = l)"""
    return net_load.values.copy()


def descriptor_state(x: np.ndarray, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Aggregate (x_sigma, z_sigma) over the class axis (axis 0)"""
    return np.sum(x, axis=0), np.sum(z, axis=0)


def reference_classes(kappa1: float = 1.0, kappa2: float = 0.1,
                      pool_quadratic: bool = True) -> Tuple[LoadClass, ...]:
    """
    The five reference load classes

    Args:
        kappa1: Degree-8 weight for thermostatically controlled classes
        kappa2: Quadratic weight for thermostatically controlled classes
        pool_quadratic: Give pool pumps the purely quadratic cost (kappa1=0, kappa2=1)

    Returns:
        Tuple of LoadClass
    """
    classes = []
    for name, alpha, capacity in REFERENCE_CLASSES:
        if name == 'pp' and pool_quadratic:
            cost = ScaledPolynomial(kappa1=0.0, kappa2=1.0, capacity=capacity)
        else:
            cost = ScaledPolynomial(kappa1=kappa1, kappa2=kappa2, capacity=capacity)
        classes.append(LoadClass(name=name, alpha=alpha, capacity=capacity, cost=cost))
    return tuple(classes)


# ---------------------------------------------------------------------------
# Scenario file schema
# ---------------------------------------------------------------------------

class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid')


class GridSection(_Section):
    horizon_hours: float = Field(Config.DEFAULT_HORIZON_HOURS, gt=0)
    steps: int = Field(Config.DEFAULT_STEPS, ge=2)


class GenerationSection(_Section):
    kappa_g: float = Field(Config.DEFAULT_KAPPA_G, gt=0)
    ramp_kappa: float = Field(Config.DEFAULT_RAMP_KAPPA, gt=0)
    center: Optional[float] = None  # defaults to the net-load mean


class CostSection(_Section):
    kind: Literal['polynomial', 'quadratic'] = 'polynomial'
    kappa1: float = Field(1.0, ge=0)
    kappa2: float = Field(0.1, gt=0)
    gain: Optional[float] = Field(None, gt=0)
    center: float = 0.0

    @model_validator(mode='after')
    def _quadratic_needs_gain(self):
        if self.kind == 'quadratic' and self.gain is None:
            raise ValueError("quadratic cost needs 'gain'")
        return self


class ClassSection(_Section):
    name: str = Field(..., min_length=1)
    alpha: float = Field(..., ge=0)
    capacity: float = Field(..., gt=0)
    cost: CostSection = Field(default_factory=CostSection)


class InitialSection(_Section):
    x0: Optional[List[float]] = None
    z0: Optional[List[float]] = None


class NetLoadSection(_Section):
    kind: Literal['inline', 'csv', 'duck', 'steps', 'constant']
    values: Optional[List[float]] = None
    derivative: Optional[List[float]] = None
    path: Optional[str] = None
    base: float = 0.0
    swing: float = Field(0.0, ge=0)
    seed: int = 0
    levels: Optional[List[Tuple[float, float]]] = None
    value: Optional[float] = None

    @model_validator(mode='after')
    def _required_keys(self):
        needed = {'inline': 'values', 'csv': 'path', 'steps': 'levels', 'constant': 'value'}
        key = needed.get(self.kind)
        if key is not None and getattr(self, key) is None:
            raise ValueError(f"netload kind '{self.kind}' needs '{key}'")
        return self


class ScenarioFile(_Section):
    name: str = 'scenario'
    grid: GridSection = Field(default_factory=GridSection)
    generation: GenerationSection = Field(default_factory=GenerationSection)
    classes: List[ClassSection] = Field(..., min_length=1, alias='class')
    initial: InitialSection = Field(default_factory=InitialSection)
    netload: NetLoadSection

    model_config = ConfigDict(extra='forbid', populate_by_name=True)


def _build_net_load(section: NetLoadSection, grid: TimeGrid, base_dir: Path) -> NetLoad:
    if section.kind == 'inline':
        return NetLoad.from_values(grid, section.values, section.derivative)
    if section.kind == 'constant':
        return NetLoad.from_values(grid, np.full(grid.steps + 1, section.value),
                                   np.zeros(grid.steps + 1))
    if section.kind == 'csv':
        path = Path(section.path)
        if not path.is_absolute():
            path = base_dir / path
        return read_netload_csv(path, grid)
    if section.kind == 'duck':
        return synth_duck_curve(grid, section.base, section.swing, section.seed)
    return piecewise_constant_load(grid, section.levels)


def load_scenario(config_text: str, base_dir: Union[str, Path, None] = None,
                  steps: Optional[int] = None) -> Scenario:
    """
    Parse and validate a scenario file

    Args:
        config_text: TOML text with [grid], [generation], [[class]], [initial], [netload]
        base_dir: Directory that relative net-load CSV paths refer to
        steps: Optional override of grid.steps

    Returns:
        Validated Scenario
    """
    try:
        raw = tomllib.loads(config_text)
    except tomllib.TOMLDecodeError as e:
        raise ParseError(f"Malformed scenario file: {e}")

    try:
        parsed = ScenarioFile.model_validate(raw)
    except pydantic.ValidationError as e:
        raise ValidationError(f"Invalid scenario: {e}")

    grid = TimeGrid(parsed.grid.horizon_hours, steps if steps is not None else parsed.grid.steps)
    net_load = _build_net_load(parsed.netload, grid, Path(base_dir or '.'))

    classes = []
    for entry in parsed.classes:
        cost_table: Dict[str, Any] = entry.cost.model_dump(exclude_none=True)
        classes.append(LoadClass(
            name=entry.name,
            alpha=entry.alpha,
            capacity=entry.capacity,
            cost=from_config(cost_table, capacity=entry.capacity),
        ))

    center = parsed.generation.center if parsed.generation.center is not None else net_load.mean
    generation = GenerationModel(
        cost_g=Quadratic(gain=parsed.generation.kappa_g, center=center),
        ramp_kappa=parsed.generation.ramp_kappa,
    )

    m = len(classes)
    x0 = np.zeros(m) if parsed.initial.x0 is None else np.asarray(parsed.initial.x0, dtype=float)
    z0 = np.zeros(m) if parsed.initial.z0 is None else np.asarray(parsed.initial.z0, dtype=float)

    scenario = Scenario(
        classes=tuple(classes),
        generation=generation,
        grid=grid,
        net_load=net_load,
        x0=x0,
        z0=z0,
        name=parsed.name,
        source_hash=hashlib.sha256(config_text.encode('utf-8')).hexdigest(),
    )
    logger.info(f"Loaded scenario '{scenario.name}': M={scenario.M}, N={grid.steps}, "
                f"T={grid.horizon} h, mean load {net_load.mean:.3f} GW")
    return scenario


def load_scenario_file(path: Union[str, Path], steps: Optional[int] = None) -> Scenario:
    """Read a scenario file from disk; see load_scenario"""
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except FileNotFoundError:
        raise ParseError(f"Scenario file not found: {path}")
    except OSError as e:
        raise ParseError(f"Cannot read scenario file {path}: {e}")
    return load_scenario(text, base_dir=path.parent, steps=steps)

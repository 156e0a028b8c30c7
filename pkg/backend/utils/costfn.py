"""
Convex cost functions for generation and load-class state of charge
Exact first and second derivatives plus the inverse of the derivative
"""

import logging
from dataclasses import dataclass
from typing import Any, Mapping, Union

import numpy as np

from config import Config
from .exceptions import BracketFailure, ValidationError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]


class CostFunction:
    """
    Strongly convex scalar cost c(v)

    Subclasses are immutable and evaluate element-wise on numpy arrays.
    """

    center: float = 0.0

    def value(self, v: ArrayLike) -> ArrayLike:
        raise NotImplementedError

    def d1(self, v: ArrayLike) -> ArrayLike:
        raise NotImplementedError

    def d2(self, v: ArrayLike) -> ArrayLike:
        raise NotImplementedError

    def inv_d1(self, m: ArrayLike) -> ArrayLike:
        raise NotImplementedError

    def mu(self) -> float:
        """Lower bound on the second derivative"""
        raise NotImplementedError

    def __call__(self, v: ArrayLike) -> ArrayLike:
        return self.value(v)


@dataclass(frozen=True)
class Quadratic(CostFunction):
    """c(v) = gain * (v - center)^2"""

    gain: float
    center: float = 0.0

    def __post_init__(self):
        if self.gain <= 0:
            raise ValidationError(f"Quadratic gain must be positive, got {self.gain}")

    def value(self, v: ArrayLike) -> ArrayLike:
        return self.gain * (np.asarray(v, dtype=float) - self.center) ** 2

    def d1(self, v: ArrayLike) -> ArrayLike:
        return 2.0 * self.gain * (np.asarray(v, dtype=float) - self.center)

    def d2(self, v: ArrayLike) -> ArrayLike:
        return np.full_like(np.asarray(v, dtype=float), 2.0 * self.gain)

    def inv_d1(self, m: ArrayLike) -> ArrayLike:
        return self.center + np.asarray(m, dtype=float) / (2.0 * self.gain)

    def mu(self) -> float:
        return 2.0 * self.gain


@dataclass(frozen=True)
class ScaledPolynomial(CostFunction):
    """
    c(v) = kappa1 * (v / capacity)^8 + kappa2 * (v / capacity)^2

    The degree-8 term acts as a soft capacity limit on the state of charge.
    """

    kappa1: float
    kappa2: float
    capacity: float

    def __post_init__(self):
        if self.capacity <= 0:
            raise ValidationError(f"Capacity must be positive, got {self.capacity}")
        if self.kappa1 < 0 or self.kappa2 <= 0:
            raise ValidationError(
                f"Need kappa1 >= 0 and kappa2 > 0, got kappa1={self.kappa1}, kappa2={self.kappa2}"
            )

    def value(self, v: ArrayLike) -> ArrayLike:
        s = np.asarray(v, dtype=float) / self.capacity
        return self.kappa1 * s ** 8 + self.kappa2 * s ** 2

    def d1(self, v: ArrayLike) -> ArrayLike:
        s = np.asarray(v, dtype=float) / self.capacity
        return (8.0 * self.kappa1 * s ** 7 + 2.0 * self.kappa2 * s) / self.capacity

    def d2(self, v: ArrayLike) -> ArrayLike:
        s = np.asarray(v, dtype=float) / self.capacity
        return (56.0 * self.kappa1 * s ** 6 + 2.0 * self.kappa2) / self.capacity ** 2

    def mu(self) -> float:
        return 2.0 * self.kappa2 / self.capacity ** 2

    def inv_d1(self, m: ArrayLike,
               bracket_factor: float = Config.INV_D1_BRACKET_FACTOR,
               tol: float = Config.INV_D1_TOL,
               max_iters: int = 200) -> ArrayLike:
        """
        Invert the strictly increasing derivative by safeguarded Newton

        Args:
            m: Target marginal cost(s)
            bracket_factor: Half-width of the search bracket in units of capacity
            tol: Relative tolerance on |c'(v) - m| / (1 + |m|)
            max_iters: Iteration cap

        Returns:
            v with c'(v) = m, same shape as m
        """
        m_arr = np.asarray(m, dtype=float)
        scalar = m_arr.ndim == 0
        m_arr = np.atleast_1d(m_arr)

        if self.kappa1 == 0.0:
            out = m_arr * self.capacity ** 2 / (2.0 * self.kappa2)
            return float(out[0]) if scalar else out

        bound = bracket_factor * self.capacity
        lo = np.full_like(m_arr, -bound)
        hi = np.full_like(m_arr, bound)
        if np.any(self.d1(lo) > m_arr) or np.any(self.d1(hi) < m_arr):
            raise BracketFailure(
                f"Marginal cost outside [c'(-{bound:g}), c'({bound:g})]; "
                f"max |m| = {np.max(np.abs(m_arr)):g}"
            )

        # Linear-part inverse is a good start inside the soft-capacity region
        v = np.clip(m_arr * self.capacity ** 2 / (2.0 * self.kappa2), lo, hi)
        for _ in range(max_iters):
            f = self.d1(v) - m_arr
            if np.all(np.abs(f) <= tol * (1.0 + np.abs(m_arr))):
                break
            lo = np.where(f < 0, v, lo)
            hi = np.where(f > 0, v, hi)
            step = v - f / self.d2(v)
            outside = (step <= lo) | (step >= hi) | ~np.isfinite(step)
            v = np.where(outside, 0.5 * (lo + hi), step)
        else:
            logger.warning("inv_d1 reached the iteration cap; returning best iterate")

        return float(v[0]) if scalar else v


def from_config(table: Mapping[str, Any], capacity: float = None) -> CostFunction:
    """
    Build a cost function from a scenario table

    Args:
        table: Mapping with 'kind' ('quadratic' or 'polynomial') and its parameters
        capacity: Class capacity used by the polynomial kind when the table omits it

    Returns:
        CostFunction instance
    """
    kind = str(table.get('kind', 'polynomial')).lower()
    if kind == 'quadratic':
        return Quadratic(gain=float(table['gain']), center=float(table.get('center', 0.0)))
    if kind == 'polynomial':
        cap = table.get('capacity', capacity)
        if cap is None:
            raise ValidationError("Polynomial cost needs a capacity")
        return ScaledPolynomial(
            kappa1=float(table.get('kappa1', 1.0)),
            kappa2=float(table.get('kappa2', 0.1)),
            capacity=float(cap),
        )
    raise ValidationError(f"Unknown cost kind: {kind}")

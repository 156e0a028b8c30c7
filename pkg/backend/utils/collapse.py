"""
Co-state reconstruction from two observed load classes
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from config import Config
from .exceptions import SingularPair
from .optimality import time_derivative
from .scenario import LoadClass

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Reconstruction:
    """lambda and lambda' recovered from classes a and b"""
    lam: np.ndarray
    lam_dot: np.ndarray
    sources: Tuple[str, str]
    condition: float

    @property
    def steps(self) -> int:
        return self.lam.size - 1


def reconstruct(x_a: np.ndarray, x_b: np.ndarray,
                class_a: LoadClass, class_b: LoadClass) -> Reconstruction:
    """
    Solve [[alpha_a, -1], [alpha_b, -1]] [lambda; lambda'] = [c_a'(x_a); c_b'(x_b)] per node

    Args:
        x_a, x_b: State-of-charge trajectories of the two source classes
        class_a, class_b: The source classes

    Returns:
        Reconstruction

    Raises:
        SingularPair: The two classes share the same leakage
    """
    da = class_a.alpha - class_b.alpha
    if abs(da) <= Config.SINGULAR_PAIR_TOL:
        raise SingularPair(
            f"Classes '{class_a.name}' and '{class_b.name}' have equal alpha={class_a.alpha}"
        )
    ma = np.asarray(class_a.cost.d1(np.asarray(x_a, dtype=float)))
    mb = np.asarray(class_b.cost.d1(np.asarray(x_b, dtype=float)))

    lam = (ma - mb) / da
    lam_dot = class_a.alpha * lam - ma

    matrix = np.array([[class_a.alpha, -1.0], [class_b.alpha, -1.0]])
    condition = float(np.linalg.cond(matrix))
    logger.debug(f"Reconstructed lambda from ({class_a.name}, {class_b.name}), cond={condition:.3g}")
    return Reconstruction(lam=lam, lam_dot=lam_dot,
                          sources=(class_a.name, class_b.name), condition=condition)


def recover_class(reconstruction: Reconstruction, target: LoadClass) -> np.ndarray:
    """x_i = (c_i')^{-1}(alpha_i lambda - lambda') at every node"""
    marginal = target.alpha * reconstruction.lam - reconstruction.lam_dot
    return np.asarray(target.cost.inv_d1(marginal))


def smooth_derivative_check(reconstruction: Reconstruction, h: float) -> float:
    """
    max |lambda' - d lambda/dt| over nodes 2..N-2

    The stencils stay clear of node 0 (pinned state) and node N.
    """
    fd = time_derivative(reconstruction.lam, h)
    return float(np.max(np.abs(reconstruction.lam_dot[2:-2] - fd[2:-2])))

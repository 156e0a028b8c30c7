"""
Error types for the demand-dispatch solver
"""

from typing import List, Optional


class DispatchError(Exception):
    """Base class for all solver and certification errors"""


class ParseError(DispatchError):
    """Malformed scenario, CSV or command-line input"""


class ValidationError(DispatchError):
    """Well-formed input that violates a domain invariant"""


class BracketFailure(DispatchError):
    """No sign change of c'(v) - m inside the search bracket"""


class MaxIters(DispatchError):
    """Newton iteration did not reach the KKT tolerance"""


class SingularKKT(DispatchError):
    """The KKT matrix is rank deficient"""


class GridTooCoarse(DispatchError):
    """Too few grid steps for finite-difference certification"""


class SumMismatch(DispatchError):
    """Redistribution endpoints do not share x_sigma and z_sigma"""


class AlphaZero(DispatchError):
    """A load class without leakage makes the marginal-value identity undefined"""


class SingularPair(DispatchError):
    """Two source classes with equal leakage cannot separate lambda from its derivative"""


class CheckFailure(DispatchError):
    """One or more certification checks failed"""

    def __init__(self, failed: List[str], message: Optional[str] = None):
        self.failed = list(failed)
        super().__init__(message or f"Failed checks: {', '.join(self.failed)}")

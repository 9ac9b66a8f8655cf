#!/usr/bin/env python3
"""
CochainFEM - Shared Utilities
=============================
Error hierarchy, quadrature rules, convergence-rate helpers and timers
shared by every module of the package.
"""

import time
import logging
from functools import lru_cache
from typing import Optional, Sequence, Tuple, List

import numpy as np

logger = logging.getLogger(__name__)


# =============================================================================
# ERROR HANDLING
# =============================================================================

class CochainFEMError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(CochainFEMError):
    """Invalid experiment configuration (CLI exit code 1)."""


class CheckError(CochainFEMError):
    """A verified invariant did not hold (CLI exit code 2)."""


class SolverError(CochainFEMError):
    """A numerical solve failed (CLI exit code 3)."""


class InputError(ConfigError, ValueError):
    """Malformed arguments passed to a library operation."""


EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CHECK = 2
EXIT_SOLVER = 3


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code of its family."""
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, CheckError):
        return EXIT_CHECK
    return EXIT_SOLVER


# =============================================================================
# QUADRATURE
# =============================================================================

@lru_cache(maxsize=None)
def _gauss_unit(n: int) -> Tuple[np.ndarray, np.ndarray]:
    nodes, weights = np.polynomial.legendre.leggauss(n)
    nodes = 0.5 * (nodes + 1.0)
    weights = 0.5 * weights
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def gauss_legendre(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gauss-Legendre rule on the unit interval [0, 1].

    Args:
        n: Number of points (exact for polynomials of degree 2n - 1)

    Returns:
        Read-only (nodes, weights); weights sum to 1
    """
    if n < 1:
        raise InputError(f"Gauss rule needs at least one point, got {n}")
    return _gauss_unit(int(n))


def tensor_gauss(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """n x n Gauss rule on the unit square as ((Q, 2) points, (Q,) weights)."""
    nodes, weights = gauss_legendre(n)
    tt, xx = np.meshgrid(nodes, nodes, indexing="ij")
    wt, wx = np.meshgrid(weights, weights, indexing="ij")
    return np.column_stack([tt.ravel(), xx.ravel()]), (wt * wx).ravel()


# =============================================================================
# CONVERGENCE HELPERS
# =============================================================================

def convergence_rates(errors: Sequence[float], ratio: float = 2.0) -> List[Optional[float]]:
    """
    Observed rates log(e_{k-1}/e_k)/log(ratio) between consecutive levels.

    The first level has no rate and gets None; a zero error on either side
    also yields None.
    """
    rates: List[Optional[float]] = [None]
    for coarse, fine in zip(errors[:-1], errors[1:]):
        if coarse > 0.0 and fine > 0.0:
            rates.append(float(np.log(coarse / fine) / np.log(ratio)))
        else:
            rates.append(None)
    return rates


def strictly_decreasing(values: Sequence[float]) -> bool:
    """True when every value is smaller than its predecessor."""
    return all(b < a for a, b in zip(values[:-1], values[1:]))


def relative_to(measured: float, scale: float) -> float:
    """measured / max(1, scale), the package-wide relative measure."""
    return float(abs(measured) / max(1.0, abs(scale)))


# =============================================================================
# TIMING UTILITIES
# =============================================================================

class Timer:
    """Context manager for timing operations; elapsed time goes to the log."""

    def __init__(self, name: str = "Operation", log: Optional[logging.Logger] = None):
        self.name = name
        self.log = log or logger
        self.start_time: Optional[float] = None
        self.elapsed: float = 0.0

    def __enter__(self):
        self.start_time = time.perf_counter()
        return self

    def __exit__(self, *args):
        self.elapsed = time.perf_counter() - self.start_time
        self.log.info(f"[TIME] {self.name} took {self.elapsed:.2f}s")

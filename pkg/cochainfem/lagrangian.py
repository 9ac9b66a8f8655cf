#!/usr/bin/env python3
"""
CochainFEM - Lagrangian Densities
=================================
Densities L(x, phi, psi) for m-tuples of scalar fields, their first and
optional second partial derivatives, and the vertical symmetry generators
they declare.

Array conventions (P sample points, m components, coordinates (t, x)):
- x: (P, 2), phi: (P, m), psi: (P, m, 2) with psi[:, a, mu] = d_mu phi_a
- value -> (P,), d2 -> (P, m), d3 -> (P, m, 2) (metric-raised, so pairings
  with dv are plain dot products)
- d22 -> (P, m, m), d23 -> (P, m, m, 2) with d23[p, a, b, mu] = d/dpsi_{b mu} of
  dL/dphi_a, d33 -> (P, m, 2, m, 2)
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import expm

from cochainfem.feec import MetricSignature
from cochainfem.utils import CheckError, InputError

logger = logging.getLogger(__name__)

ScalarFn = Callable[[np.ndarray], np.ndarray]


class InconsistentDerivatives(CheckError):
    """Supplied partial derivatives disagree with finite differences."""

    def __init__(self, which: str, error: float, tolerance: float):
        super().__init__(f"{which} deviates from finite differences by {error:.3e} (tol {tolerance:.1e})")
        self.which = which
        self.error = error
        self.tolerance = tolerance


# =============================================================================
# SYMMETRY GENERATORS
# =============================================================================

@dataclass(frozen=True, eq=False)
class SymmetryGenerator:
    """
    Affine vertical generator xi_Y(phi) = a phi + b acting on every node alike.

    The pointwise matrix a (m x m) and offset b (m,) induce the coefficient
    map V(phi_vec) = (a kron I) phi_vec + (b kron 1).
    """
    name: str
    matrix: np.ndarray
    offset: np.ndarray
    claimed_equivariant: bool = True

    def __post_init__(self):
        matrix = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        offset = np.atleast_1d(np.asarray(self.offset, dtype=float))
        if matrix.shape != (offset.size, offset.size):
            raise InputError(f"generator {self.name}: matrix {matrix.shape} vs offset {offset.shape}")
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "offset", offset)

    @property
    def n_components(self) -> int:
        return self.offset.size

    @property
    def is_zero(self) -> bool:
        return not np.any(self.matrix) and not np.any(self.offset)

    def pointwise(self, values: np.ndarray) -> np.ndarray:
        """Generator value at field values of shape (P, m)."""
        return values @ self.matrix.T + self.offset

    def vector_field(self, coefficients: np.ndarray) -> np.ndarray:
        """V(phi_vec) on a component-stacked coefficient vector."""
        c = np.asarray(coefficients, dtype=float).reshape(self.n_components, -1)
        return (self.matrix @ c + self.offset[:, None]).ravel()

    def flow(self, s: float, values: np.ndarray) -> np.ndarray:
        """Group flow exp(s a) v + (int_0^s exp(r a) dr) b on (P, m) values."""
        m = self.n_components
        augmented = np.zeros((m + 1, m + 1))
        augmented[:m, :m] = self.matrix
        augmented[:m, m] = self.offset
        flow = expm(s * augmented)
        return values @ flow[:m, :m].T + flow[:m, m]

    def flow_coefficients(self, s: float, coefficients: np.ndarray) -> np.ndarray:
        c = np.asarray(coefficients, dtype=float).reshape(self.n_components, -1)
        return self.flow(s, c.T).T.ravel()


@dataclass(frozen=True, eq=False)
class PointwiseAction:
    """Nonlinear nodal action phi -> flow(s, phi); used as an equivariance control."""
    name: str
    flow_fn: Callable[[float, np.ndarray], np.ndarray]
    claimed_equivariant: bool = False

    def flow(self, s: float, values: np.ndarray) -> np.ndarray:
        return self.flow_fn(s, values)

    def flow_coefficients(self, s: float, coefficients: np.ndarray) -> np.ndarray:
        return self.flow_fn(s, np.asarray(coefficients, dtype=float))


def shift_generator(n_components: int = 1, component: int = 0) -> SymmetryGenerator:
    offset = np.zeros(n_components)
    offset[component] = 1.0
    return SymmetryGenerator("shift", np.zeros((n_components, n_components)), offset)


def rotation_generator() -> SymmetryGenerator:
    """SO(2) generator (phi1, phi2) -> (-phi2, phi1)."""
    return SymmetryGenerator("rotation", np.array([[0.0, -1.0], [1.0, 0.0]]), np.zeros(2))


def zero_generator(n_components: int = 1) -> SymmetryGenerator:
    return SymmetryGenerator("zero", np.zeros((n_components, n_components)), np.zeros(n_components))


def cubic_action() -> PointwiseAction:
    return PointwiseAction("cube", lambda s, v: v + s * v ** 3)


# =============================================================================
# DENSITY
# =============================================================================

@dataclass(frozen=True, eq=False)
class LagrangianDensity:
    """
    Lagrangian density with partial derivatives and declared symmetries.

    unit_kinetic marks densities whose only phi_t dependence is
    1/2 sum_a phi_{a,t}^2, for which the Legendre transform is the identity.
    """
    name: str
    n_components: int
    metric: MetricSignature
    value: Callable
    d2: Callable
    d3: Callable
    d22: Optional[Callable] = None
    d23: Optional[Callable] = None
    d33: Optional[Callable] = None
    generators: Tuple[SymmetryGenerator, ...] = ()
    unit_kinetic: bool = False
    parameters: Dict[str, object] = field(default_factory=dict, compare=False)

    @property
    def has_second_partials(self) -> bool:
        return self.d22 is not None and self.d23 is not None and self.d33 is not None

    def generator(self, name: str) -> SymmetryGenerator:
        for gen in self.generators:
            if gen.name == name:
                return gen
        raise InputError(f"density {self.name} declares no generator {name!r}")

    def check_derivatives(self, rng: Optional[np.random.Generator] = None,
                          samples: int = 16, rtol: float = 1e-6, scale: float = 0.7) -> float:
        """
        Cross-check every supplied partial against central differences.

        Returns:
            Worst relative deviation found

        Raises:
            InconsistentDerivatives: on the first partial beyond rtol
        """
        rng = rng if rng is not None else np.random.default_rng(0)
        m = self.n_components
        x = rng.uniform(0.0, 1.0, size=(samples, 2))
        phi = scale * rng.standard_normal((samples, m))
        psi = scale * rng.standard_normal((samples, m, 2))
        step = 1e-5

        def fd(fn, which: str, index) -> np.ndarray:
            args_p = [phi.copy(), psi.copy()]
            args_m = [phi.copy(), psi.copy()]
            slot = 0 if which == "phi" else 1
            args_p[slot][(slice(None),) + index] += step
            args_m[slot][(slice(None),) + index] -= step
            return (fn(x, *args_p) - fn(x, *args_m)) / (2 * step)

        worst = 0.0

        def compare(label: str, analytic: np.ndarray, numeric: np.ndarray):
            nonlocal worst
            err = float(np.max(np.abs(analytic - numeric)))
            rel = err / max(1.0, float(np.max(np.abs(analytic))))
            worst = max(worst, rel)
            if rel > rtol:
                raise InconsistentDerivatives(label, rel, rtol)

        d2 = self.d2(x, phi, psi)
        d3 = self.d3(x, phi, psi)
        for a in range(m):
            compare(f"d2L[{a}]", d2[:, a], fd(self.value, "phi", (a,)))
            for mu in range(2):
                compare(f"d3L[{a},{mu}]", d3[:, a, mu], fd(self.value, "psi", (a, mu)))

        if self.has_second_partials:
            d22 = self.d22(x, phi, psi)
            d23 = self.d23(x, phi, psi)
            d33 = self.d33(x, phi, psi)
            for b in range(m):
                compare(f"d22L[:,{b}]", d22[:, :, b], fd(self.d2, "phi", (b,)))
                # d/dphi_b of d3L is the transpose of d23
                compare(f"d32L[:,{b}]", d23[:, b, :, :], fd(self.d3, "phi", (b,)))
                for nu in range(2):
                    compare(f"d23L[:,{b},{nu}]", d23[:, :, b, nu], fd(self.d2, "psi", (b, nu)))
                    compare(f"d33L[:,:,{b},{nu}]", d33[:, :, :, b, nu], fd(self.d3, "psi", (b, nu)))
        logger.debug(f"[OK] {self.name}: derivatives consistent (worst {worst:.2e})")
        return worst


# =============================================================================
# BUILTIN FAMILIES
# =============================================================================

def polynomial_potential(coefficients: Sequence[float]) -> Tuple[ScalarFn, ScalarFn, ScalarFn]:
    """(N, N', N'') for N(phi) = sum_k c_k phi^k."""
    poly = np.polynomial.Polynomial(np.asarray(coefficients, dtype=float) if len(coefficients) else [0.0])
    d1 = poly.deriv(1)
    d2 = poly.deriv(2) if poly.degree() >= 2 else np.polynomial.Polynomial([0.0])
    return poly, d1, d2


def _kinetic_value(psi: np.ndarray, eps: int) -> np.ndarray:
    return 0.5 * np.sum(psi[..., 0] ** 2 + eps * psi[..., 1] ** 2, axis=1)


def _kinetic_d3(psi: np.ndarray, eps: int) -> np.ndarray:
    out = psi.copy()
    out[..., 1] *= eps
    return out


def _kinetic_d33(P: int, m: int, eps: int) -> np.ndarray:
    out = np.zeros((P, m, 2, m, 2))
    for a in range(m):
        out[:, a, 0, a, 0] = 1.0
        out[:, a, 1, a, 1] = eps
    return out


def builtin_nonlinear_wave_poisson(eps: int, N: ScalarFn, dN: ScalarFn, d2N: ScalarFn,
                                   source: Optional[Callable] = None,
                                   check: bool = True, name: str = "nonlinear_wave_poisson",
                                   generators: Tuple[SymmetryGenerator, ...] = ()) -> LagrangianDensity:
    """
    L = 1/2 (phi_t^2 + eps phi_x^2) - N(phi) - s(x) phi.

    Args:
        eps: -1 for the wave equation, +1 for the Poisson equation
        N, dN, d2N: Potential and its first two derivatives (vectorized)
        source: Optional spatial forcing s(x) with x of shape (P, 2)
        check: Cross-check N, N', N'' by finite differences

    Raises:
        InconsistentDerivatives: if the potential derivatives disagree
    """
    metric = MetricSignature.from_epsilon(eps)
    eps = metric.epsilon

    def forcing(x):
        return np.zeros(len(x)) if source is None else np.asarray(source(x), dtype=float)

    def value(x, phi, psi):
        return _kinetic_value(psi, eps) - N(phi[:, 0]) - forcing(x) * phi[:, 0]

    def d2(x, phi, psi):
        return (-dN(phi[:, 0]) - forcing(x))[:, None]

    def d3(x, phi, psi):
        return _kinetic_d3(psi, eps)

    def d22(x, phi, psi):
        return -d2N(phi[:, 0])[:, None, None] * np.ones((len(phi), 1, 1))

    def d23(x, phi, psi):
        return np.zeros((len(phi), 1, 1, 2))

    def d33(x, phi, psi):
        return _kinetic_d33(len(phi), 1, eps)

    density = LagrangianDensity(
        name=name, n_components=1, metric=metric,
        value=value, d2=d2, d3=d3, d22=d22, d23=d23, d33=d33,
        generators=generators, unit_kinetic=True,
        parameters={"epsilon": eps, "forced": source is not None},
    )
    if check:
        density.check_derivatives()
    return density


def builtin_shift_symmetric_wave(eps: int = -1) -> LagrangianDensity:
    """Massless L = 1/2 <dphi, dphi>_g with the constant shift generator."""
    zero = np.polynomial.Polynomial([0.0])
    return builtin_nonlinear_wave_poisson(
        eps, zero, zero, zero, check=False, name="shift_symmetric_wave",
        generators=(shift_generator(1),),
    )


def builtin_so2_pair(G: ScalarFn, dG: ScalarFn, d2G: ScalarFn, eps: int = -1,
                     breaking: Optional[Tuple[ScalarFn, ScalarFn, ScalarFn]] = None,
                     check: bool = True) -> LagrangianDensity:
    """
    Two fields with L = 1/2 |dphi1|^2 + 1/2 |dphi2|^2 - G(phi1^2 + phi2^2) - B(phi1).

    The optional breaking potential B depends on phi1 only and destroys the
    rotation invariance while keeping the generator (used as a control).
    """
    metric = MetricSignature.from_epsilon(eps)
    eps = metric.epsilon
    zero = np.polynomial.Polynomial([0.0])
    B, dB, d2B = breaking if breaking is not None else (zero, zero, zero)

    def value(x, phi, psi):
        rho = np.sum(phi ** 2, axis=1)
        return _kinetic_value(psi, eps) - G(rho) - B(phi[:, 0])

    def d2(x, phi, psi):
        rho = np.sum(phi ** 2, axis=1)
        out = -2.0 * dG(rho)[:, None] * phi
        out[:, 0] -= dB(phi[:, 0])
        return out

    def d3(x, phi, psi):
        return _kinetic_d3(psi, eps)

    def d22(x, phi, psi):
        rho = np.sum(phi ** 2, axis=1)
        out = -4.0 * d2G(rho)[:, None, None] * phi[:, :, None] * phi[:, None, :]
        out -= 2.0 * dG(rho)[:, None, None] * np.eye(2)[None, :, :]
        out[:, 0, 0] -= d2B(phi[:, 0])
        return out

    def d23(x, phi, psi):
        return np.zeros((len(phi), 2, 2, 2))

    def d33(x, phi, psi):
        return _kinetic_d33(len(phi), 2, eps)

    density = LagrangianDensity(
        name="so2_pair" if breaking is None else "broken_pair",
        n_components=2, metric=metric,
        value=value, d2=d2, d3=d3, d22=d22, d23=d23, d33=d33,
        generators=(rotation_generator(),), unit_kinetic=True,
        parameters={"epsilon": eps, "broken": breaking is not None},
    )
    if check:
        density.check_derivatives()
    return density


def without_second_partials(density: LagrangianDensity) -> LagrangianDensity:
    """Copy of a density that forces finite-difference Jacobians."""
    from dataclasses import replace
    return replace(density, d22=None, d23=None, d33=None)

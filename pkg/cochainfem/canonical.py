#!/usr/bin/env python3
"""
CochainFEM - Semi-Discrete Canonical Formulation
================================================
Method-of-lines view of a spacetime density: instantaneous Lagrangian on a
spatial slice, Legendre transform into the mass-matrix phase space,
Hamiltonian flow with an implicit-midpoint stepper, momentum and
energy-momentum maps, and the tensor-product equivalence with the covariant
assembly.

Spatial coefficient vectors are component-stacked (a*n + i). On a slice
the density is evaluated with x = (t, x_q) and psi = (phi_dot, phi_x).
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Set, Tuple, Union

import numpy as np
from scipy import linalg, sparse

from cochainfem.covariant import CovariantAssembler, NoConvergence, SolveReport, SolveStatus
from cochainfem.feec import CochainComplex, MetricSignature
from cochainfem.lagrangian import LagrangianDensity, SymmetryGenerator
from cochainfem.mesh import IntervalMesh, TensorMesh2D
from cochainfem.structures import NotEquivariant, equivariance_check
from cochainfem.utils import InputError, SolverError, convergence_rates, gauss_legendre

logger = logging.getLogger(__name__)


# =============================================================================
# ERRORS
# =============================================================================

class InsufficientSamples(InputError):
    """Too few trajectory samples for the central differences."""


class SingularMass(SolverError):
    """Spatial mass matrix could not be factorized."""


class LegendreInversionFailed(SolverError):
    """Newton inversion of the Legendre transform did not converge."""


class BasisMismatch(InputError):
    """Spatial and spacetime discretizations do not match."""


# =============================================================================
# SPATIAL SPACE AND PHASE STATES
# =============================================================================

@dataclass(eq=False)
class SpatialSpace:
    """Degree-0 space on a Cauchy slice with its derivative, mass and stiffness matrices."""
    mesh: IntervalMesh
    quadrature_points: int = 4
    complex: CochainComplex = field(init=False, repr=False)

    def __post_init__(self):
        if not isinstance(self.mesh, IntervalMesh):
            raise InputError("spatial space needs an interval mesh")
        self.complex = CochainComplex.build(self.mesh, MetricSignature.euclidean(1))
        self.space = self.complex.space(0)
        self.n = self.space.n_dofs
        self.D = self.complex.D(0)
        self.mass = self.complex.M(0)
        self.mass1 = self.complex.M(1)
        self.stiffness = (self.D.T @ self.mass1 @ self.D).tocsr()

        nodes, weights = gauss_legendre(self.quadrature_points)
        self.basis = self.space.basis_values(nodes[:, None])[..., 0]          # (Q, 2)
        self.basis_dx = self.space.basis_gradients(nodes[:, None])[..., 0]    # (Q, 2)
        self.connectivity = self.space.local_dofs(np.arange(self.mesh.N))     # (E, 2)
        left = self.mesh.x_min + self.mesh.h * np.arange(self.mesh.N)
        self.points = (left[:, None] + self.mesh.h * nodes[None, :]).ravel()
        self.weights = np.tile(weights * self.mesh.h, self.mesh.N)

    @property
    def periodic(self) -> bool:
        return self.mesh.periodic

    @property
    def boundary_dofs(self) -> np.ndarray:
        return np.zeros(0, dtype=int) if self.periodic else np.array([0, self.n - 1])

    def stacked_mass(self, m: int) -> sparse.csr_matrix:
        return sparse.kron(sparse.identity(m), self.mass, format="csr")


@dataclass(frozen=True, eq=False)
class PhaseState:
    """Point (phi, pi) of the semi-discrete phase space at time t."""
    phi: np.ndarray
    pi: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=float).ravel()
        pi = np.asarray(self.pi, dtype=float).ravel()
        if phi.shape != pi.shape:
            raise InputError(f"phi and pi differ in length ({phi.size} vs {pi.size})")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "t", float(self.t))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.phi, self.pi])

    @classmethod
    def from_vector(cls, z: np.ndarray, t: float) -> "PhaseState":
        half = len(z) // 2
        return cls(z[:half], z[half:], t)


@dataclass(eq=False)
class HamiltonianSystem:
    """Mass-matrix phase space of a density on a spatial slice."""
    space: SpatialSpace
    density: LagrangianDensity
    generators: Tuple[SymmetryGenerator, ...] = ()
    verified: Set[str] = field(default_factory=set, repr=False)

    def __post_init__(self):
        if self.density.metric.dim != 2:
            raise InputError("semi-discrete systems need a spacetime density")
        self.m = self.density.n_components
        self.size = self.m * self.space.n
        self.M = self.space.stacked_mass(self.m)
        try:
            self._mass_factor = linalg.cho_factor(self.M.toarray())
        except linalg.LinAlgError as exc:
            raise SingularMass(f"mass matrix of size {self.size} is not positive definite") from exc

    @classmethod
    def build(cls, space: SpatialSpace, density: LagrangianDensity) -> "HamiltonianSystem":
        return cls(space, density, tuple(density.generators))

    def solve_mass(self, rhs: np.ndarray) -> np.ndarray:
        return linalg.cho_solve(self._mass_factor, rhs)

    @property
    def omega(self) -> np.ndarray:
        """Matrix of the symplectic form, [[0, M], [-M, 0]]."""
        M = self.M.toarray()
        zero = np.zeros_like(M)
        return np.block([[zero, M], [-M.T, zero]])


# =============================================================================
# SLICE QUADRATURE
# =============================================================================

def _slice_jet(space: SpatialSpace, m: int, phi: np.ndarray, phidot: np.ndarray, t: float):
    """x (P, 2), values (P, m), psi (P, m, 2) at the slice quadrature points."""
    conn = space.connectivity
    c = np.asarray(phi, dtype=float).reshape(m, space.n)[:, conn]
    cd = np.asarray(phidot, dtype=float).reshape(m, space.n)[:, conn]
    values = np.einsum("mea,qa->eqm", c, space.basis).reshape(-1, m)
    psi = np.stack([
        np.einsum("mea,qa->eqm", cd, space.basis).reshape(-1, m),
        np.einsum("mea,qa->eqm", c, space.basis_dx).reshape(-1, m),
    ], axis=2)
    x = np.column_stack([np.full(space.points.size, float(t)), space.points])
    return x, values, psi


def _scatter(space: SpatialSpace, m: int, per_point: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """sum_q w_q f_a(q) b_i(q) reduced into a component-stacked vector."""
    E, Q = space.connectivity.shape[0], basis.shape[0]
    weighted = (per_point * space.weights[:, None]).reshape(E, Q, m)
    local = np.einsum("eqm,qa->mea", weighted, basis)
    out = np.zeros((m, space.n))
    np.add.at(out, (np.arange(m)[:, None, None], space.connectivity[None, :, :]), local)
    return out.ravel()


def instantaneous_lagrangian(space: SpatialSpace, density: LagrangianDensity, phi: np.ndarray,
                             phidot: np.ndarray, t: float = 0.0) -> float:
    """L_h(t, phi, phi_dot) by Gauss quadrature over the slice."""
    x, values, psi = _slice_jet(space, density.n_components, phi, phidot, t)
    return float(space.weights @ density.value(x, values, psi))


def lagrangian_partials(space: SpatialSpace, density: LagrangianDensity, phi: np.ndarray,
                        phidot: np.ndarray, t: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Returns:
        (dL_h/dphi, dL_h/dphi_dot) with entries (d2L, v_j) + (dL/dphi_x, v_j')
        and (dL/dphi_t, v_j)
    """
    m = density.n_components
    x, values, psi = _slice_jet(space, m, phi, phidot, t)
    d2 = density.d2(x, values, psi)
    d3 = density.d3(x, values, psi)
    dphi = _scatter(space, m, d2, space.basis) + _scatter(space, m, d3[..., 1], space.basis_dx)
    dphidot = _scatter(space, m, d3[..., 0], space.basis)
    return dphi, dphidot


def _pair_matrix(space: SpatialSpace, m: int, coeff: np.ndarray, left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Dense sum_q w_q c_ab(q) l_i(q) r_j(q) in component-stacked layout; coeff (P, m, m)."""
    E, Q = space.connectivity.shape[0], left.shape[0]
    weighted = (coeff * space.weights[:, None, None]).reshape(E, Q, m, m)
    local = np.einsum("eqab,qi,qj->eaibj", weighted, left, right)
    conn = space.connectivity
    comp = np.arange(m)
    rows = comp[None, :, None, None, None] * space.n + conn[:, None, :, None, None]
    cols = comp[None, None, None, :, None] * space.n + conn[:, None, None, None, :]
    rows = np.broadcast_to(rows, local.shape).ravel()
    cols = np.broadcast_to(cols, local.shape).ravel()
    size = m * space.n
    return sparse.coo_matrix((local.ravel(), (rows, cols)), shape=(size, size)).toarray()


def _velocity_hessian(system: HamiltonianSystem, phi: np.ndarray, phidot: np.ndarray, t: float) -> np.ndarray:
    """d^2 L_h / d phi_dot^2."""
    space, density, m = system.space, system.density, system.m
    if density.d33 is not None:
        x, values, psi = _slice_jet(space, m, phi, phidot, t)
        d33 = density.d33(x, values, psi)[:, :, 0, :, 0]
        return _pair_matrix(space, m, d33, space.basis, space.basis)
    return _fd_matrix(lambda v: lagrangian_partials(space, density, phi, v, t)[1], phidot)


def _position_hessian(system: HamiltonianSystem, phi: np.ndarray, phidot: np.ndarray, t: float) -> np.ndarray:
    """d^2 L_h / d phi^2."""
    space, density, m = system.space, system.density, system.m
    if not density.has_second_partials:
        return _fd_matrix(lambda v: lagrangian_partials(space, density, v, phidot, t)[0], phi)
    x, values, psi = _slice_jet(space, m, phi, phidot, t)
    d22 = density.d22(x, values, psi)
    d23 = density.d23(x, values, psi)[..., 1]          # (P, a, b): d/dphi_x,b of dL/dphi_a
    d33 = density.d33(x, values, psi)[:, :, 1, :, 1]
    N, G = space.basis, space.basis_dx
    return (_pair_matrix(space, m, d22, N, N)
            + _pair_matrix(space, m, d23, N, G)
            + _pair_matrix(space, m, np.swapaxes(d23, 1, 2), G, N)
            + _pair_matrix(space, m, d33, G, G))


def _fd_matrix(fn: Callable[[np.ndarray], np.ndarray], at: np.ndarray) -> np.ndarray:
    at = np.asarray(at, dtype=float)
    step = 1e-6 * (1.0 + float(np.max(np.abs(at), initial=0.0)))
    columns = []
    for j in range(at.size):
        plus, minus = at.copy(), at.copy()
        plus[j] += step
        minus[j] -= step
        columns.append((fn(plus) - fn(minus)) / (2 * step))
    return np.column_stack(columns)


# =============================================================================
# LEGENDRE TRANSFORM AND HAMILTONIAN
# =============================================================================

def legendre_transform(system: HamiltonianSystem, phi: np.ndarray, phidot: np.ndarray, t: float = 0.0) -> np.ndarray:
    """pi solving M pi = b with b_j = (dL/dphi_t, v_j)."""
    _, b = lagrangian_partials(system.space, system.density, phi, phidot, t)
    return system.solve_mass(b)


def inverse_legendre(system: HamiltonianSystem, phi: np.ndarray, pi: np.ndarray, t: float = 0.0,
                     tol: float = 1e-12, max_iter: int = 50) -> np.ndarray:
    """
    Velocities with legendre_transform(phi, phi_dot) = pi.

    Raises:
        LegendreInversionFailed: Newton stalls above tol
    """
    pi = np.asarray(pi, dtype=float)
    if system.density.unit_kinetic:
        return pi.copy()
    target = system.M @ pi
    phidot = pi.copy()
    for _ in range(max_iter):
        _, b = lagrangian_partials(system.space, system.density, phi, phidot, t)
        defect = b - target
        if np.max(np.abs(defect)) <= tol * (1.0 + np.max(np.abs(target))):
            return phidot
        phidot = phidot - linalg.solve(_velocity_hessian(system, phi, phidot, t), defect)
    raise LegendreInversionFailed(f"Legendre inversion stalled after {max_iter} iterations")


def hamiltonian(system: HamiltonianSystem, state: PhaseState) -> float:
    """H_h = pi^T M phi_dot - L_h(t, phi, phi_dot)."""
    phidot = inverse_legendre(system, state.phi, state.pi, state.t)
    return float(state.pi @ (system.M @ phidot)
                 - instantaneous_lagrangian(system.space, system.density, state.phi, phidot, state.t))


def hamiltonian_gradient(system: HamiltonianSystem, state: PhaseState) -> Tuple[np.ndarray, np.ndarray]:
    """(dH/dphi, dH/dpi) = (-dL_h/dphi, M phi_dot) at the inverted velocities."""
    phidot = inverse_legendre(system, state.phi, state.pi, state.t)
    dphi, _ = lagrangian_partials(system.space, system.density, state.phi, phidot, state.t)
    return -dphi, system.M @ phidot


def hamiltonian_vector_field(system: HamiltonianSystem, state: PhaseState) -> Tuple[np.ndarray, np.ndarray]:
    """(phi_dot, pi_dot) from M phi_dot = dH/dpi and M pi_dot = -dH/dphi."""
    dH_dphi, dH_dpi = hamiltonian_gradient(system, state)
    return system.solve_mass(dH_dpi), system.solve_mass(-dH_dphi)


def _flow(system: HamiltonianSystem, z: np.ndarray, t: float) -> np.ndarray:
    return np.concatenate(hamiltonian_vector_field(system, PhaseState.from_vector(z, t)))


def _flow_jacobian(system: HamiltonianSystem, z: np.ndarray, t: float) -> np.ndarray:
    """Jacobian of the Hamiltonian vector field; block form for unit-kinetic densities."""
    n = system.size
    if system.density.unit_kinetic and system.density.has_second_partials:
        phi = z[:n]
        Hpp = _position_hessian(system, phi, z[n:], t)
        J = np.zeros((2 * n, 2 * n))
        J[:n, n:] = np.eye(n)
        J[n:, :n] = system.solve_mass(Hpp)
        return J
    return _fd_matrix(lambda v: _flow(system, v, t), z)


# =============================================================================
# STEPPERS
# =============================================================================

def step_implicit_midpoint(system: HamiltonianSystem, state: PhaseState, dt: float,
                           tol: float = 1e-12, max_iter: int = 50) -> PhaseState:
    """
    z1 = z0 + dt f(t + dt/2, (z0 + z1)/2) solved by Newton with J = I - dt/2 J_f.

    Raises:
        NoConvergence: Newton residual above tol (relative to 1 + |z|)
    """
    if dt <= 0:
        raise InputError(f"time step must be positive, got {dt}")
    z0 = state.vector
    t_mid = state.t + 0.5 * dt
    z1 = z0 + dt * _flow(system, z0, state.t)
    report = SolveReport(tolerance=tol)
    for iteration in range(max_iter + 1):
        mid = 0.5 * (z0 + z1)
        G = z1 - z0 - dt * _flow(system, mid, t_mid)
        report.residual_norm = float(np.max(np.abs(G))) / (1.0 + float(np.max(np.abs(z1))))
        report.iterations = iteration
        if report.residual_norm <= tol:
            return PhaseState.from_vector(z1, state.t + dt)
        J = np.eye(len(z0)) - 0.5 * dt * _flow_jacobian(system, mid, t_mid)
        z1 = z1 - linalg.solve(J, G)
    report.status = SolveStatus.NO_CONVERGENCE
    raise NoConvergence(report)


def step_explicit_euler(system: HamiltonianSystem, state: PhaseState, dt: float) -> PhaseState:
    """Non-symplectic control stepper."""
    if dt <= 0:
        raise InputError(f"time step must be positive, got {dt}")
    z = state.vector
    return PhaseState.from_vector(z + dt * _flow(system, z, state.t), state.t + dt)


STEPPERS: Dict[str, Callable] = {
    "midpoint": step_implicit_midpoint,
    "euler": step_explicit_euler,
}


def _stepper(stepper: Union[str, Callable]) -> Callable:
    if callable(stepper):
        return stepper
    if stepper not in STEPPERS:
        raise InputError(f"unknown stepper {stepper!r}; choose from {sorted(STEPPERS)}")
    return STEPPERS[stepper]


@dataclass
class Trajectory:
    """States of a simulation, one per step including the initial one."""
    states: List[PhaseState]

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    @property
    def positions(self) -> np.ndarray:
        return np.stack([s.phi for s in self.states])

    def __len__(self) -> int:
        return len(self.states)


def simulate(system: HamiltonianSystem, state: PhaseState, dt: float, steps: int,
             stepper: Union[str, Callable] = "midpoint") -> Trajectory:
    """Advance `steps` steps of size dt and keep every state."""
    step = _stepper(stepper)
    states = [state]
    for _ in range(int(steps)):
        states.append(step(system, states[-1], dt))
    return Trajectory(states)


# =============================================================================
# MOMENTUM AND ENERGY-MOMENTUM MAPS
# =============================================================================

def _verify_generator(system: HamiltonianSystem, generator: SymmetryGenerator, tol: float = 1e-8):
    if generator.name in system.verified:
        return
    if not generator.claimed_equivariant:
        raise NotEquivariant(generator.name, float("inf"), tol)
    residual = equivariance_check(system.space.complex, generator, n_components=system.m)
    if residual > tol:
        raise NotEquivariant(generator.name, residual, tol)
    system.verified.add(generator.name)


def momentum_map(system: HamiltonianSystem, state: PhaseState, generator: SymmetryGenerator) -> float:
    """<J_h, xi> = xi_Y(phi)^T M pi."""
    _verify_generator(system, generator)
    return float(generator.vector_field(state.phi) @ (system.M @ state.pi))


def canonical_one_form(system: HamiltonianSystem, state: PhaseState, V_phi: np.ndarray) -> float:
    """theta_h(V) = pi^T M V_phi."""
    return float(state.pi @ (system.M @ np.asarray(V_phi, dtype=float)))


def symplectic_form(system: HamiltonianSystem, U: Tuple[np.ndarray, np.ndarray],
                    V: Tuple[np.ndarray, np.ndarray]) -> float:
    """omega_h(U, V) = U_phi^T M V_pi - V_phi^T M U_pi."""
    (U_phi, U_pi), (V_phi, V_pi) = U, V
    return float(U_phi @ (system.M @ V_pi) - V_phi @ (system.M @ U_pi))


class ExtendedVector(NamedTuple):
    """Vector on extended phase space: time component and vertical (phi, pi) parts."""
    t_component: float
    phi_component: np.ndarray
    pi_component: Optional[np.ndarray] = None


def hamiltonian_extended_vector(system: HamiltonianSystem, state: PhaseState) -> ExtendedVector:
    """X_H with unit time component."""
    phidot, pidot = hamiltonian_vector_field(system, state)
    return ExtendedVector(1.0, phidot, pidot)


def energy_momentum_pairing(system: HamiltonianSystem, state: PhaseState, V: ExtendedVector) -> float:
    """<J_h(t, phi, pi), V> = pi^T M V_phi - V_t L_h(t, phi, phi_dot)."""
    pairing = canonical_one_form(system, state, V.phi_component)
    if V.t_component != 0.0:
        phidot = inverse_legendre(system, state.phi, state.pi, state.t)
        pairing -= V.t_component * instantaneous_lagrangian(system.space, system.density, state.phi, phidot, state.t)
    return float(pairing)


# =============================================================================
# STRUCTURE CHECKS
# =============================================================================

def symplecticity_check(system: HamiltonianSystem, state: PhaseState, dt: float, steps: int,
                        stepper: Union[str, Callable] = "midpoint", step_scale: float = 1e-5) -> float:
    """|DPhi^T Omega DPhi - Omega|_inf with DPhi by central differences of the flow map."""
    if steps == 0:
        return 0.0
    step = _stepper(stepper)
    z0 = state.vector
    h = step_scale * (1.0 + float(np.max(np.abs(z0))))

    def flow_map(z: np.ndarray) -> np.ndarray:
        current = PhaseState.from_vector(z, state.t)
        for _ in range(steps):
            current = step(system, current, dt)
        return current.vector

    columns = []
    for j in range(z0.size):
        plus, minus = z0.copy(), z0.copy()
        plus[j] += h
        minus[j] -= h
        columns.append((flow_map(plus) - flow_map(minus)) / (2 * h))
    DPhi = np.column_stack(columns)
    omega = system.omega
    return float(np.max(np.abs(DPhi.T @ omega @ DPhi - omega)))


def semidiscrete_residual(space: SpatialSpace, density: LagrangianDensity, times: np.ndarray,
                          positions: np.ndarray, velocities: Optional[np.ndarray] = None
                          ) -> Tuple[np.ndarray, np.ndarray]:
    """
    r_j(t) = d/dt (dL/dphi_t, v_j) - (d2L, v_j) - (dL/dphi_x, v_j') on a uniform sample grid.

    Velocities default to central differences of the positions. The outer
    time derivative is a central difference of the momenta.

    Returns:
        (times of the residual rows, residual rows)

    Raises:
        InsufficientSamples: fewer than 3 samples (5 without velocities)
    """
    times = np.asarray(times, dtype=float)
    positions = np.asarray(positions, dtype=float)
    needed = 3 if velocities is not None else 5
    if len(times) < needed or positions.shape[0] != len(times):
        raise InsufficientSamples(f"need at least {needed} matching samples, got {len(times)}")
    dt = np.diff(times)
    if not np.allclose(dt, dt[0]):
        raise InputError("trajectory samples must be uniformly spaced")
    dt = float(dt[0])

    if velocities is None:
        velocities = (positions[2:] - positions[:-2]) / (2 * dt)
        positions, times = positions[1:-1], times[1:-1]
    else:
        velocities = np.asarray(velocities, dtype=float)

    partials = [lagrangian_partials(space, density, p, v, t) for p, v, t in zip(positions, velocities, times)]
    forces = np.stack([q for q, _ in partials])
    momenta = np.stack([p for _, p in partials])
    residual = (momenta[2:] - momenta[:-2]) / (2 * dt) - forces[1:-1]
    return times[1:-1], residual


def trajectory_residual_norm(system: HamiltonianSystem, trajectory: Trajectory) -> float:
    """max |semidiscrete_residual| along a Hamiltonian trajectory, velocities from the momenta."""
    velocities = np.stack([inverse_legendre(system, s.phi, s.pi, s.t) for s in trajectory.states])
    _, residual = semidiscrete_residual(system.space, system.density, trajectory.times,
                                        trajectory.positions, velocities)
    return float(np.max(np.abs(residual)))


def tensor_product_equivalence(space: SpatialSpace, t_mesh: IntervalMesh, density: LagrangianDensity,
                               coefficients: np.ndarray) -> Dict[str, float]:
    """
    Compare the temporal-Galerkin residual of the semi-discrete EL with the
    covariant residual on the tensor-product spacetime space.

    Returns:
        {"difference": |a - b|_inf, "scale": 1 + |b|_inf}

    Raises:
        BasisMismatch: periodic time mesh, or quadrature orders differ
    """
    if t_mesh.periodic:
        raise BasisMismatch("temporal mesh must not be periodic")
    if space.quadrature_points != 4:
        raise BasisMismatch("the covariant path integrates with 4 Gauss points per direction")
    m = density.n_components
    n_t, n_x = t_mesh.n_nodes, space.n
    coeffs = np.asarray(coefficients, dtype=float).ravel()
    if coeffs.size != m * n_t * n_x:
        raise BasisMismatch(f"expected {m * n_t * n_x} coefficients, got {coeffs.size}")
    grid = coeffs.reshape(m, n_t, n_x)

    # (a) semi-discrete partials at temporal Gauss points, tested with temporal hats
    nodes, weights = gauss_legendre(space.quadrature_points)
    theta = np.stack([1.0 - nodes, nodes], axis=1)
    dtheta = np.array([-1.0, 1.0]) / t_mesh.h
    galerkin = np.zeros((n_t, m, n_x))
    for k in range(t_mesh.N):
        window = grid[:, k:k + 2, :]                                  # (m, 2, n_x)
        for tau, w, th in zip(nodes, weights, theta):
            t = t_mesh.x_min + (k + tau) * t_mesh.h
            phi = np.einsum("mix,i->mx", window, th).ravel()
            phidot = np.einsum("mix,i->mx", window, dtheta).ravel()
            force, momentum = lagrangian_partials(space, density, phi, phidot, t)
            force, momentum = force.reshape(m, n_x), momentum.reshape(m, n_x)
            for local in range(2):
                galerkin[k + local] += w * t_mesh.h * (momentum * dtheta[local] + force * th[local])
    galerkin = galerkin.transpose(1, 0, 2).ravel()

    # (b) covariant assembly on the tensor-product mesh
    mesh = TensorMesh2D(t_mesh, space.mesh)
    covariant = CovariantAssembler(CochainComplex.build(mesh, density.metric), density).residual(coeffs)
    difference = float(np.max(np.abs(galerkin - covariant)))
    return {"difference": difference, "scale": 1.0 + float(np.max(np.abs(covariant)))}


def midpoint_phase_error(space: SpatialSpace, density: LagrangianDensity, dts: Sequence[float],
                         mode: int = 1) -> List[Dict[str, float]]:
    """
    One midpoint step of a single Fourier mode of a linear density on a
    periodic slice, measured as a rotation angle against the exact frequency.

    The numerical frequency is compared with 2/dt arctan(omega dt / 2).
    """
    if not space.periodic:
        raise InputError("phase study needs a periodic slice")
    if density.n_components != 1:
        raise InputError("phase study needs a scalar density")
    system = HamiltonianSystem.build(space, density)
    x = space.mesh.node_coords
    u = np.cos(2.0 * np.pi * mode * (x - space.mesh.x_min) / space.mesh.length)
    M = system.M
    K = -_position_hessian(system, np.zeros(space.n), np.zeros(space.n), 0.0)
    norm = float(u @ (M @ u))
    omega = float(np.sqrt((u @ (K @ u)) / norm))

    rows = []
    for dt in dts:
        after = step_implicit_midpoint(system, PhaseState(u, np.zeros_like(u)), dt)
        a = float(u @ (M @ after.phi)) / norm
        b = float(u @ (M @ after.pi)) / norm
        numerical = float(np.arctan2(-b / omega, a)) / dt
        predicted = 2.0 / dt * float(np.arctan(omega * dt / 2.0))
        rows.append({"dt": dt, "omega": omega, "numerical": numerical, "predicted": predicted,
                     "error": abs(numerical - omega)})
    for row, rate in zip(rows, convergence_rates([r["error"] for r in rows],
                                                 ratio=dts[0] / dts[1] if len(dts) > 1 else 2.0)):
        row["rate"] = rate
    return rows

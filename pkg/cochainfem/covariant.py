#!/usr/bin/env python3
"""
CochainFEM - Covariant Discrete Euler-Lagrange Solver
=====================================================
Assembly of the localized action, its gradient (the DEL residual
r_j = (d2L, v_j) + (d3L, dv_j)) and Hessian on spacetime meshes, quadrature
variants of the action, and a damped Newton solve with Dirichlet trace data.

Fields are m-tuples of degree-0 forms stored component-stacked:
coefficient a*n + i belongs to component a at node i.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg, sparse
from scipy.sparse import linalg as sparse_linalg

from cochainfem.feec import CochainComplex, FormField
from cochainfem.lagrangian import LagrangianDensity, builtin_nonlinear_wave_poisson, polynomial_potential
from cochainfem.mesh import RegularRegion, TensorMesh2D, boundary_dof_sets, build_tensor_mesh, full_region
from cochainfem.utils import InputError, SolverError, convergence_rates, gauss_legendre, tensor_gauss

logger = logging.getLogger(__name__)

FieldInput = Union[np.ndarray, Sequence[FormField]]


# =============================================================================
# ERRORS AND REPORTS
# =============================================================================

class SolveStatus(Enum):
    """Newton solve status."""
    PENDING = "pending"
    CONVERGED = "converged"
    NO_CONVERGENCE = "no_convergence"
    SINGULAR = "singular"


@dataclass
class SolveReport:
    """Newton iteration diagnostics."""
    tolerance: float
    iterations: int = 0
    residual_norm: float = float("inf")
    converged: bool = False
    status: SolveStatus = SolveStatus.PENDING
    step_sizes: List[float] = field(default_factory=list)
    residual_history: List[float] = field(default_factory=list)
    linear_solver: str = "none"
    pivot_ratio: Optional[float] = None
    last_error: Optional[str] = None

    def mark_converged(self):
        if not self.residual_norm <= self.tolerance:
            raise InputError("cannot mark a solve converged above its tolerance")
        self.converged = True
        self.status = SolveStatus.CONVERGED

    def to_dict(self) -> Dict[str, object]:
        return {
            "iterations": self.iterations,
            "residual_norm": self.residual_norm,
            "tolerance": self.tolerance,
            "converged": self.converged,
            "status": self.status.value,
            "step_sizes": list(self.step_sizes),
            "residual_history": list(self.residual_history),
            "linear_solver": self.linear_solver,
            "pivot_ratio": self.pivot_ratio,
        }


class NoConvergence(SolverError):
    """Newton did not reach the tolerance within max_iter."""

    def __init__(self, report: SolveReport):
        super().__init__(
            f"no convergence after {report.iterations} iterations "
            f"(residual {report.residual_norm:.3e} > {report.tolerance:.1e})"
        )
        self.report = report


class SingularJacobian(SolverError):
    """Interior Jacobian block could not be factorized."""

    def __init__(self, iteration: int, detail: str = ""):
        super().__init__(f"singular Jacobian at iteration {iteration} {detail}".strip())
        self.iteration = iteration


# =============================================================================
# QUADRATURE RULES
# =============================================================================

@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Per-element nodes (reference coordinates in [0,1]^2) and absolute weights."""
    kind: str
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        points = np.atleast_2d(np.asarray(self.points, dtype=float))
        weights = np.asarray(self.weights, dtype=float)
        if points.shape != (weights.size, 2):
            raise InputError(f"rule {self.kind}: {points.shape} points vs {weights.size} weights")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @property
    def measure(self) -> float:
        return float(np.sum(self.weights))


def gauss_rule(mesh: TensorMesh2D, p: int = 4) -> QuadratureRule:
    """p x p Gauss rule; exact for the polynomial integrands of the builtins when p >= 4."""
    points, weights = tensor_gauss(p)
    return QuadratureRule(f"gauss-{p}", points, weights * mesh.element_measure)


def nodal_vertex_rule(mesh: TensorMesh2D) -> QuadratureRule:
    """Trapezoidal rule at the four element vertices, in local node order."""
    points = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    return QuadratureRule("nodal-vertex", points, np.full(4, 0.25 * mesh.element_measure))


# =============================================================================
# DIRICHLET DATA
# =============================================================================

@dataclass
class DirichletData:
    """Prescribed values of component-stacked degree-0 coefficients."""
    dofs: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.dofs = np.asarray(self.dofs, dtype=int).ravel()
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.dofs.shape != self.values.shape:
            raise InputError("Dirichlet dofs and values differ in length")
        if np.unique(self.dofs).size != self.dofs.size:
            raise InputError("Dirichlet dofs must be unique")

    def as_dict(self) -> Dict[int, float]:
        return dict(zip(self.dofs.tolist(), self.values.tolist()))


def global_boundary_nodes(complex_: CochainComplex) -> np.ndarray:
    """Degree-0 dofs with nonvanishing trace on the boundary of the whole domain."""
    return boundary_dof_sets(full_region(complex_.mesh), complex_.space(0)).boundary_dofs


def boundary_dirichlet(complex_: CochainComplex, n_components: int, trace: Callable) -> DirichletData:
    """
    Sample a trace function at the global boundary nodes.

    Args:
        trace: Callable (t, x) -> (P,) values for m = 1 or (P, m) values
    """
    nodes = global_boundary_nodes(complex_)
    coords = complex_.mesh.node_coords[nodes]
    values = np.asarray(trace(coords[:, 0], coords[:, 1]), dtype=float)
    values = values.reshape(len(nodes), n_components) if values.ndim > 1 else values[:, None]
    n = complex_.space(0).n_dofs
    dofs = np.concatenate([a * n + nodes for a in range(n_components)])
    return DirichletData(dofs, values.T.ravel())


# =============================================================================
# ASSEMBLY
# =============================================================================

def as_coefficients(phi: FieldInput, n_components: int, n_dofs: int) -> np.ndarray:
    """Component-stacked coefficient vector from an array or a FormField tuple."""
    if isinstance(phi, np.ndarray):
        coeffs = np.asarray(phi, dtype=float).ravel()
    else:
        coeffs = np.concatenate([np.asarray(f.coefficients, dtype=float) for f in phi])
    if coeffs.size != n_components * n_dofs:
        raise InputError(f"expected {n_components * n_dofs} coefficients, got {coeffs.size}")
    return coeffs


def as_fields(coefficients: np.ndarray, complex_: CochainComplex, n_components: int) -> Tuple[FormField, ...]:
    space = complex_.space(0)
    parts = np.asarray(coefficients, dtype=float).reshape(n_components, space.n_dofs)
    return tuple(FormField(space, part.copy()) for part in parts)


class CovariantAssembler:
    """
    Vectorized element assembly of S_U, its gradient and Hessian.

    Every element of the region is processed in one batch; contributions are
    reduced into global arrays in element order with np.add.at and COO
    summation, so results do not depend on scheduling.
    """

    def __init__(self, complex_: CochainComplex, density: LagrangianDensity,
                 rule: Optional[QuadratureRule] = None):
        if not isinstance(complex_.mesh, TensorMesh2D):
            raise InputError("covariant assembly needs a spacetime mesh")
        if density.metric.dim != 2:
            raise InputError("covariant assembly needs a spacetime density")
        self.complex = complex_
        self.density = density
        self.mesh: TensorMesh2D = complex_.mesh
        self.space = complex_.space(0)
        self.rule = rule or gauss_rule(self.mesh, 4)
        self.m = density.n_components
        self.n = self.space.n_dofs
        self.size = self.m * self.n
        self.N = self.space.basis_values(self.rule.points)[..., 0]   # (Q, 4)
        self.G = self.space.basis_gradients(self.rule.points)       # (Q, 4, 2)

    # -- helpers -------------------------------------------------------------
    def elements(self, region: Optional[RegularRegion]) -> np.ndarray:
        if region is None:
            return np.arange(self.mesh.n_elements)
        if region.mesh != self.mesh:
            raise InputError("region belongs to another mesh")
        return region.elements

    def region_dofs(self, region: Optional[RegularRegion]) -> np.ndarray:
        """Component-stacked dofs touched by the region's elements."""
        nodes = np.unique(self.space.local_dofs(self.elements(region)))
        return np.concatenate([a * self.n + nodes for a in range(self.m)])

    def quadrature_points(self, elements: np.ndarray) -> np.ndarray:
        origin = self.mesh.element_origin[elements]
        scale = np.array([self.mesh.dt, self.mesh.dx])
        return origin[:, None, :] + self.rule.points[None, :, :] * scale

    def fields_at(self, coeffs: np.ndarray, elements: np.ndarray):
        """x (E,Q,2), phi (E,Q,m), psi (E,Q,m,2) at the rule's points."""
        c = coeffs.reshape(self.m, self.n)[:, self.space.local_dofs(elements)]   # (m, E, 4)
        phi = np.einsum("mea,qa->eqm", c, self.N)
        psi = np.einsum("mea,qad->eqmd", c, self.G)
        return self.quadrature_points(elements), phi, psi

    def _flat(self, x, phi, psi):
        E, Q = phi.shape[:2]
        return x.reshape(E * Q, 2), phi.reshape(E * Q, self.m), psi.reshape(E * Q, self.m, 2)

    def _scatter(self, elements: np.ndarray, local: np.ndarray) -> np.ndarray:
        """Reduce (E, m, 4) element vectors into a component-stacked vector."""
        out = np.zeros((self.m, self.n))
        conn = self.space.local_dofs(elements)
        comps = np.arange(self.m)[:, None, None]
        np.add.at(out, (comps, conn[None, :, :]), local.transpose(1, 0, 2))
        return out.ravel()

    # -- action, gradient, Hessian ---------------------------------------------
    def action(self, phi: FieldInput, region: Optional[RegularRegion] = None) -> float:
        coeffs = as_coefficients(phi, self.m, self.n)
        elements = self.elements(region)
        x, f, g = self.fields_at(coeffs, elements)
        E, Q = f.shape[:2]
        values = self.density.value(*self._flat(x, f, g)).reshape(E, Q)
        return float(np.sum(values @ self.rule.weights))

    def residual(self, phi: FieldInput, region: Optional[RegularRegion] = None) -> np.ndarray:
        coeffs = as_coefficients(phi, self.m, self.n)
        elements = self.elements(region)
        x, f, g = self.fields_at(coeffs, elements)
        E, Q = f.shape[:2]
        flat = self._flat(x, f, g)
        d2 = self.density.d2(*flat).reshape(E, Q, self.m)
        d3 = self.density.d3(*flat).reshape(E, Q, self.m, 2)
        w = self.rule.weights
        local = (np.einsum("eqm,q,qa->ema", d2, w, self.N)
                 + np.einsum("eqmd,q,qad->ema", d3, w, self.G))
        return self._scatter(elements, local)

    def jacobian(self, phi: FieldInput, region: Optional[RegularRegion] = None) -> sparse.csr_matrix:
        """Analytic Hessian when second partials exist, else symmetrized finite differences."""
        coeffs = as_coefficients(phi, self.m, self.n)
        if not self.density.has_second_partials:
            return self.fd_jacobian(coeffs, region)

        elements = self.elements(region)
        x, f, g = self.fields_at(coeffs, elements)
        E, Q = f.shape[:2]
        m = self.m
        flat = self._flat(x, f, g)
        d22 = self.density.d22(*flat).reshape(E, Q, m, m)
        d23 = self.density.d23(*flat).reshape(E, Q, m, m, 2)
        d33 = self.density.d33(*flat).reshape(E, Q, m, 2, m, 2)
        w, Nq, Gq = self.rule.weights, self.N, self.G

        local = (np.einsum("eqmk,q,qa,qb->emakb", d22, w, Nq, Nq)
                 + np.einsum("eqmkd,q,qa,qbd->emakb", d23, w, Nq, Gq)
                 + np.einsum("eqkmd,q,qad,qb->emakb", d23, w, Gq, Nq)
                 + np.einsum("eqmdkf,q,qad,qbf->emakb", d33, w, Gq, Gq))

        conn = self.space.local_dofs(elements)
        comp = np.arange(m)
        rows = comp[None, :, None, None, None] * self.n + conn[:, None, :, None, None]
        cols = comp[None, None, None, :, None] * self.n + conn[:, None, None, None, :]
        rows = np.broadcast_to(rows, local.shape).ravel()
        cols = np.broadcast_to(cols, local.shape).ravel()
        return sparse.coo_matrix((local.ravel(), (rows, cols)), shape=(self.size, self.size)).tocsr()

    def fd_jacobian(self, coeffs: np.ndarray, region: Optional[RegularRegion] = None,
                    symmetrize: bool = True,
                    residual_fn: Optional[Callable] = None) -> sparse.csr_matrix:
        """Central-difference columns of the residual, step 1e-6 (1 + |phi|_inf)."""
        residual_fn = residual_fn or self.residual
        coeffs = np.asarray(coeffs, dtype=float)
        step = 1e-6 * (1.0 + float(np.max(np.abs(coeffs), initial=0.0)))
        dense = np.zeros((self.size, self.size))
        for j in self.region_dofs(region):
            plus, minus = coeffs.copy(), coeffs.copy()
            plus[j] += step
            minus[j] -= step
            dense[:, j] = (residual_fn(plus, region) - residual_fn(minus, region)) / (2 * step)
        if symmetrize:
            dense = 0.5 * (dense + dense.T)
        return sparse.csr_matrix(dense)

    # -- quadrature applied after variation -----------------------------------
    def equation_residual(self, phi: FieldInput, region: Optional[RegularRegion] = None) -> np.ndarray:
        """
        DEL with d2L formed from nodal values and interpolated before the rule.

        Coincides with `residual` for the nodal-vertex rule; for other rules it
        is not the gradient of any discrete action.
        """
        coeffs = as_coefficients(phi, self.m, self.n)
        elements = self.elements(region)
        conn = self.space.local_dofs(elements)
        c = coeffs.reshape(self.m, self.n)[:, conn]                    # (m, E, 4)
        E = len(elements)

        corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        corner_grads = self.space.basis_gradients(corners)             # (4 corners, 4, 2)
        # cell-local corners, so a wrapped periodic node sits at the right edge
        origin = self.mesh.element_origin[elements]
        scale = np.array([self.mesh.dt, self.mesh.dx])
        x_nodes = (origin[:, None, :] + corners[None, :, :] * scale).reshape(E * 4, 2)
        phi_nodes = c.transpose(1, 2, 0).reshape(E * 4, self.m)
        psi_nodes = np.einsum("mea,iad->eimd", c, corner_grads).reshape(E * 4, self.m, 2)
        d2_nodes = self.density.d2(x_nodes, phi_nodes, psi_nodes).reshape(E, 4, self.m)
        d2_q = np.einsum("qi,eim->eqm", self.N, d2_nodes)

        x, f, g = self.fields_at(coeffs, elements)
        Q = f.shape[1]
        d3 = self.density.d3(*self._flat(x, f, g)).reshape(E, Q, self.m, 2)
        w = self.rule.weights
        local = (np.einsum("eqm,q,qa->ema", d2_q, w, self.N)
                 + np.einsum("eqmd,q,qad->ema", d3, w, self.G))
        return self._scatter(elements, local)

    # -- naturality ------------------------------------------------------------
    def degenerate_action(self, phi0: np.ndarray, dphi: np.ndarray,
                          region: Optional[RegularRegion] = None) -> float:
        """Integral of L(x, phi, psi) with phi from 0-forms and psi from independent 1-forms."""
        space1 = self.complex.space(1)
        phi0 = np.asarray(phi0, dtype=float).reshape(self.m, self.n)
        dphi = np.asarray(dphi, dtype=float).reshape(self.m, space1.n_dofs)
        elements = self.elements(region)
        values1 = space1.basis_values(self.rule.points)               # (Q, 4, 2)
        c0 = phi0[:, self.space.local_dofs(elements)]
        c1 = dphi[:, space1.local_dofs(elements)]
        f = np.einsum("mea,qa->eqm", c0, self.N)
        g = np.einsum("mea,qad->eqmd", c1, values1)
        x = self.quadrature_points(elements)
        E, Q = f.shape[:2]
        values = self.density.value(*self._flat(x, f, g)).reshape(E, Q)
        return float(np.sum(values @ self.rule.weights))


# =============================================================================
# MODULE-LEVEL OPERATIONS
# =============================================================================

def assemble_action(complex_: CochainComplex, density: LagrangianDensity, phi: FieldInput,
                    region: Optional[RegularRegion] = None) -> float:
    """S_U[phi] by exact Gauss integration over the region's elements."""
    return CovariantAssembler(complex_, density).action(phi, region)


def assemble_residual(complex_: CochainComplex, density: LagrangianDensity, phi: FieldInput,
                      region: Optional[RegularRegion] = None) -> np.ndarray:
    """r_j = (d2L, v_j) + (d3L, dv_j) for every component-stacked dof j."""
    return CovariantAssembler(complex_, density).residual(phi, region)


def assemble_jacobian(complex_: CochainComplex, density: LagrangianDensity, phi: FieldInput,
                      region: Optional[RegularRegion] = None) -> sparse.csr_matrix:
    """Symmetric Hessian H of S_U."""
    return CovariantAssembler(complex_, density).jacobian(phi, region)


def quadrature_action(complex_: CochainComplex, density: LagrangianDensity, phi: FieldInput,
                      region: Optional[RegularRegion], rule: QuadratureRule) -> float:
    """S_U approximated by sum_a b_a L(j^1 phi)(c_a) on every element."""
    return CovariantAssembler(complex_, density, rule).action(phi, region)


def quadrature_residual(complex_: CochainComplex, density: LagrangianDensity, phi: FieldInput,
                        region: Optional[RegularRegion], rule: QuadratureRule) -> np.ndarray:
    """Gradient of quadrature_action (quadrature applied before the variation)."""
    return CovariantAssembler(complex_, density, rule).residual(phi, region)


def equation_quadrature_residual(complex_: CochainComplex, density: LagrangianDensity, phi: FieldInput,
                                 region: Optional[RegularRegion], rule: QuadratureRule) -> np.ndarray:
    """Quadrature applied after the variation, to the discrete equations."""
    return CovariantAssembler(complex_, density, rule).equation_residual(phi, region)


def ordering_gap(complex_: CochainComplex, density: LagrangianDensity, phi: FieldInput,
                 region: Optional[RegularRegion], rule: QuadratureRule,
                 with_asymmetry: bool = False) -> Dict[str, float]:
    """
    Difference between varying-then-integrating and integrating-then-varying.

    Returns:
        {"vector_gap": |A - B|_inf, "scale": 1 + |A|_inf} and, when requested,
        "jacobian_asymmetry": |J_B - J_B^T|_inf / |J_B|_inf of the
        after-variation equations
    """
    assembler = CovariantAssembler(complex_, density, rule)
    coeffs = as_coefficients(phi, assembler.m, assembler.n)
    before = assembler.residual(coeffs, region)
    after = assembler.equation_residual(coeffs, region)
    gap = {
        "vector_gap": float(np.max(np.abs(before - after))),
        "scale": 1.0 + float(np.max(np.abs(before))),
    }
    if with_asymmetry:
        jac = assembler.fd_jacobian(coeffs, region, symmetrize=False,
                                    residual_fn=assembler.equation_residual).toarray()
        gap["jacobian_asymmetry"] = float(np.max(np.abs(jac - jac.T)) / max(1e-300, np.max(np.abs(jac))))
    return gap


def assemble_degenerate_action(complex_: CochainComplex, density: LagrangianDensity,
                               phi0: np.ndarray, dphi: np.ndarray,
                               region: Optional[RegularRegion] = None) -> float:
    """Action of L(x, pi_0 u, pi_1 du) with both arguments supplied as forms."""
    return CovariantAssembler(complex_, density).degenerate_action(phi0, dphi, region)


def nine_point_stencil(dt: float, dx: float, eps: int) -> np.ndarray:
    """
    Closed-form 3x3 linear-wave row, rows indexed by time offset -1, 0, 1.

    (1/dt){-1,2,-1} x dx{1/6,2/3,1/6} + eps dt{1/6,2/3,1/6} x (1/dx){-1,2,-1}
    """
    stiff = np.array([-1.0, 2.0, -1.0])
    mass = np.array([1.0, 4.0, 1.0]) / 6.0
    return np.outer(stiff / dt, dx * mass) + eps * np.outer(dt * mass, stiff / dx)


def stencil_row(complex_: CochainComplex, density: LagrangianDensity, i: int, j: int,
                phi: Optional[np.ndarray] = None) -> np.ndarray:
    """3x3 block of the Jacobian row of interior node (i, j), first component."""
    mesh: TensorMesh2D = complex_.mesh
    if not (0 < i < mesh.M and (mesh.periodic_x or 0 < j < mesh.N)):
        raise InputError(f"node ({i}, {j}) is not interior")
    assembler = CovariantAssembler(complex_, density)
    phi = np.zeros(assembler.size) if phi is None else phi
    row = assembler.jacobian(phi).getrow(int(mesh.node_index(i, j))).toarray().ravel()
    out = np.empty((3, 3))
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            out[di + 1, dj + 1] = row[int(mesh.node_index(i + di, j + dj))]
    return out


# =============================================================================
# NEWTON SOLVER
# =============================================================================

def _solve_linear(matrix: sparse.csr_matrix, rhs: np.ndarray, dense_limit: int,
                  iteration: int, report: SolveReport) -> np.ndarray:
    if matrix.shape[0] <= dense_limit:
        dense = matrix.toarray()
        lu, piv = linalg.lu_factor(dense, check_finite=True)
        diag = np.abs(np.diag(lu))
        ratio = float(diag.min() / diag.max()) if diag.size and diag.max() > 0 else 0.0
        report.pivot_ratio = ratio if report.pivot_ratio is None else min(report.pivot_ratio, ratio)
        if ratio <= 1e-14:
            raise SingularJacobian(iteration, f"(pivot ratio {ratio:.1e})")
        report.linear_solver = "dense-lu"
        return linalg.lu_solve((lu, piv), rhs)

    # indefinite under Lorentzian signature: MINRES, sparse direct as fallback
    solution, info = sparse_linalg.minres(matrix, rhs, rtol=1e-13, maxiter=20 * matrix.shape[0])
    if info == 0 and np.all(np.isfinite(solution)):
        report.linear_solver = "minres"
        return solution
    logger.debug(f"MINRES returned info={info}, falling back to sparse LU")
    try:
        solution = sparse_linalg.spsolve(matrix.tocsc(), rhs)
    except RuntimeError as exc:
        raise SingularJacobian(iteration, str(exc)) from exc
    if not np.all(np.isfinite(solution)):
        raise SingularJacobian(iteration, "(sparse LU produced non-finite values)")
    report.linear_solver = "sparse-lu"
    return solution


def newton_solve(complex_: CochainComplex, density: LagrangianDensity,
                 region: Optional[RegularRegion], dirichlet: DirichletData,
                 initial: Optional[FieldInput] = None, tol: float = 1e-10,
                 max_iter: int = 50, dense_limit: int = 4000, step_floor: float = 1e-4,
                 rule: Optional[QuadratureRule] = None) -> Tuple[Tuple[FormField, ...], SolveReport]:
    """
    Solve the localized DEL r_j = 0 for the dofs of U not fixed by Dirichlet data.

    Damping halves the step until the residual decreases, down to step_floor.

    Returns:
        (solution fields, report)

    Raises:
        NoConvergence: residual above tol after max_iter iterations
        SingularJacobian: interior block not factorizable
    """
    assembler = CovariantAssembler(complex_, density, rule)
    report = SolveReport(tolerance=tol)

    if initial is None:
        phi = np.zeros(assembler.size)
    else:
        phi = as_coefficients(initial, assembler.m, assembler.n).copy()
    phi[dirichlet.dofs] = dirichlet.values

    region_dofs = assembler.region_dofs(region)
    if region is not None:
        sets = boundary_dof_sets(region, assembler.space)
        needed = np.concatenate([a * assembler.n + sets.boundary_dofs for a in range(assembler.m)])
        missing = np.setdiff1d(needed, dirichlet.dofs)
        if missing.size:
            raise InputError(f"{missing.size} boundary dofs of the region have no Dirichlet value")
    unknown = np.setdiff1d(region_dofs, dirichlet.dofs)

    r = assembler.residual(phi, region)[unknown]
    norm = float(np.max(np.abs(r), initial=0.0))
    report.residual_norm = norm
    report.residual_history.append(norm)

    while True:
        if norm <= tol:
            report.mark_converged()
            break
        if report.iterations >= max_iter:
            report.status = SolveStatus.NO_CONVERGENCE
            logger.warning(f"[WARN] Newton stopped at residual {norm:.3e}")
            raise NoConvergence(report)

        H = assembler.jacobian(phi, region)[unknown][:, unknown]
        try:
            delta = _solve_linear(H.tocsr(), -r, dense_limit, report.iterations, report)
        except SingularJacobian as exc:
            report.status = SolveStatus.SINGULAR
            report.last_error = str(exc)
            raise

        alpha = 1.0
        while True:
            trial = phi.copy()
            trial[unknown] += alpha * delta
            r_trial = assembler.residual(trial, region)[unknown]
            norm_trial = float(np.max(np.abs(r_trial), initial=0.0))
            if norm_trial < norm or alpha <= step_floor:
                break
            alpha *= 0.5

        phi, r, norm = trial, r_trial, norm_trial
        report.iterations += 1
        report.step_sizes.append(alpha)
        report.residual_history.append(norm)
        report.residual_norm = norm
        logger.debug(f"Newton {report.iterations}: |r| = {norm:.3e}, step {alpha:g}")

    logger.info(f"[OK] Newton converged in {report.iterations} iterations (|r| = {norm:.2e})")
    return as_fields(phi, complex_, assembler.m), report


# =============================================================================
# MANUFACTURED SOLUTIONS
# =============================================================================

def l2_error(complex_: CochainComplex, coefficients: np.ndarray, exact: Callable,
             n_components: int = 1, points: int = 4) -> float:
    """L2 distance between a degree-0 field and exact(t, x) on the whole mesh."""
    mesh: TensorMesh2D = complex_.mesh
    space = complex_.space(0)
    ref, weights = tensor_gauss(points)
    basis = space.basis_values(ref)[..., 0]
    elements = np.arange(mesh.n_elements)
    c = np.asarray(coefficients, dtype=float).reshape(n_components, space.n_dofs)[:, space.local_dofs(elements)]
    values = np.einsum("mea,qa->eqm", c, basis)
    pts = mesh.element_origin[:, None, :] + ref[None, :, :] * np.array([mesh.dt, mesh.dx])
    target = np.asarray(exact(pts[..., 0].ravel(), pts[..., 1].ravel()), dtype=float)
    target = target.reshape(values.shape)
    sq = np.sum((values - target) ** 2, axis=2) @ weights
    return float(np.sqrt(mesh.element_measure * np.sum(sq)))


def manufactured_problem(eps: int, potential: Sequence[float]):
    """
    Density with forcing s = -(u_tt + eps u_xx) - n'(u) for u = sin(pi t) sin(pi x).

    Returns:
        (density, exact solution callable)
    """
    N, dN, d2N = polynomial_potential(potential)

    def exact(t, x):
        return np.sin(np.pi * t) * np.sin(np.pi * x)

    def source(x):
        u = exact(x[:, 0], x[:, 1])
        return np.pi ** 2 * (1 + eps) * u - dN(u)

    density = builtin_nonlinear_wave_poisson(eps, N, dN, d2N, source=source, name="manufactured")
    return density, exact


def manufactured_study(levels: Sequence[int], eps: int = 1,
                       potential: Sequence[float] = (0.0, 0.0, 0.0, 0.0, -0.25),
                       tol: float = 1e-10, max_iter: int = 50,
                       dense_limit: int = 4000) -> List[Dict[str, float]]:
    """
    L2 errors of the manufactured problem on [0,1]^2 over uniform refinements.

    Returns:
        Rows {"n", "h", "error", "rate", "iterations"}; rate is None on the
        coarsest level
    """
    density, exact = manufactured_problem(eps, potential)
    errors, rows = [], []
    for n in levels:
        mesh = build_tensor_mesh((0.0, 1.0), (0.0, 1.0), n, n)
        complex_ = CochainComplex.build(mesh, density.metric)
        dirichlet = boundary_dirichlet(complex_, 1, lambda t, x: np.zeros_like(t))
        fields, report = newton_solve(complex_, density, None, dirichlet, tol=tol,
                                      max_iter=max_iter, dense_limit=dense_limit)
        err = l2_error(complex_, fields[0].coefficients, exact)
        errors.append(err)
        rows.append({"n": n, "h": 1.0 / n, "error": err, "iterations": report.iterations})
        logger.info(f"[OK] manufactured n={n}: L2 error {err:.3e}")
    for row, rate in zip(rows, convergence_rates(errors)):
        row["rate"] = rate
    return rows

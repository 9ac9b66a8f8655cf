#!/usr/bin/env python3
"""
CochainFEM - Discrete Variational Structures
============================================
Executable diagnostics for solved covariant problems: the discrete Cartan
form and its quadrature cross-check, the Euler-Lagrange one-form, first
variations and the multisymplectic form formula, Noether pairings, current
norms under refinement and equivariance of the nodal projection.

Variation fields are constant vertical vector fields, stored as
component-stacked coefficient vectors split relative to a region.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg, sparse
from scipy.sparse import linalg as sparse_linalg

from cochainfem.covariant import (
    CovariantAssembler, FieldInput, as_coefficients, boundary_dirichlet,
    global_boundary_nodes, newton_solve,
)
from cochainfem.feec import CochainComplex, FormField, MetricSignature, project
from cochainfem.lagrangian import (
    LagrangianDensity, PointwiseAction, SymmetryGenerator, builtin_shift_symmetric_wave,
    shift_generator,
)
from cochainfem.mesh import (
    SIDES, IntervalMesh, RegularRegion, TensorMesh2D, boundary_dof_sets, build_tensor_mesh,
    rectangle_region,
)
from cochainfem.utils import CheckError, InputError, SolverError, convergence_rates, gauss_legendre, tensor_gauss

logger = logging.getLogger(__name__)

Generator = Union[SymmetryGenerator, PointwiseAction]


# =============================================================================
# ERRORS
# =============================================================================

class NotASolution(CheckError):
    """Field does not satisfy the localized DEL to the requested tolerance."""

    def __init__(self, residual: float, tolerance: float):
        super().__init__(f"interior residual {residual:.3e} exceeds {tolerance:.1e}")
        self.residual = residual
        self.tolerance = tolerance


class SingularInteriorBlock(SolverError):
    """Interior block of the region Hessian is not invertible."""


class NotEquivariant(CheckError):
    """Generator flow does not commute with the nodal projection."""

    def __init__(self, name: str, residual: float, tolerance: float):
        super().__init__(f"generator {name!r} is not equivariant (residual {residual:.3e} > {tolerance:.1e})")
        self.name = name
        self.residual = residual
        self.tolerance = tolerance


class MeshNotNested(InputError):
    """Meshes of a refinement study cannot be compared on a common mesh."""


# =============================================================================
# REGION PARTITION
# =============================================================================

class RegionStructure:
    """A covariant assembler plus the stacked boundary/interior dof split of one region."""

    def __init__(self, complex_: CochainComplex, density: LagrangianDensity, region: RegularRegion):
        self.assembler = CovariantAssembler(complex_, density)
        self.complex = complex_
        self.density = density
        self.region = region
        sets = boundary_dof_sets(region, self.assembler.space)
        self.boundary = self._stack(sets.boundary_dofs)
        self.interior = self._stack(sets.interior_dofs)
        self.boundary_elements = sets.boundary_elements

    def _stack(self, nodes: np.ndarray) -> np.ndarray:
        n = self.assembler.n
        return np.concatenate([a * n + nodes for a in range(self.assembler.m)]).astype(int)

    @property
    def size(self) -> int:
        return self.assembler.size

    def residual(self, phi: np.ndarray) -> np.ndarray:
        return self.assembler.residual(phi, self.region)

    def hessian(self, phi: np.ndarray) -> sparse.csr_matrix:
        return self.assembler.jacobian(phi, self.region)

    def variation(self, coefficients) -> "VariationField":
        return VariationField(np.asarray(coefficients, dtype=float), self.boundary, self.interior)


@dataclass
class VariationField:
    """
    Constant vertical variation V = V_bd + V_in on a region.

    Coefficients outside the region's dofs are dropped on construction.
    """
    coefficients: np.ndarray
    boundary_dofs: np.ndarray = field(repr=False)
    interior_dofs: np.ndarray = field(repr=False)

    def __post_init__(self):
        if np.intersect1d(self.boundary_dofs, self.interior_dofs).size:
            raise InputError("boundary and interior dofs overlap")
        coeffs = np.asarray(self.coefficients, dtype=float)
        kept = np.zeros_like(coeffs)
        support = np.concatenate([self.boundary_dofs, self.interior_dofs])
        kept[support] = coeffs[support]
        self.coefficients = kept

    @property
    def boundary_part(self) -> np.ndarray:
        out = np.zeros_like(self.coefficients)
        out[self.boundary_dofs] = self.coefficients[self.boundary_dofs]
        return out

    @property
    def interior_part(self) -> np.ndarray:
        out = np.zeros_like(self.coefficients)
        out[self.interior_dofs] = self.coefficients[self.interior_dofs]
        return out


def _variation(structure: RegionStructure, V) -> VariationField:
    if isinstance(V, VariationField):
        return V
    return structure.variation(V)


def _coefficients(structure: RegionStructure, phi: FieldInput) -> np.ndarray:
    return as_coefficients(phi, structure.assembler.m, structure.assembler.n)


def _require_solution(structure: RegionStructure, r: np.ndarray, tol: float):
    residual = float(np.max(np.abs(r[structure.interior]), initial=0.0))
    if residual > 10.0 * tol:
        raise NotASolution(residual, 10.0 * tol)


# =============================================================================
# CARTAN AND EULER-LAGRANGE ONE-FORMS
# =============================================================================

def cartan_form(complex_: CochainComplex, density: LagrangianDensity, region: RegularRegion,
                phi: FieldInput, V, tol: float = 1e-10, require_solution: bool = True) -> float:
    """
    Theta_U(phi) . V = sum over boundary dofs j of r_j V^j.

    Raises:
        NotASolution: interior residual above 10 * tol (when require_solution)
    """
    structure = RegionStructure(complex_, density, region)
    coeffs = _coefficients(structure, phi)
    r = structure.residual(coeffs)
    if require_solution:
        _require_solution(structure, r, tol)
    V = _variation(structure, V)
    return float(r[structure.boundary] @ V.coefficients[structure.boundary])


def el_one_form(complex_: CochainComplex, density: LagrangianDensity, region: RegularRegion,
                phi: FieldInput, V) -> float:
    """dS_U[phi] . V_in; vanishes for every V exactly at solutions."""
    structure = RegionStructure(complex_, density, region)
    r = structure.residual(_coefficients(structure, phi))
    V = _variation(structure, V)
    return float(r[structure.interior] @ V.coefficients[structure.interior])


def full_pairing(complex_: CochainComplex, density: LagrangianDensity, region: RegularRegion,
                 phi: FieldInput, V) -> float:
    """dS_U[phi] . V over all dofs of the region."""
    structure = RegionStructure(complex_, density, region)
    r = structure.residual(_coefficients(structure, phi))
    return float(r @ _variation(structure, V).coefficients)


class CartanTerms(NamedTuple):
    """Cartan form split into the flux through the region boundary and the boundary-ring term."""
    boundary_flux: float
    ring: float

    @property
    def total(self) -> float:
        return self.boundary_flux + self.ring


def _q1_mixed_derivative(coeffs: np.ndarray, mesh: TensorMesh2D) -> np.ndarray:
    """Constant d_t d_x of Q1 fields per element; coeffs (m, E, 4) in local node order."""
    return (coeffs[..., 0] - coeffs[..., 1] - coeffs[..., 2] + coeffs[..., 3]) / (mesh.dt * mesh.dx)


def _element_fields(assembler: CovariantAssembler, coeffs: np.ndarray, elements: np.ndarray,
                    local: np.ndarray):
    mesh = assembler.mesh
    c = coeffs.reshape(assembler.m, assembler.n)[:, assembler.space.local_dofs(elements)]
    N = assembler.space.basis_values(local)[..., 0]
    G = assembler.space.basis_gradients(local)
    x = mesh.element_origin[elements][:, None, :] + local[None, :, :] * np.array([mesh.dt, mesh.dx])
    phi = np.einsum("mea,qa->eqm", c, N)
    psi = np.einsum("mea,qad->eqmd", c, G)
    return c, x, phi, psi


def _divergence_d3(assembler: CovariantAssembler, coeffs: np.ndarray, elements: np.ndarray,
                   local: np.ndarray, x, phi, psi) -> np.ndarray:
    """
    Elementwise div of d3L along the discrete field, shape (E, Q, m).

    Uses the chain rule through d23 and d33 when second partials exist
    (assumes d3L has no explicit x dependence), central differences otherwise.
    """
    density, mesh, m = assembler.density, assembler.mesh, assembler.m
    E, Q = phi.shape[:2]
    if density.has_second_partials:
        c = coeffs.reshape(m, assembler.n)[:, assembler.space.local_dofs(elements)]
        mixed = _q1_mixed_derivative(c, mesh)                         # (m, E)
        hess = np.zeros((E, Q, m, 2, 2))
        hess[..., 0, 1] = hess[..., 1, 0] = mixed.T[:, None, :]
        flat = (x.reshape(E * Q, 2), phi.reshape(E * Q, m), psi.reshape(E * Q, m, 2))
        d23 = density.d23(*flat).reshape(E, Q, m, m, 2)
        d33 = density.d33(*flat).reshape(E, Q, m, 2, m, 2)
        return (np.einsum("eqbad,eqbd->eqa", d23, psi)
                + np.einsum("eqadbf,eqbdf->eqa", d33, hess))

    step = 1e-4
    div = np.zeros((E, Q, m))
    scale = np.array([mesh.dt, mesh.dx])
    for mu in range(2):
        shift = np.zeros(2)
        shift[mu] = step
        values = []
        for sign in (1.0, -1.0):
            _, xs, fs, gs = _element_fields(assembler, coeffs, elements, local + sign * shift)
            d3 = density.d3(xs.reshape(E * Q, 2), fs.reshape(E * Q, m), gs.reshape(E * Q, m, 2))
            values.append(d3.reshape(E, Q, m, 2)[..., mu])
        div += (values[0] - values[1]) / (2 * step * scale[mu])
    return div


def cartan_form_terms(complex_: CochainComplex, density: LagrangianDensity, region: RegularRegion,
                      phi: FieldInput, V, points: int = 5) -> CartanTerms:
    """
    Cartan form from the density: flux of d3L . n against V_bd through the
    region boundary plus the boundary-ring term, the distributional EL
    (element-interior d2L - div d3L and face jumps of d3L . n) paired with V_bd
    over the elements supporting boundary dofs.
    """
    structure = RegionStructure(complex_, density, region)
    assembler = structure.assembler
    mesh: TensorMesh2D = assembler.mesh
    coeffs = _coefficients(structure, phi)
    V_bd = _variation(structure, V).boundary_part
    elements = structure.boundary_elements
    if elements.size == 0:
        return CartanTerms(0.0, 0.0)
    m = assembler.m

    ref, weights = tensor_gauss(points)
    _, x, f, g = _element_fields(assembler, coeffs, elements, ref)
    E, Q = f.shape[:2]
    d2 = density.d2(x.reshape(E * Q, 2), f.reshape(E * Q, m), g.reshape(E * Q, m, 2)).reshape(E, Q, m)
    el = d2 - _divergence_d3(assembler, coeffs, elements, ref, x, f, g)
    _, _, v_bd, _ = _element_fields(assembler, V_bd, elements, ref)
    ring = mesh.element_measure * float(np.einsum("eqa,eqa,q->", el, v_bd, weights))

    boundary_faces = set(region.boundary_faces)
    samples, face_weights = gauss_legendre(points)
    flux = 0.0
    for side, (axis, end, normal) in SIDES.items():
        local = np.empty((len(samples), 2))
        local[:, axis] = float(end)
        local[:, 1 - axis] = samples
        length = mesh.dx if axis == 0 else mesh.dt
        _, xs, fs, gs = _element_fields(assembler, coeffs, elements, local)
        S = fs.shape[1]
        d3 = density.d3(xs.reshape(E * S, 2), fs.reshape(E * S, m), gs.reshape(E * S, m, 2)).reshape(E, S, m, 2)
        _, _, vs, _ = _element_fields(assembler, V_bd, elements, local)
        normal_flux = np.einsum("esad,d->esa", d3, np.asarray(normal))
        per_face = length * np.einsum("esa,esa,s->e", normal_flux, vs, face_weights)
        on_boundary = np.array([(int(e), side) in boundary_faces for e in elements])
        flux += float(np.sum(per_face[on_boundary]))
        ring += float(np.sum(per_face[~on_boundary]))
    return CartanTerms(flux, ring)


def cartan_form_quadrature(complex_: CochainComplex, density: LagrangianDensity, region: RegularRegion,
                           phi: FieldInput, V, points: int = 5) -> float:
    """Cartan form evaluated from the density formula instead of the residual."""
    return cartan_form_terms(complex_, density, region, phi, V, points).total


# =============================================================================
# FIRST VARIATIONS AND THE MULTISYMPLECTIC FORM FORMULA
# =============================================================================

def first_variation_basis(complex_: CochainComplex, density: LagrangianDensity, region: RegularRegion,
                          phi: FieldInput, check_tol: float = 1e-8) -> List[VariationField]:
    """
    One first variation per boundary dof: unit boundary coefficient, interior
    coefficients solving the linearized interior DEL.

    Raises:
        SingularInteriorBlock: interior Hessian block not factorizable
    """
    structure = RegionStructure(complex_, density, region)
    coeffs = _coefficients(structure, phi)
    H = structure.hessian(coeffs).tocsr()
    B, I = structure.boundary, structure.interior

    basis_matrix = np.zeros((structure.size, len(B)))
    basis_matrix[B, np.arange(len(B))] = 1.0
    if I.size:
        H_II = H[I][:, I].toarray()
        H_IB = H[I][:, B].toarray()
        lu, piv = linalg.lu_factor(H_II)
        diag = np.abs(np.diag(lu))
        if diag.max() == 0.0 or diag.min() / diag.max() <= 1e-14:
            raise SingularInteriorBlock(f"interior block of size {len(I)} is singular")
        basis_matrix[I] = -linalg.lu_solve((lu, piv), H_IB)

    scale = max(1e-300, float(abs(H).max()))
    defect = float(np.max(np.abs((H @ basis_matrix)[I]), initial=0.0))
    if defect > check_tol * scale:
        logger.warning(f"[WARN] first variations solve the interior block only to {defect:.2e}")
    return [structure.variation(basis_matrix[:, k]) for k in range(len(B))]


def multisymplectic_residual(complex_: CochainComplex, density: LagrangianDensity, region: RegularRegion,
                             phi: FieldInput, V, W) -> float:
    """dTheta_U(phi) . (V, W) = sum_{j bd} sum_k H_jk (V^k W^j - W^k V^j)."""
    structure = RegionStructure(complex_, density, region)
    H = structure.hessian(_coefficients(structure, phi))
    v = _variation(structure, V).coefficients
    w = _variation(structure, W).coefficients
    B = structure.boundary
    return float((H @ v)[B] @ w[B] - (H @ w)[B] @ v[B])


def multisymplectic_matrix(complex_: CochainComplex, density: LagrangianDensity, region: RegularRegion,
                           phi: FieldInput, basis: Sequence[VariationField]) -> Tuple[np.ndarray, float]:
    """
    All pairwise dTheta values of a set of variations at once.

    Returns:
        (antisymmetric matrix A with A[p, q] = dTheta(V_p, V_q), |H|_inf)
    """
    structure = RegionStructure(complex_, density, region)
    H = structure.hessian(_coefficients(structure, phi))
    if not basis:
        return np.zeros((0, 0)), float(abs(H).max()) if H.nnz else 0.0
    V = np.column_stack([v.coefficients for v in basis])
    HV = H @ V
    B = structure.boundary
    return HV[B].T @ V[B] - V[B].T @ HV[B], float(abs(H).max())


def multisymplectic_scale(H_norm: float, V, W) -> float:
    """|H| |V| |W| in the max norm, the reference scale of the formula."""
    v = V.coefficients if isinstance(V, VariationField) else np.asarray(V)
    w = W.coefficients if isinstance(W, VariationField) else np.asarray(W)
    return H_norm * float(np.max(np.abs(v))) * float(np.max(np.abs(w)))


# =============================================================================
# EQUIVARIANCE
# =============================================================================

def _domain_bounds(mesh) -> List[Tuple[float, float]]:
    if isinstance(mesh, IntervalMesh):
        return [(mesh.x_min, mesh.x_max)]
    return [(mesh.t_mesh.x_min, mesh.t_mesh.x_max), (mesh.x_mesh.x_min, mesh.x_mesh.x_max)]


def _smooth_sample(rng: np.random.Generator, m: int, dim: int) -> Callable[[np.ndarray], np.ndarray]:
    amplitude = rng.uniform(-1.0, 1.0, size=(m, 3))
    frequency = rng.uniform(0.5, 2.0, size=(m, 3, dim))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(m, 3))

    def sample(coords: np.ndarray) -> np.ndarray:
        arg = np.pi * np.einsum("akd,pd->pak", frequency, coords) + phase
        return np.sum(amplitude * np.sin(arg), axis=2)
    return sample


def _interpolate(complex_: CochainComplex, fn: Callable[[np.ndarray], np.ndarray], m: int) -> List[FormField]:
    return [project(complex_, 0, lambda *c, a=a: fn(np.column_stack(c))[:, a]) for a in range(m)]


def _evaluate_all(fields: Sequence[FormField], points: np.ndarray) -> np.ndarray:
    return np.column_stack([f.evaluate(points)[:, 0] for f in fields])


def equivariance_check(complex_: CochainComplex, generator: Generator, samples: int = 3,
                       rng: Optional[np.random.Generator] = None,
                       s_values: Sequence[float] = (1e-3, 1e-4), n_points: int = 64,
                       n_components: Optional[int] = None) -> float:
    """
    max |pi_h(flow_s u) - flow_s(pi_h u)| / s over smooth sample fields u,
    measured at random points of the domain.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    m = n_components or getattr(generator, "n_components", 1)
    bounds = _domain_bounds(complex_.mesh)
    dim = len(bounds)
    worst = 0.0
    for _ in range(samples):
        u = _smooth_sample(rng, m, dim)
        pts = np.column_stack([rng.uniform(lo, lo + 0.999 * (hi - lo), n_points) for lo, hi in bounds])
        eval_pts = pts[:, 0] if dim == 1 else pts
        base = _evaluate_all(_interpolate(complex_, u, m), eval_pts)
        for s in s_values:
            flowed = _interpolate(complex_, lambda c, s=s: generator.flow(s, u(c)), m)
            lhs = _evaluate_all(flowed, eval_pts)
            rhs = generator.flow(s, base)
            worst = max(worst, float(np.max(np.abs(lhs - rhs))) / s)
    logger.debug(f"equivariance of {generator.name}: {worst:.3e}")
    return worst


# =============================================================================
# NOETHER
# =============================================================================

@dataclass
class NoetherReport:
    """
    Noether diagnostics of one generator on one region.

    interior_term = invariance_term - el_pairing equals cartan_pairing for
    any field; current_flux + boundary_ring_term is the density-formula
    value of the same pairing.
    """
    generator: str
    cartan_pairing: float
    invariance_term: float
    el_pairing: float
    interior_term: float
    current_flux: float
    boundary_ring_term: float
    scale: float
    current_l2_distance: Optional[float] = None
    current_dual_norm: Optional[float] = None

    @property
    def identity_defect(self) -> float:
        return abs(self.cartan_pairing - self.interior_term)

    @property
    def cross_defect(self) -> float:
        return abs(self.cartan_pairing - (self.current_flux + self.boundary_ring_term))

    def conserved(self, tol: float = 1e-8) -> bool:
        return abs(self.cartan_pairing) <= tol * self.scale

    def to_dict(self) -> Dict[str, object]:
        return {
            "generator": self.generator,
            "cartan_pairing": self.cartan_pairing,
            "invariance_term": self.invariance_term,
            "el_pairing": self.el_pairing,
            "interior_term": self.interior_term,
            "current_flux": self.current_flux,
            "boundary_ring_term": self.boundary_ring_term,
            "scale": self.scale,
            "identity_defect": self.identity_defect,
            "cross_defect": self.cross_defect,
            "current_l2_distance": self.current_l2_distance,
            "current_dual_norm": self.current_dual_norm,
        }


def _invariance_integral(assembler: CovariantAssembler, coeffs: np.ndarray, region: RegularRegion,
                         generator: SymmetryGenerator) -> float:
    """Integral over U of d/ds L(j^1 flow_s phi) at s = 0."""
    elements = assembler.elements(region)
    x, f, g = assembler.fields_at(coeffs, elements)
    E, Q, m = f.shape
    flat = (x.reshape(E * Q, 2), f.reshape(E * Q, m), g.reshape(E * Q, m, 2))
    xi = generator.pointwise(flat[1])
    dxi = np.einsum("ab,pbd->pad", generator.matrix, flat[2])
    rate = np.sum(assembler.density.d2(*flat) * xi, axis=1) + np.sum(assembler.density.d3(*flat) * dxi, axis=(1, 2))
    return float(np.sum(rate.reshape(E, Q) @ assembler.rule.weights))


def noether_check(complex_: CochainComplex, density: LagrangianDensity, region: RegularRegion,
                  phi: FieldInput, generator: SymmetryGenerator, tol: float = 1e-10,
                  equivariance_tol: float = 1e-8, require_solution: bool = True,
                  rng: Optional[np.random.Generator] = None) -> NoetherReport:
    """
    Pair the Cartan form with V = xi_Y(phi_h) and decompose the pairing.

    Raises:
        NotEquivariant: generator not claimed equivariant, or its flow fails
            to commute with the nodal projection
        NotASolution: interior residual above 10 * tol (when require_solution)
    """
    if not isinstance(generator, SymmetryGenerator) or not generator.claimed_equivariant:
        raise NotEquivariant(generator.name, float("inf"), equivariance_tol)
    residual = equivariance_check(complex_, generator, rng=rng)
    if residual > equivariance_tol:
        raise NotEquivariant(generator.name, residual, equivariance_tol)

    structure = RegionStructure(complex_, density, region)
    coeffs = _coefficients(structure, phi)
    r = structure.residual(coeffs)
    if require_solution:
        _require_solution(structure, r, tol)

    xi = structure.variation(generator.vector_field(coeffs))
    B, I = structure.boundary, structure.interior
    cartan = float(r[B] @ xi.coefficients[B])
    el = float(r[I] @ xi.coefficients[I])
    invariance = _invariance_integral(structure.assembler, coeffs, region, generator)
    terms = cartan_form_terms(complex_, density, region, coeffs, xi)

    report = NoetherReport(
        generator=generator.name,
        cartan_pairing=cartan,
        invariance_term=invariance,
        el_pairing=el,
        interior_term=invariance - el,
        current_flux=terms.boundary_flux,
        boundary_ring_term=terms.ring,
        scale=1.0 + float(np.sum(np.abs(r[B] * xi.coefficients[B]))),
    )
    tag = "[OK]" if report.conserved() else "[WARN]"
    logger.info(f"{tag} Noether {generator.name}: pairing {cartan:.3e} (scale {report.scale:.2e})")
    return report


class AnalyticReference(NamedTuple):
    """Exact field as callables (t, x) -> (P, m) values and (P, m, 2) gradients."""
    value: Callable
    gradient: Callable


def harmonic_reference(eps: int = 1) -> AnalyticReference:
    """exp(t) cos(x) for the Laplace case, the travelling wave sin(x - t) for the wave case."""
    if eps > 0:
        def value(t, x):
            return (np.exp(t) * np.cos(x))[:, None]

        def gradient(t, x):
            return np.stack([np.exp(t) * np.cos(x), -np.exp(t) * np.sin(x)], axis=1)[:, None, :]
    else:
        def value(t, x):
            return np.sin(x - t)[:, None]

        def gradient(t, x):
            c = np.cos(x - t)
            return np.stack([-c, c], axis=1)[:, None, :]
    return AnalyticReference(value, gradient)


def _refine(mesh: TensorMesh2D, factor: int = 2) -> TensorMesh2D:
    return build_tensor_mesh((mesh.t_mesh.x_min, mesh.t_mesh.x_max), (mesh.x_mesh.x_min, mesh.x_mesh.x_max),
                             factor * mesh.M, factor * mesh.N, mesh.periodic_x)


def _check_nested(coarse: TensorMesh2D, fine: TensorMesh2D):
    same_box = np.allclose(
        [coarse.t_mesh.x_min, coarse.t_mesh.x_max, coarse.x_mesh.x_min, coarse.x_mesh.x_max],
        [fine.t_mesh.x_min, fine.t_mesh.x_max, fine.x_mesh.x_min, fine.x_mesh.x_max],
    )
    if not same_box or fine.M % coarse.M or fine.N % coarse.N:
        raise MeshNotNested(f"{coarse.M}x{coarse.N} mesh does not nest in {fine.M}x{fine.N}")


def _discrete_jet(complex_: CochainComplex, coeffs: np.ndarray, m: int, points: np.ndarray):
    space = complex_.space(0)
    parts = np.asarray(coeffs, dtype=float).reshape(m, space.n_dofs)
    fields = [FormField(space, p) for p in parts]
    values = np.column_stack([f.evaluate(points)[:, 0] for f in fields])
    grads = np.stack([f.gradient(points) for f in fields], axis=1)
    return values, grads


def _current(density: LagrangianDensity, generator: SymmetryGenerator, x, values, grads) -> np.ndarray:
    """J_mu = sum_a xi_a(phi) d3L_{a mu}, shape (P, 2)."""
    return np.einsum("pa,pad->pd", generator.pointwise(values), density.d3(x, values, grads))


def noether_current_norms(density: LagrangianDensity, generator: SymmetryGenerator,
                          solutions: Sequence[Tuple[CochainComplex, np.ndarray]],
                          reference: Union[Tuple[CochainComplex, np.ndarray], AnalyticReference],
                          points: int = 4) -> List[Dict[str, float]]:
    """
    Per-level ||J(phi_h) - J(phi)||_L2 and the dual-norm surrogate of dJ(phi_h).

    Norms are measured on an evaluation mesh one uniform refinement beyond
    the reference mesh (beyond the finest solution mesh for analytic
    references). The dual norm is sqrt(rho^T G^-1 rho) with
    rho_a = -int J . grad alpha_a over interior Q1 hats alpha_a and G their
    H1 Gram matrix.

    Raises:
        MeshNotNested: solution meshes do not nest in the evaluation mesh
    """
    if not solutions:
        return []
    m = density.n_components
    if isinstance(reference, AnalyticReference):
        finest = max((c.mesh for c, _ in solutions), key=lambda mesh: mesh.n_elements)
        eval_mesh = _refine(finest)
    else:
        eval_mesh = _refine(reference[0].mesh)
    for complex_, _ in solutions:
        _check_nested(complex_.mesh, eval_mesh)
    if not isinstance(reference, AnalyticReference):
        _check_nested(reference[0].mesh, eval_mesh)

    eval_complex = CochainComplex.build(eval_mesh, MetricSignature.euclidean(2))
    space = eval_complex.space(0)
    ref, weights = tensor_gauss(points)
    elements = np.arange(eval_mesh.n_elements)
    pts = (eval_mesh.element_origin[:, None, :] + ref[None, :, :] * np.array([eval_mesh.dt, eval_mesh.dx])).reshape(-1, 2)
    w = np.tile(weights, eval_mesh.n_elements) * eval_mesh.element_measure

    if isinstance(reference, AnalyticReference):
        ref_values = np.asarray(reference.value(pts[:, 0], pts[:, 1]), dtype=float).reshape(-1, m)
        ref_grads = np.asarray(reference.gradient(pts[:, 0], pts[:, 1]), dtype=float).reshape(-1, m, 2)
    else:
        ref_values, ref_grads = _discrete_jet(reference[0], reference[1], m, pts)
    J_ref = _current(density, generator, pts, ref_values, ref_grads)

    interior = np.setdiff1d(np.arange(space.n_dofs), global_boundary_nodes(eval_complex))
    gram = (eval_complex.D(0).T @ eval_complex.M(1) @ eval_complex.D(0) + eval_complex.M(0)).tocsr()
    gram = gram[interior][:, interior].tocsc()
    grads = space.basis_gradients(ref)                                   # (Q, 4, 2)
    conn = space.local_dofs(elements)

    rows = []
    for complex_, coeffs in solutions:
        values, grad = _discrete_jet(complex_, coeffs, m, pts)
        J_h = _current(density, generator, pts, values, grad)
        l2 = float(np.sqrt(np.sum(w * np.sum((J_h - J_ref) ** 2, axis=1))))

        flux = (J_h * w[:, None]).reshape(eval_mesh.n_elements, len(weights), 2)
        local = -np.einsum("eqd,qad->ea", flux, grads)
        rho = np.zeros(space.n_dofs)
        np.add.at(rho, conn, local)
        rho = rho[interior]
        dual = float(np.sqrt(max(0.0, rho @ sparse_linalg.spsolve(gram, rho)))) if rho.size else 0.0

        mesh = complex_.mesh
        rows.append({"n": mesh.N, "h": max(mesh.dt, mesh.dx), "l2_distance": l2, "dual_norm": dual})
        logger.info(f"[OK] current norms h={rows[-1]['h']:.4g}: L2 {l2:.3e}, dual {dual:.3e}")

    for key in ("l2_distance", "dual_norm"):
        for row, rate in zip(rows, convergence_rates([r[key] for r in rows])):
            row[f"{key}_rate"] = rate
    return rows


# =============================================================================
# STUDIES
# =============================================================================

def localized_residual_check(complex_: CochainComplex, density: LagrangianDensity, phi: FieldInput,
                             regions: Sequence[RegularRegion]) -> List[Dict[str, float]]:
    """Full-domain residual restricted to the interior dofs of each region, against the localized one."""
    assembler = CovariantAssembler(complex_, density)
    coeffs = as_coefficients(phi, assembler.m, assembler.n)
    r_global = assembler.residual(coeffs)
    rows = []
    for index, region in enumerate(regions):
        structure = RegionStructure(complex_, density, region)
        r_local = structure.residual(coeffs)
        I = structure.interior
        rows.append({
            "region": index,
            "interior_dofs": int(I.size),
            "global_residual": float(np.max(np.abs(r_global[I]), initial=0.0)),
            "local_residual": float(np.max(np.abs(r_local[I]), initial=0.0)),
            "difference": float(np.max(np.abs(r_global[I] - r_local[I]), initial=0.0)),
        })
    return rows


def solve_reference_problem(n: int, eps: int = 1, data: Optional[AnalyticReference] = None,
                            tol: float = 1e-10):
    """Shift-symmetric density solved on an n x n mesh of [0,1]^2 with exact boundary data."""
    data = data or harmonic_reference(eps)
    density = builtin_shift_symmetric_wave(eps)
    mesh = build_tensor_mesh((0.0, 1.0), (0.0, 1.0), n, n)
    complex_ = CochainComplex.build(mesh, density.metric)
    dirichlet = boundary_dirichlet(complex_, 1, lambda t, x: data.value(t, x)[:, 0])
    fields, report = newton_solve(complex_, density, None, dirichlet, tol=tol)
    return density, complex_, fields[0].coefficients, report


def noether_current_study(levels: Sequence[int], eps: int = 1, analytic: bool = True,
                          tol: float = 1e-10) -> List[Dict[str, float]]:
    """Current norms of the shift generator for solutions on n x n meshes, n in levels."""
    data = harmonic_reference(eps)
    solutions = []
    density = None
    for n in levels:
        density, complex_, coeffs, _ = solve_reference_problem(n, eps, data, tol)
        solutions.append((complex_, coeffs))
    if analytic:
        reference = data
    else:
        _, ref_complex, ref_coeffs, _ = solve_reference_problem(2 * max(levels), eps, data, tol)
        reference = (ref_complex, ref_coeffs)
    return noether_current_norms(density, shift_generator(1), solutions, reference)


def cartan_ring_study(levels: Sequence[int], box: Tuple[float, float, float, float] = (0.25, 0.75, 0.25, 0.75),
                      eps: int = 1, weight: Optional[Callable] = None,
                      tol: float = 1e-10) -> List[Dict[str, float]]:
    """
    Ratio |ring term| / |boundary flux| of the Cartan form on a fixed physical
    region under refinement, V_bd taken from nodal values of `weight`.
    """
    weight = weight or (lambda t, x: 1.0 + t)
    rows = []
    for n in levels:
        bounds = np.asarray(box) * n
        if not np.allclose(bounds, np.round(bounds)):
            raise InputError(f"region box {box} is not aligned with an {n}x{n} mesh")
        i0, i1, j0, j1 = (int(round(b)) for b in bounds)
        density, complex_, coeffs, _ = solve_reference_problem(n, eps, tol=tol)
        region = rectangle_region(complex_.mesh, i0, i1, j0, j1)
        nodes = complex_.mesh.node_coords
        V = weight(nodes[:, 0], nodes[:, 1])
        terms = cartan_form_terms(complex_, density, region, coeffs, V)
        ratio = abs(terms.ring) / max(1e-300, abs(terms.boundary_flux))
        rows.append({"n": n, "h": 1.0 / n, "flux": terms.boundary_flux, "ring": terms.ring, "ratio": ratio})
        logger.info(f"[OK] ring study n={n}: ratio {ratio:.3e}")
    for row, rate in zip(rows, convergence_rates([r["ratio"] for r in rows])):
        row["rate"] = rate
    return rows

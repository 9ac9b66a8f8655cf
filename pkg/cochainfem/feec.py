#!/usr/bin/env python3
"""
CochainFEM - Tensor-Product de Rham Complex
===========================================
Lowest-order finite element forms on uniform meshes:

- degree 0: nodal Q1 hats (P1 hats in 1D)
- degree 1: edge functions, constant along their edge and hat-shaped across
- degree 2: per-cell indicators

Dofs are node values, edge integrals (edges oriented toward increasing t / x)
and cell integrals, so the canonical interpolation commutes with d.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Tuple, Union

import numpy as np
from scipy import sparse

from cochainfem.mesh import IntervalMesh, PointOutsideMesh, TensorMesh2D
from cochainfem.utils import CheckError, InputError, gauss_legendre, tensor_gauss

logger = logging.getLogger(__name__)

Mesh = Union[IntervalMesh, TensorMesh2D]

__all__ = [
    "MetricSignature", "FESpace", "FormField", "CochainComplex",
    "assemble_derivative", "assemble_mass", "project", "evaluate",
    "export_triplets", "MissingSpace", "QuadratureInsufficient", "PointOutsideMesh",
]


class MissingSpace(InputError):
    """The requested form degree has no space on this mesh."""


class QuadratureInsufficient(CheckError):
    """Projection failed its commuting-diagram self-check."""

    def __init__(self, degree: int, defect: float):
        super().__init__(f"projection of degree {degree} misses commutation by {defect:.3e}")
        self.degree = degree
        self.defect = defect


# =============================================================================
# METRIC
# =============================================================================

@dataclass(frozen=True)
class MetricSignature:
    """Diagonal metric signature, one +/-1 entry per coordinate (t first)."""
    entries: Tuple[int, ...]

    def __post_init__(self):
        entries = tuple(int(s) for s in self.entries)
        if not entries or any(s not in (1, -1) for s in entries):
            raise InputError(f"signature entries must be +1 or -1, got {self.entries}")
        if any(float(s) != float(r) for s, r in zip(entries, self.entries)):
            raise InputError(f"signature entries must be exactly +1 or -1, got {self.entries}")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def euclidean(cls, dim: int = 2) -> "MetricSignature":
        return cls((1,) * dim)

    @classmethod
    def lorentzian(cls) -> "MetricSignature":
        return cls((1, -1))

    @classmethod
    def from_epsilon(cls, epsilon: int) -> "MetricSignature":
        """Spacetime signature diag(1, epsilon)."""
        return cls((1, int(epsilon)))

    @property
    def dim(self) -> int:
        return len(self.entries)

    @property
    def epsilon(self) -> int:
        """Spatial sign relative to the temporal one."""
        return self.entries[0] * self.entries[-1]

    @property
    def volume_sign(self) -> int:
        return int(np.prod(self.entries))


# =============================================================================
# FINITE ELEMENT SPACES
# =============================================================================

class FESpace:
    """
    Degree-k lowest-order space on an interval or tensor mesh.

    Attributes:
        mesh: Underlying mesh
        degree: Form degree k
        dim: Spatial dimension of the mesh (1 or 2)
        n_dofs: Number of global dofs
        n_local: Dofs per element
        n_components: Number of form components (2 for 1-forms in 2D)
    """

    def __init__(self, mesh: Mesh, degree: int):
        self.mesh = mesh
        self.dim = 1 if isinstance(mesh, IntervalMesh) else 2
        if degree not in range(self.dim + 1):
            raise MissingSpace(f"no degree-{degree} space on a {self.dim}D mesh")
        self.degree = degree

        if self.dim == 1:
            self.n_dofs = mesh.n_nodes if degree == 0 else mesh.N
            self.n_local = 2 if degree == 0 else 1
            self.n_components = 1
        else:
            self.n_t_edges = mesh.M * mesh.n_x_nodes
            self.n_x_edges = mesh.n_t_nodes * mesh.N
            self.n_dofs = (mesh.n_nodes, self.n_t_edges + self.n_x_edges, mesh.n_elements)[degree]
            self.n_local = (4, 4, 1)[degree]
            self.n_components = (1, 2, 1)[degree]

    def __repr__(self) -> str:
        return f"FESpace(degree={self.degree}, dim={self.dim}, n_dofs={self.n_dofs})"

    # -- connectivity --------------------------------------------------------
    def local_dofs(self, elements) -> np.ndarray:
        """(E, n_local) global dof indices of the given elements."""
        elements = np.asarray(elements, dtype=int)
        mesh = self.mesh
        if self.dim == 1:
            if self.degree == 0:
                return mesh.element_node_pairs[elements]
            return elements[:, None]
        if self.degree == 0:
            return mesh.element_nodes[elements]
        if self.degree == 2:
            return elements[:, None]
        i, j = mesh.element_ij(elements)
        jp = (j + 1) % mesh.n_x_nodes
        return np.column_stack([
            i * mesh.n_x_nodes + j,
            i * mesh.n_x_nodes + jp,
            self.n_t_edges + i * mesh.N + j,
            self.n_t_edges + (i + 1) * mesh.N + j,
        ])

    # -- reference basis -----------------------------------------------------
    def basis_values(self, local) -> np.ndarray:
        """(P, n_local, n_components) basis form components at local coordinates."""
        local = np.atleast_2d(np.asarray(local, dtype=float))
        P = local.shape[0]
        mesh = self.mesh
        if self.dim == 1:
            s = local[:, 0]
            if self.degree == 0:
                return np.stack([1.0 - s, s], axis=1)[..., None]
            return np.full((P, 1, 1), 1.0 / mesh.h)

        tau, xi = local[:, 0], local[:, 1]
        if self.degree == 0:
            return np.stack([(1 - tau) * (1 - xi), tau * (1 - xi),
                             (1 - tau) * xi, tau * xi], axis=1)[..., None]
        if self.degree == 2:
            return np.full((P, 1, 1), 1.0 / mesh.element_measure)
        values = np.zeros((P, 4, 2))
        values[:, 0, 0] = (1 - xi) / mesh.dt
        values[:, 1, 0] = xi / mesh.dt
        values[:, 2, 1] = (1 - tau) / mesh.dx
        values[:, 3, 1] = tau / mesh.dx
        return values

    def basis_gradients(self, local) -> np.ndarray:
        """(P, n_local, dim) gradients of degree-0 basis functions."""
        if self.degree != 0:
            raise MissingSpace("gradients are only defined for degree-0 spaces")
        local = np.atleast_2d(np.asarray(local, dtype=float))
        P = local.shape[0]
        mesh = self.mesh
        if self.dim == 1:
            grads = np.empty((P, 2, 1))
            grads[:, 0, 0] = -1.0 / mesh.h
            grads[:, 1, 0] = 1.0 / mesh.h
            return grads
        tau, xi = local[:, 0], local[:, 1]
        grads = np.empty((P, 4, 2))
        grads[:, :, 0] = np.stack([-(1 - xi), (1 - xi), -xi, xi], axis=1) / mesh.dt
        grads[:, :, 1] = np.stack([-(1 - tau), -tau, (1 - tau), tau], axis=1) / mesh.dx
        return grads

    def trace_values(self, elements, side: str, samples) -> np.ndarray:
        """
        Tangential traces of the local basis on one side of each element.

        Returns:
            (F, n_local, S) trace values at face parameters `samples` in (0, 1)
        """
        if self.dim != 2:
            raise MissingSpace("traces are only defined on spacetime meshes")
        samples = np.asarray(samples, dtype=float)
        axis, end = {"t-": (0, 0), "t+": (0, 1), "x-": (1, 0), "x+": (1, 1)}[side]
        local = np.empty((len(samples), 2))
        local[:, axis] = float(end)
        local[:, 1 - axis] = samples
        values = self.basis_values(local)
        if self.degree == 0:
            trace = values[..., 0]
        elif self.degree == 1:
            # t-sides run along x, x-sides run along t
            trace = values[..., 1 if axis == 0 else 0]
        else:
            trace = np.zeros(values.shape[:2])
        trace = trace.T[None, :, :]
        return np.repeat(trace, len(np.atleast_1d(elements)), axis=0)


@dataclass
class FormField:
    """Coefficient vector of a degree-k form in a finite element space."""
    space: FESpace
    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape != (self.space.n_dofs,):
            raise InputError(
                f"expected {self.space.n_dofs} coefficients, got shape {self.coefficients.shape}"
            )

    def evaluate(self, points) -> np.ndarray:
        """(P, n_components) form components at the given points."""
        points = np.asarray(points, dtype=float)
        if self.space.dim == 1:
            elements, local = self.space.mesh.locate(np.atleast_1d(points).ravel())
            local = local[:, None]
        else:
            elements, local = self.space.mesh.locate(points)
        basis = self.space.basis_values(local)
        coeffs = self.coefficients[self.space.local_dofs(elements)]
        return np.einsum("pac,pa->pc", basis, coeffs)

    def gradient(self, points) -> np.ndarray:
        """(P, dim) gradient of a degree-0 field at the given points."""
        points = np.asarray(points, dtype=float)
        if self.space.dim == 1:
            elements, local = self.space.mesh.locate(np.atleast_1d(points).ravel())
            local = local[:, None]
        else:
            elements, local = self.space.mesh.locate(points)
        grads = self.space.basis_gradients(local)
        coeffs = self.coefficients[self.space.local_dofs(elements)]
        return np.einsum("pad,pa->pd", grads, coeffs)


def evaluate(field: FormField, point):
    """
    Form components of a field at a single point.

    Returns a float for scalar-valued forms and a tuple of components for
    spacetime 1-forms.
    """
    values = field.evaluate(np.asarray(point, dtype=float)[None, ...]
                            if field.space.dim == 2 else np.atleast_1d(point))[0]
    if values.shape[0] == 1:
        return float(values[0])
    return tuple(float(v) for v in values)


# =============================================================================
# MATRIX ASSEMBLY
# =============================================================================

def _interval_mass(mesh: IntervalMesh) -> sparse.csr_matrix:
    """P1 mass matrix of an interval mesh, integrated elementwise by Gauss."""
    nodes, weights = gauss_legendre(2)
    shape = np.stack([1.0 - nodes, nodes], axis=1)
    local = mesh.h * np.einsum("q,qa,qb->ab", weights, shape, shape)
    pairs = mesh.element_node_pairs
    rows = np.repeat(pairs, 2, axis=1).ravel()
    cols = np.tile(pairs, (1, 2)).ravel()
    data = np.tile(local.ravel(), mesh.N)
    return sparse.coo_matrix((data, (rows, cols)), shape=(mesh.n_nodes,) * 2).tocsr()


def _interval_incidence(mesh: IntervalMesh) -> sparse.csr_matrix:
    pairs = mesh.element_node_pairs
    rows = np.repeat(np.arange(mesh.N), 2)
    cols = pairs.ravel()
    data = np.tile([-1.0, 1.0], mesh.N)
    return sparse.coo_matrix((data, (rows, cols)), shape=(mesh.N, mesh.n_nodes)).tocsr()


def assemble_derivative(space: FESpace) -> sparse.csr_matrix:
    """
    Signed incidence matrix D_k mapping degree-k dofs to degree-(k+1) dofs.

    Raises:
        MissingSpace: if k is the top degree
    """
    mesh = space.mesh
    if space.degree >= space.dim:
        raise MissingSpace(f"no degree-{space.degree + 1} space on a {space.dim}D mesh")

    if space.dim == 1:
        return _interval_incidence(mesh)

    if space.degree == 0:
        d_t = _interval_incidence(mesh.t_mesh)
        d_x = _interval_incidence(mesh.x_mesh)
        eye_t = sparse.identity(mesh.n_t_nodes, format="csr")
        eye_x = sparse.identity(mesh.n_x_nodes, format="csr")
        d0 = sparse.vstack([sparse.kron(d_t, eye_x, format="csr"),
                            sparse.kron(eye_t, d_x, format="csr")], format="csr")
        d0.eliminate_zeros()
        return d0

    # cell (i,j): x-edge(i+1,j) - x-edge(i,j) - t-edge(i,j+1) + t-edge(i,j)
    cells = np.arange(mesh.n_elements)
    local = space.local_dofs(cells)
    rows = np.repeat(cells, 4)
    cols = local.ravel()
    data = np.tile([1.0, -1.0, -1.0, 1.0], mesh.n_elements)
    d1 = sparse.coo_matrix((data, (rows, cols)), shape=(mesh.n_elements, space.n_dofs)).tocsr()
    d1.eliminate_zeros()
    return d1


def assemble_mass(space: FESpace, metric: Optional[MetricSignature] = None) -> sparse.csr_matrix:
    """
    Mass matrix of the signature-weighted pairing of degree-k forms.

    1-form blocks carry g^{mu mu} = s_mu, 2-forms carry s_t * s_x, so the
    Lorentzian 1-form mass is indefinite.
    """
    mesh = space.mesh
    metric = metric or MetricSignature.euclidean(space.dim)
    if metric.dim != space.dim:
        raise InputError(f"signature of dimension {metric.dim} on a {space.dim}D mesh")

    if space.dim == 1:
        if space.degree == 0:
            return _interval_mass(mesh)
        return (metric.entries[0] / mesh.h) * sparse.identity(mesh.N, format="csr")

    s_t, s_x = metric.entries
    if space.degree == 0:
        return sparse.kron(_interval_mass(mesh.t_mesh), _interval_mass(mesh.x_mesh)).tocsr()
    if space.degree == 2:
        return (s_t * s_x / mesh.element_measure) * sparse.identity(mesh.n_elements, format="csr")

    t_block = s_t * sparse.kron(sparse.identity(mesh.M) / mesh.dt, _interval_mass(mesh.x_mesh))
    x_block = s_x * sparse.kron(_interval_mass(mesh.t_mesh), sparse.identity(mesh.N) / mesh.dx)
    return sparse.block_diag([t_block, x_block], format="csr")


# =============================================================================
# COCHAIN COMPLEX
# =============================================================================

@dataclass
class CochainComplex:
    """Spaces, derivative and mass matrices of the complex on one mesh."""
    mesh: Mesh
    metric: MetricSignature
    spaces: Tuple[FESpace, ...] = field(repr=False)
    derivatives: Tuple[sparse.csr_matrix, ...] = field(repr=False)
    masses: Tuple[sparse.csr_matrix, ...] = field(repr=False)
    quadrature_points: int = 5

    @classmethod
    def build(cls, mesh: Mesh, metric: Optional[MetricSignature] = None,
              quadrature_points: int = 5) -> "CochainComplex":
        dim = 1 if isinstance(mesh, IntervalMesh) else 2
        metric = metric or MetricSignature.euclidean(dim)
        if quadrature_points < 3:
            raise InputError("projection quadrature must be exact to degree 5 (>= 3 points)")
        spaces = tuple(FESpace(mesh, k) for k in range(dim + 1))
        derivatives = tuple(assemble_derivative(spaces[k]) for k in range(dim))
        masses = tuple(assemble_mass(space, metric) for space in spaces)
        logger.debug(f"Built complex on {dim}D mesh with dofs {[s.n_dofs for s in spaces]}")
        return cls(mesh, metric, spaces, derivatives, masses, quadrature_points)

    @property
    def top_degree(self) -> int:
        return len(self.spaces) - 1

    def space(self, k: int) -> FESpace:
        if not 0 <= k <= self.top_degree:
            raise MissingSpace(f"complex has no degree-{k} space")
        return self.spaces[k]

    def D(self, k: int) -> sparse.csr_matrix:
        if not 0 <= k < self.top_degree:
            raise MissingSpace(f"complex has no derivative out of degree {k}")
        return self.derivatives[k]

    def M(self, k: int) -> sparse.csr_matrix:
        return self.masses[self.space(k).degree]

    def field(self, k: int, coefficients) -> FormField:
        return FormField(self.space(k), coefficients)


def _as_components(values, count: int, size: int):
    if count == 1:
        values = (values,)
    return [np.broadcast_to(np.asarray(v, dtype=float), (size,)) for v in values]


def _dof_functionals(complex_: CochainComplex, k: int, fn: Callable) -> np.ndarray:
    """Apply the degree-k dof functionals to a callable form."""
    mesh = complex_.mesh
    nodes, weights = gauss_legendre(complex_.quadrature_points)

    if isinstance(mesh, IntervalMesh):
        if k == 0:
            return np.asarray(fn(mesh.node_coords), dtype=float) * np.ones(mesh.n_nodes)
        left = mesh.x_min + mesh.h * np.arange(mesh.N)
        pts = left[:, None] + mesh.h * nodes[None, :]
        (vals,) = _as_components(fn(pts.ravel()), 1, pts.size)
        vals = vals.reshape(pts.shape)
        return mesh.h * vals @ weights

    t_nodes, x_nodes = mesh.t_mesh.node_coords, mesh.x_mesh.node_coords
    if k == 0:
        pts = mesh.node_coords
        return np.asarray(fn(pts[:, 0], pts[:, 1]), dtype=float) * np.ones(mesh.n_nodes)

    if k == 1:
        # t-edges: integrate the dt component along [t_i, t_{i+1}] at x_j
        tt = t_nodes[:-1, None, None] + mesh.dt * nodes[None, None, :]
        xx = np.broadcast_to(x_nodes[None, :, None], (mesh.M, mesh.n_x_nodes, len(nodes)))
        tt = np.broadcast_to(tt, xx.shape)
        a, _ = _as_components(fn(tt.ravel(), xx.ravel()), 2, tt.size)
        t_dofs = mesh.dt * (a.reshape(xx.shape) @ weights)

        # x-edges: integrate the dx component along [x_j, x_{j+1}] at t_i
        x_left = mesh.x_mesh.x_min + mesh.dx * np.arange(mesh.N)
        xx = x_left[None, :, None] + mesh.dx * nodes[None, None, :]
        tt = np.broadcast_to(t_nodes[:, None, None], (mesh.n_t_nodes, mesh.N, len(nodes)))
        xx = np.broadcast_to(xx, tt.shape)
        _, b = _as_components(fn(tt.ravel(), xx.ravel()), 2, tt.size)
        x_dofs = mesh.dx * (b.reshape(tt.shape) @ weights)
        return np.concatenate([t_dofs.ravel(), x_dofs.ravel()])

    ref, w2 = tensor_gauss(complex_.quadrature_points)
    origin = mesh.element_origin
    pts = origin[:, None, :] + ref[None, :, :] * np.array([mesh.dt, mesh.dx])
    (vals,) = _as_components(fn(pts[..., 0].ravel(), pts[..., 1].ravel()), 1, pts[..., 0].size)
    return mesh.element_measure * vals.reshape(pts.shape[:2]) @ w2


def project(complex_: CochainComplex, k: int, field: Callable,
            derivative: Optional[Callable] = None, polynomial: bool = True,
            tol: float = 1e-10) -> FormField:
    """
    Canonical dof interpolation pi_h of a smooth form.

    Args:
        complex_: Target complex
        k: Form degree
        field: Callable of the coordinates (t, x) (or x in 1D) returning the
            form components (a tuple (dt, dx) for spacetime 1-forms)
        derivative: Optional callable for d(field), enables the commutation
            self-check D_k pi_k u = pi_{k+1} du
        polynomial: Whether the input is polynomial within the exact degree
        tol: Self-check tolerance relative to max(1, |pi_{k+1} du|)

    Raises:
        QuadratureInsufficient: non-polynomial input failing the self-check
    """
    space = complex_.space(k)
    coefficients = _dof_functionals(complex_, k, field)
    result = FormField(space, coefficients)

    if derivative is not None and k < complex_.top_degree:
        expected = _dof_functionals(complex_, k + 1, derivative)
        defect = float(np.max(np.abs(complex_.D(k) @ coefficients - expected), initial=0.0))
        scale = max(1.0, float(np.max(np.abs(expected), initial=0.0)))
        if defect > tol * scale:
            if not polynomial:
                raise QuadratureInsufficient(k, defect)
            logger.warning(f"[WARN] degree-{k} projection commutes only to {defect:.3e}")
    return result


def export_triplets(matrix, path) -> Path:
    """Write a sparse matrix as 'row col value' lines for debugging."""
    coo = sparse.coo_matrix(matrix)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = np.column_stack([coo.row, coo.col, coo.data])
    np.savetxt(path, table, fmt=["%d", "%d", "%.17g"], header=f"{coo.shape[0]} {coo.shape[1]}")
    return path

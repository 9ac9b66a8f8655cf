#!/usr/bin/env python3
"""
CochainFEM - Meshes and Regular Regions
=======================================
Uniform interval meshes (Cauchy slices), tensor-product spacetime meshes,
regular-region validation and boundary dof classification.

Conventions:
- spacetime coordinates are ordered (t, x)
- element (i, j) has flat index i*N + j, node (i, j) has flat index i*n_x + j
- local node order of an element is (i,j), (i+1,j), (i,j+1), (i+1,j+1)
- periodicity is allowed in x only
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, FrozenSet, Iterable, List, NamedTuple, Tuple, Union

import numpy as np

from cochainfem.utils import InputError, gauss_legendre

logger = logging.getLogger(__name__)

# Element sides: name -> (axis, end, outward normal)
SIDES: Dict[str, Tuple[int, int, Tuple[float, float]]] = {
    "t-": (0, 0, (-1.0, 0.0)),
    "t+": (0, 1, (1.0, 0.0)),
    "x-": (1, 0, (0.0, -1.0)),
    "x+": (1, 1, (0.0, 1.0)),
}


class DegenerateRange(InputError):
    """A coordinate range has zero or negative length."""


class NotRegular(InputError):
    """Element set differs from the closure of its interior nodes."""

    def __init__(self, witness: int, message: str):
        super().__init__(message)
        self.witness = witness


class SpaceMismatch(InputError):
    """Finite element space lives on a different mesh than the region."""


class PointOutsideMesh(InputError):
    """Evaluation point lies outside the meshed domain."""


# =============================================================================
# INTERVAL MESH
# =============================================================================

@dataclass(frozen=True)
class IntervalMesh:
    """Uniform mesh of [x_min, x_max] with N elements, optionally periodic."""
    x_min: float
    x_max: float
    N: int
    periodic: bool = False
    h: float = field(init=False, compare=False)
    node_coords: np.ndarray = field(init=False, compare=False, repr=False)
    element_node_pairs: np.ndarray = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise InputError(f"element count must be a positive integer, got {self.N}")
        if self.periodic and self.N < 2:
            raise InputError("a periodic mesh needs at least two elements")
        if not np.isfinite(self.x_min) or not np.isfinite(self.x_max):
            raise DegenerateRange(f"non-finite range [{self.x_min}, {self.x_max}]")
        if self.x_max - self.x_min <= 0.0:
            raise DegenerateRange(f"range [{self.x_min}, {self.x_max}] has no positive length")

        h = (self.x_max - self.x_min) / self.N
        n_nodes = self.N if self.periodic else self.N + 1
        coords = self.x_min + h * np.arange(n_nodes, dtype=float)
        left = np.arange(self.N)
        pairs = np.column_stack([left, (left + 1) % n_nodes])

        coords.setflags(write=False)
        pairs.setflags(write=False)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "node_coords", coords)
        object.__setattr__(self, "element_node_pairs", pairs)

    @property
    def n_nodes(self) -> int:
        return len(self.node_coords)

    @property
    def length(self) -> float:
        return self.x_max - self.x_min

    def locate(self, x, tol: float = 1e-12) -> Tuple[np.ndarray, np.ndarray]:
        """
        Owning element and local coordinate s in [0, 1] of each point.

        A point on an element boundary belongs to the element on its right
        (closed left end), except the right end of the mesh which belongs to
        the last element.
        """
        x = np.asarray(x, dtype=float)
        slack = tol * max(1.0, self.length)
        if np.any(x < self.x_min - slack) or np.any(x > self.x_max + slack):
            raise PointOutsideMesh(f"point outside [{self.x_min}, {self.x_max}]")
        scaled = (x - self.x_min) / self.h
        element = np.clip(np.floor(scaled + tol).astype(int), 0, self.N - 1)
        local = np.clip(scaled - element, 0.0, 1.0)
        return element, local


# =============================================================================
# TENSOR-PRODUCT SPACETIME MESH
# =============================================================================

@dataclass(frozen=True)
class TensorMesh2D:
    """Tensor product of a temporal and a spatial interval mesh."""
    t_mesh: IntervalMesh
    x_mesh: IntervalMesh

    def __post_init__(self):
        if self.t_mesh.periodic:
            raise InputError("the temporal mesh cannot be periodic")

    # -- sizes ---------------------------------------------------------------
    @property
    def M(self) -> int:
        return self.t_mesh.N

    @property
    def N(self) -> int:
        return self.x_mesh.N

    @property
    def dt(self) -> float:
        return self.t_mesh.h

    @property
    def dx(self) -> float:
        return self.x_mesh.h

    @property
    def periodic_x(self) -> bool:
        return self.x_mesh.periodic

    @property
    def n_t_nodes(self) -> int:
        return self.t_mesh.n_nodes

    @property
    def n_x_nodes(self) -> int:
        return self.x_mesh.n_nodes

    @property
    def n_elements(self) -> int:
        return self.M * self.N

    @property
    def n_nodes(self) -> int:
        return self.n_t_nodes * self.n_x_nodes

    @property
    def element_measure(self) -> float:
        return self.dt * self.dx

    # -- indexing ------------------------------------------------------------
    def element_index(self, i: int, j: int) -> int:
        if not (0 <= i < self.M and 0 <= j < self.N):
            raise InputError(f"element ({i}, {j}) not in a {self.M}x{self.N} mesh")
        return i * self.N + j

    def element_ij(self, element) -> Tuple[np.ndarray, np.ndarray]:
        element = np.asarray(element)
        return element // self.N, element % self.N

    def node_index(self, i, j):
        return np.asarray(i) * self.n_x_nodes + np.asarray(j) % self.n_x_nodes

    @cached_property
    def element_nodes(self) -> np.ndarray:
        """(E, 4) node indices in local order (i,j), (i+1,j), (i,j+1), (i+1,j+1)."""
        i, j = self.element_ij(np.arange(self.n_elements))
        jp = (j + 1) % self.n_x_nodes
        nodes = np.column_stack([
            self.node_index(i, j), self.node_index(i + 1, j),
            self.node_index(i, jp), self.node_index(i + 1, jp),
        ])
        nodes.setflags(write=False)
        return nodes

    @cached_property
    def element_origin(self) -> np.ndarray:
        """(E, 2) lower-left corner (t, x) of every element."""
        i, j = self.element_ij(np.arange(self.n_elements))
        origin = np.column_stack([
            self.t_mesh.x_min + i * self.dt,
            self.x_mesh.x_min + j * self.dx,
        ])
        origin.setflags(write=False)
        return origin

    @cached_property
    def node_coords(self) -> np.ndarray:
        """(n_nodes, 2) coordinates (t, x) in flat node order."""
        tt, xx = np.meshgrid(self.t_mesh.node_coords, self.x_mesh.node_coords, indexing="ij")
        coords = np.column_stack([tt.ravel(), xx.ravel()])
        coords.setflags(write=False)
        return coords

    @cached_property
    def node_elements(self) -> Tuple[FrozenSet[int], ...]:
        """Elements touching each node."""
        touching: List[set] = [set() for _ in range(self.n_nodes)]
        for element, nodes in enumerate(self.element_nodes):
            for node in nodes:
                touching[node].add(element)
        return tuple(frozenset(s) for s in touching)

    def neighbor(self, element: int, side: str):
        """Element across the given side, or None on the global boundary."""
        i, j = divmod(int(element), self.N)
        if side == "t-":
            return (i - 1) * self.N + j if i > 0 else None
        if side == "t+":
            return (i + 1) * self.N + j if i < self.M - 1 else None
        if side == "x-":
            if j > 0:
                return element - 1
            return i * self.N + self.N - 1 if self.periodic_x and self.N > 1 else None
        if side == "x+":
            if j < self.N - 1:
                return element + 1
            return i * self.N if self.periodic_x and self.N > 1 else None
        raise InputError(f"unknown element side {side!r}")

    def locate(self, points) -> Tuple[np.ndarray, np.ndarray]:
        """Owning element (closed lower-left tie-break) and local (tau, xi) of points."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        ei, s = self.t_mesh.locate(points[:, 0])
        ej, r = self.x_mesh.locate(points[:, 1])
        return ei * self.N + ej, np.column_stack([s, r])


def build_tensor_mesh(t_range, x_range, M: int, N: int, periodic_x: bool = False) -> TensorMesh2D:
    """
    Build a uniform spacetime mesh.

    Args:
        t_range: (t0, t1)
        x_range: (x0, x1)
        M: Temporal element count
        N: Spatial element count
        periodic_x: Identify x0 with x1

    Raises:
        DegenerateRange: if a range has zero or negative length
    """
    t0, t1 = (float(v) for v in t_range)
    x0, x1 = (float(v) for v in x_range)
    mesh = TensorMesh2D(IntervalMesh(t0, t1, M), IntervalMesh(x0, x1, N, periodic_x))
    logger.debug(f"Built {M}x{N} mesh, dt={mesh.dt:.4g}, dx={mesh.dx:.4g}, periodic_x={periodic_x}")
    return mesh


# =============================================================================
# REGULAR REGIONS
# =============================================================================

@dataclass(frozen=True)
class RegularRegion:
    """Element set U with U equal to the closure of its interior nodes."""
    mesh: TensorMesh2D
    element_set: FrozenSet[int]
    interior_nodes: FrozenSet[int]
    boundary_closure: FrozenSet[int]
    boundary_faces: Tuple[Tuple[int, str], ...] = field(compare=False, repr=False)

    @property
    def elements(self) -> np.ndarray:
        return np.array(sorted(self.element_set), dtype=int)

    @property
    def n_elements(self) -> int:
        return len(self.element_set)


ElementSpec = Union[int, Tuple[int, int]]


def _normalise_elements(mesh: TensorMesh2D, element_set: Iterable[ElementSpec]) -> FrozenSet[int]:
    flat = set()
    for item in element_set:
        if isinstance(item, (tuple, list)):
            flat.add(mesh.element_index(int(item[0]), int(item[1])))
        else:
            e = int(item)
            if not 0 <= e < mesh.n_elements:
                raise InputError(f"element {e} not in mesh with {mesh.n_elements} elements")
            flat.add(e)
    if not flat:
        raise InputError("region needs at least one element")
    return frozenset(flat)


def classify_region(mesh: TensorMesh2D, element_set: Iterable[ElementSpec]) -> RegularRegion:
    """
    Validate regularity of an element set.

    A node is interior when every element touching it lies in U; the region
    is regular when U equals the union of elements touching interior nodes.

    Raises:
        NotRegular: carrying a witness element from the symmetric difference
    """
    elements = _normalise_elements(mesh, element_set)

    candidate_nodes = {int(n) for e in elements for n in mesh.element_nodes[e]}
    interior = frozenset(n for n in candidate_nodes if mesh.node_elements[n] <= elements)
    closure = frozenset(e for n in interior for e in mesh.node_elements[n])

    if closure != elements:
        witness = min(elements ^ closure)
        raise NotRegular(
            witness,
            f"region is not regular: element {witness} breaks U = closure "
            f"({len(elements)} elements, {len(interior)} interior nodes)",
        )

    faces = tuple(
        (e, side)
        for e in sorted(elements)
        for side in SIDES
        if mesh.neighbor(e, side) not in elements
    )
    return RegularRegion(mesh, elements, interior, closure, faces)


def rectangle_region(mesh: TensorMesh2D, i0: int, i1: int, j0: int, j1: int) -> RegularRegion:
    """Region of elements (i, j) with i0 <= i < i1 and j0 <= j < j1."""
    if not (0 <= i0 < i1 <= mesh.M and 0 <= j0 < j1 <= mesh.N):
        raise InputError(f"rectangle [{i0},{i1})x[{j0},{j1}) outside {mesh.M}x{mesh.N} mesh")
    return classify_region(mesh, [(i, j) for i in range(i0, i1) for j in range(j0, j1)])


def full_region(mesh: TensorMesh2D) -> RegularRegion:
    """The whole domain U = X."""
    return classify_region(mesh, range(mesh.n_elements))


class BoundaryDofSets(NamedTuple):
    boundary_dofs: np.ndarray
    interior_dofs: np.ndarray
    boundary_elements: np.ndarray


def boundary_dof_sets(region: RegularRegion, space, tol: float = 1e-12) -> BoundaryDofSets:
    """
    Split the dofs of a space restricted to U into boundary-trace and interior.

    A dof is a boundary dof when the tangential trace of its basis function
    is nonzero at a sample point of some face of the topological boundary of
    U. The boundary elements are the elements of U in the support of a
    boundary dof.

    Raises:
        SpaceMismatch: if the space is built on another mesh
    """
    if space.mesh != region.mesh:
        raise SpaceMismatch("space and region are defined on different meshes")

    elements = region.elements
    local = space.local_dofs(elements)
    region_dofs = np.unique(local)

    samples, _ = gauss_legendre(3)
    boundary = set()
    for side in SIDES:
        faces = np.array([e for e, s in region.boundary_faces if s == side], dtype=int)
        if faces.size == 0:
            continue
        traces = space.trace_values(faces, side, samples)
        hit = np.abs(traces).max(axis=2) > tol
        boundary.update(int(d) for d in space.local_dofs(faces)[hit])

    boundary_dofs = np.array(sorted(boundary), dtype=int)
    interior_dofs = np.setdiff1d(region_dofs, boundary_dofs)
    touches = np.isin(local, boundary_dofs).any(axis=1) if local.size else np.zeros(0, bool)
    return BoundaryDofSets(boundary_dofs, interior_dofs, elements[touches])

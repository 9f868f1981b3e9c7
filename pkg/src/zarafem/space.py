"""Continuous Lagrange spaces of degree 1, 2 and 3 with homogeneous Dirichlet data.

DOFs are numbered vertices first (mesh order), then edge nodes (edge order, ``p-1``
per edge, running from the lower to the higher global vertex index), then interior
nodes (triangle order, ``p=3`` only). Local DOFs follow the same pattern: the three
vertices, the edge nodes of local edges 0, 1, 2, then the interior node.
"""
import logging
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Callable, List, Tuple, Union

import numpy as np
from scipy import sparse

from .exceptions import (
    InvalidMeshError,
    NonNestedSpaceError,
    PointLocationError,
    UnsupportedDegreeError,
)
from .mesh import LOCAL_EDGES, ROOT, Mesh
from .quadrature import QuadratureRule

logger = logging.getLogger(__name__)

SUPPORTED_DEGREES = (1, 2, 3)

REFERENCE_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])

# prolongation entries below this magnitude are roundoff
_DROP_TOLERANCE = 1e-13


class ReferenceElement:
    """Nodal Lagrange basis of degree ``p`` on the reference triangle.

    The basis is obtained by inverting the Vandermonde matrix of the monomials
    ``x^a y^b`` (``a + b <= p``) at the Lagrange nodes, so values, gradients and
    Hessians are all exact polynomial evaluations.
    """

    def __init__(self, degree: int):
        if degree not in SUPPORTED_DEGREES:
            raise UnsupportedDegreeError(
                f"Polynomial degree {degree} not supported (expected one of {SUPPORTED_DEGREES})"
            )
        self.degree = degree
        self.exponents = np.array(
            [(a, total - a) for total in range(degree + 1) for a in range(total, -1, -1)]
        )
        self.nodes = self._lagrange_nodes()
        vandermonde = self._monomials(self.nodes, 0, 0)
        self.coefficients = np.linalg.inv(vandermonde)

    @property
    def n_basis(self) -> int:
        return len(self.nodes)

    def _lagrange_nodes(self) -> np.ndarray:
        p = self.degree
        nodes: List[np.ndarray] = list(REFERENCE_VERTICES)
        for a, b in LOCAL_EDGES:
            start, end = REFERENCE_VERTICES[a], REFERENCE_VERTICES[b]
            for s in range(1, p):
                nodes.append(start + s / p * (end - start))
        if p == 3:
            nodes.append(np.array([1.0 / 3.0, 1.0 / 3.0]))
        return np.array(nodes)

    def _monomials(self, points: np.ndarray, dx: int, dy: int) -> np.ndarray:
        """Derivative ``d^dx/dx d^dy/dy`` of every monomial at ``points``, ``(P, n)``."""
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        a = self.exponents[:, 0]
        b = self.exponents[:, 1]
        factor = np.ones(len(a))
        for j in range(dx):
            factor = factor * (a - j)
        for j in range(dy):
            factor = factor * (b - j)
        pa = np.clip(a - dx, 0, None)
        pb = np.clip(b - dy, 0, None)
        return factor * points[:, :1] ** pa * points[:, 1:] ** pb

    def values(self, points: np.ndarray) -> np.ndarray:
        """Basis values at reference points, ``(P, n_basis)``."""
        return self._monomials(points, 0, 0) @ self.coefficients

    def gradients(self, points: np.ndarray) -> np.ndarray:
        """Reference gradients, ``(P, n_basis, 2)``."""
        return np.stack(
            (
                self._monomials(points, 1, 0) @ self.coefficients,
                self._monomials(points, 0, 1) @ self.coefficients,
            ),
            axis=-1,
        )

    def hessians(self, points: np.ndarray) -> np.ndarray:
        """Reference Hessians, ``(P, n_basis, 2, 2)``."""
        xx = self._monomials(points, 2, 0) @ self.coefficients
        xy = self._monomials(points, 1, 1) @ self.coefficients
        yy = self._monomials(points, 0, 2) @ self.coefficients
        return np.stack((np.stack((xx, xy), axis=-1), np.stack((xy, yy), axis=-1)), axis=-2)


@lru_cache(maxsize=None)
def reference_element(degree: int) -> ReferenceElement:
    return ReferenceElement(degree)


@dataclass(frozen=True, eq=False)
class FeSpace:
    """Lagrange space ``S^p_0`` on a mesh.

    Attributes:
        mesh: underlying triangulation.
        degree: polynomial degree ``p``.
        dof_coords: ``(n_dofs, 2)`` Lagrange node coordinates.
        element_dofs: ``(M, n_basis)`` global DOF index of each local DOF.
        dirichlet_mask: ``(n_dofs,)`` True for DOFs on the boundary.
    """
    mesh: Mesh
    degree: int
    dof_coords: np.ndarray
    element_dofs: np.ndarray
    dirichlet_mask: np.ndarray

    @property
    def n_dofs(self) -> int:
        return len(self.dof_coords)

    @cached_property
    def free_dofs(self) -> np.ndarray:
        """Indices of DOFs interior to the domain."""
        return np.flatnonzero(~self.dirichlet_mask)

    @property
    def n_free(self) -> int:
        return len(self.free_dofs)

    @property
    def reference(self) -> ReferenceElement:
        return reference_element(self.degree)

    @cached_property
    def jacobians(self) -> np.ndarray:
        """``(M, 2, 2)`` Jacobians of the affine element maps, columns ``x1-x0, x2-x0``."""
        corners = self.mesh.vertices[self.mesh.triangles]
        return np.stack((corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0]), axis=-1)

    @cached_property
    def inverse_jacobians(self) -> np.ndarray:
        return np.linalg.inv(self.jacobians)

    def physical_points(self, rule: QuadratureRule) -> np.ndarray:
        """Quadrature points mapped to every element, ``(M, Q, 2)``."""
        corners = self.mesh.vertices[self.mesh.triangles]
        return np.einsum("qa,mai->mqi", rule.points, corners)

    def reference_coordinates(self, triangles: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Pull ``points[j]`` back to the reference element of ``triangles[j]``."""
        origin = self.mesh.vertices[self.mesh.triangles[triangles, 0]]
        return np.einsum("pij,pj->pi", self.inverse_jacobians[triangles], points - origin)

    def local_coefficients(self, coefficients: np.ndarray) -> np.ndarray:
        """Gather a coefficient vector per element, ``(M, n_basis)``."""
        return np.asarray(coefficients)[self.element_dofs]


def build_space(mesh: Mesh, degree: int) -> FeSpace:
    """Build the Lagrange space of degree ``degree`` on ``mesh``.

    Raises:
        UnsupportedDegreeError: If ``degree`` is not 1, 2 or 3.
    """
    if degree not in SUPPORTED_DEGREES:
        raise UnsupportedDegreeError(
            f"Polynomial degree {degree} not supported (expected one of {SUPPORTED_DEGREES})"
        )

    n_vert = mesh.n_vertices
    columns = [mesh.triangles]
    coords = [mesh.vertices]
    masks = [mesh.boundary_vertex_mask]

    per_edge = degree - 1
    if per_edge:
        edges = mesh.edges
        boundary_edge = np.zeros(mesh.n_edges, dtype=bool)
        boundary_edge[mesh.boundary_edges] = True
        lo = mesh.vertices[edges[:, 0]]
        hi = mesh.vertices[edges[:, 1]]
        steps = np.arange(1, degree) / degree
        nodes = lo[:, None, :] + steps[None, :, None] * (hi - lo)[:, None, :]
        coords.append(nodes.reshape(-1, 2))
        masks.append(np.repeat(boundary_edge, per_edge))

        for j, (a, b) in enumerate(LOCAL_EDGES):
            forward = mesh.triangles[:, a] < mesh.triangles[:, b]
            base = n_vert + mesh.tri_edges[:, j] * per_edge
            for s in range(per_edge):
                columns.append((base + np.where(forward, s, per_edge - 1 - s))[:, None])

    if degree == 3:
        first = n_vert + mesh.n_edges * per_edge
        columns.append((first + np.arange(mesh.n_triangles))[:, None])
        coords.append(mesh.centroids)
        masks.append(np.zeros(mesh.n_triangles, dtype=bool))

    element_dofs = np.hstack(columns).astype(np.int64)
    dof_coords = np.vstack(coords)
    dirichlet_mask = np.concatenate(masks)
    for value in (element_dofs, dof_coords, dirichlet_mask):
        value.setflags(write=False)

    space = FeSpace(
        mesh=mesh,
        degree=degree,
        dof_coords=dof_coords,
        element_dofs=element_dofs,
        dirichlet_mask=dirichlet_mask,
    )
    logger.debug(
        "space p=%d on level %d: %d dofs, %d free", degree, mesh.level, space.n_dofs, space.n_free
    )
    return space


@dataclass(frozen=True, eq=False)
class FeFunction:
    """Finite element function given by its values at the Lagrange nodes."""
    space: FeSpace
    coefficients: np.ndarray

    def __post_init__(self):
        coefficients = np.array(self.coefficients, dtype=float)
        if coefficients.shape != (self.space.n_dofs,):
            raise ValueError(
                f"expected {self.space.n_dofs} coefficients, got shape {coefficients.shape}"
            )
        object.__setattr__(self, "coefficients", coefficients)

    @classmethod
    def zeros(cls, space: FeSpace) -> "FeFunction":
        return cls(space, np.zeros(space.n_dofs))

    def __call__(self, points) -> np.ndarray:
        return evaluate(self, points)


def interpolate(space: FeSpace, fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> FeFunction:
    """Nodal interpolant of ``fn(x, y)``."""
    x, y = space.dof_coords.T
    values = np.broadcast_to(np.asarray(fn(x, y), dtype=float), x.shape)
    return FeFunction(space, values)


def evaluate(fn: FeFunction, points: Union[np.ndarray, List[Tuple[float, float]]]) -> np.ndarray:
    """Evaluate ``fn`` at physical points.

    Raises:
        PointLocationError: If a point lies outside every triangle.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    space = fn.space
    triangles, bary = space.mesh.locate(points)
    outside = np.flatnonzero(triangles == ROOT)
    if outside.size:
        raise PointLocationError(
            f"{outside.size} point(s) outside the mesh, first at {points[outside[0]].tolist()}"
        )
    basis = space.reference.values(bary[:, 1:])
    return np.einsum("pb,pb->p", basis, fn.coefficients[space.element_dofs[triangles]])


def prolongation_matrix(coarse: FeSpace, fine: FeSpace) -> sparse.csr_matrix:
    """Sparse matrix mapping coarse coefficients to the identical fine function.

    Every fine node is pulled back into its ancestor triangle on the coarse mesh, where
    the coarse basis is evaluated. Ancestors are found through the ``previous`` chain of
    the fine mesh, so ``fine`` may lie several refinements below ``coarse``.

    Raises:
        NonNestedSpaceError: If the degrees differ or the meshes are not nested.
    """
    if coarse.degree != fine.degree:
        raise NonNestedSpaceError(
            f"degree mismatch: coarse p={coarse.degree}, fine p={fine.degree}"
        )
    try:
        ancestors = fine.mesh.ancestors_in(coarse.mesh)
    except InvalidMeshError as e:
        raise NonNestedSpaceError(str(e)) from e

    n_basis = coarse.reference.n_basis
    flat = fine.element_dofs.ravel()
    _, first = np.unique(flat, return_index=True)
    owner = first // n_basis
    host = ancestors[owner]

    ref_points = coarse.reference_coordinates(host, fine.dof_coords)
    values = coarse.reference.values(ref_points)
    values[np.abs(values) < _DROP_TOLERANCE] = 0.0

    rows = np.repeat(np.arange(fine.n_dofs), n_basis)
    cols = coarse.element_dofs[host].ravel()
    matrix = sparse.csr_matrix(
        (values.ravel(), (rows, cols)), shape=(fine.n_dofs, coarse.n_dofs)
    )
    matrix.eliminate_zeros()
    return matrix


def prolongate(coarse: FeFunction, fine_space: FeSpace) -> FeFunction:
    """Represent a coarse function exactly in the finer space ``fine_space``."""
    if coarse.space is fine_space:
        return FeFunction(fine_space, coarse.coefficients.copy())
    matrix = prolongation_matrix(coarse.space, fine_space)
    return FeFunction(fine_space, matrix @ coarse.coefficients)

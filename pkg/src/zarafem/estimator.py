"""Residual a posteriori error estimator.

For a discrete function ``v`` the squared indicator of a triangle ``T`` is

    w_T^2 ||f + div(eps A grad v - f_vec) - kappa v - b(v)||_T^2
        + w_T ||[(eps A grad v - f_vec) . n]||_{dT inside the domain}^2

with ``w_T = h_T``, or ``w_T = min(eps^{-1/2} h_T, 1)`` for problems flagged
``robust_estimator``. Each interior edge adds its full jump integral to both
neighbours.
"""
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

from .exceptions import InvalidMeshError
from .forms import ProblemSpec
from .mesh import LOCAL_EDGES, Mesh
from .quadrature import line_rule, triangle_rule
from .space import REFERENCE_VERTICES, FeFunction

logger = logging.getLogger(__name__)

VOLUME_DEGREE_FACTOR = 6


@dataclass(frozen=True, eq=False)
class Indicators:
    """Squared local indicators ``eta(T)^2`` of one discrete function."""
    values: np.ndarray
    mesh: Mesh

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != (self.mesh.n_triangles,):
            raise ValueError("one indicator per triangle expected")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def total(self) -> float:
        """``eta = (sum eta(T)^2)^{1/2}``."""
        return math.sqrt(math.fsum(self.values))

    def restrict(self, subset: Union[Iterable[int], np.ndarray]) -> float:
        """``eta(U) = (sum_{T in U} eta(T)^2)^{1/2}``."""
        return restrict(self, subset)


def restrict(ind: Indicators, subset: Union[Iterable[int], np.ndarray]) -> float:
    """Estimator restricted to a set of triangles.

    Raises:
        InvalidMeshError: If an index is out of range.
    """
    index = np.unique(np.fromiter((int(t) for t in subset), dtype=np.int64))
    if index.size and (index[0] < 0 or index[-1] >= len(ind.values)):
        raise InvalidMeshError("subset contains an invalid triangle index")
    return math.sqrt(math.fsum(ind.values[index]))


def estimator_weights(mesh: Mesh, prob: ProblemSpec) -> np.ndarray:
    """Per-triangle weights ``w_T``."""
    if prob.robust_estimator:
        return np.minimum(mesh.mesh_sizes / math.sqrt(prob.eps), 1.0)
    return mesh.mesh_sizes


def volume_residuals(u: FeFunction, prob: ProblemSpec) -> np.ndarray:
    """``||f + div(eps A grad u) - kappa u - b(u)||_T^2`` for every triangle."""
    space = u.space
    mesh = space.mesh
    rule = prob.quadrature(space.degree)
    if rule.degree < VOLUME_DEGREE_FACTOR * space.degree:
        # the squared cubic residual is a polynomial of degree 6p
        rule = triangle_rule(VOLUME_DEGREE_FACTOR * space.degree)
    ref = space.reference
    points = space.physical_points(rule)
    local = space.local_coefficients(u.coefficients)
    values = local @ ref.values(rule.reference_points).T

    residual = np.broadcast_to(
        np.asarray(prob.source(points[..., 0], points[..., 1]), dtype=float), values.shape
    ) - prob.nonlinearity.value(values)
    if prob.reaction_weight:
        residual = residual - prob.reaction_weight * values
    if space.degree > 1:
        inv = space.inverse_jacobians
        reference_hessian = np.einsum("mb,qbij->mqij", local, ref.hessians(rule.reference_points))
        hessian = np.einsum("mki,mqkl,mlj->mqij", inv, reference_hessian, inv)
        tensors = prob.diffusion_tensors(mesh)
        residual = residual + prob.eps * np.einsum("mij,mqji->mq", tensors, hessian)

    return mesh.areas * ((residual**2) @ rule.weights)


def edge_jumps(u: FeFunction, prob: ProblemSpec, flip_jump_sign: bool = False) -> np.ndarray:
    """Squared normal-flux jump integral on every interior edge.

    Returns:
        ``(n_interior_edges,)`` values in the order of ``mesh.interior_edges``.
    """
    space = u.space
    mesh = space.mesh
    interior = mesh.interior_edges
    if not interior.size:
        return np.zeros(0)

    ref = space.reference
    rule = line_rule(2 * space.degree)
    lo, hi = mesh.edges[interior].T
    direction = mesh.vertices[hi] - mesh.vertices[lo]
    length = np.linalg.norm(direction, axis=1)
    normal = np.column_stack((direction[:, 1], -direction[:, 0])) / length[:, None]

    tensors = prob.diffusion_tensors(mesh)
    f_vec = prob.source_vectors(mesh)
    local = space.local_coefficients(u.coefficients)
    fluxes = []
    for side in (0, 1):
        tri = mesh.edge_triangles[interior, side]
        a, b = LOCAL_EDGES[mesh.edge_local[interior, side]].T
        forward = mesh.triangles[tri, a] == lo
        t = np.where(forward[:, None], rule.points[None, :], 1.0 - rule.points[None, :])
        start = REFERENCE_VERTICES[a][:, None, :]
        end = REFERENCE_VERTICES[b][:, None, :]
        ref_points = start + t[..., None] * (end - start)

        n_edges, n_points = t.shape
        grads = ref.gradients(ref_points.reshape(-1, 2)).reshape(n_edges, n_points, -1, 2)
        reference_grad = np.einsum("eb,eqbj->eqj", local[tri], grads)
        grad = np.einsum("eji,eqj->eqi", space.inverse_jacobians[tri], reference_grad)
        flux = prob.eps * np.einsum("eij,eqj->eqi", tensors[tri], grad)
        if f_vec is not None:
            flux = flux - f_vec[tri][:, None, :]
        fluxes.append(np.einsum("eqi,ei->eq", flux, normal))

    jump = fluxes[0] + fluxes[1] if flip_jump_sign else fluxes[0] - fluxes[1]
    return length * ((jump**2) @ rule.weights)


def estimate(u: FeFunction, prob: ProblemSpec, flip_jump_sign: bool = False) -> Indicators:
    """Compute the squared residual indicators of ``u``.

    Args:
        u: Discrete function.
        prob: Problem data.
        flip_jump_sign: Fault-injection hook that adds instead of subtracting the two
            one-sided fluxes. Only used to check that the property suite detects it.
    """
    mesh = u.space.mesh
    weights = estimator_weights(mesh, prob)
    values = weights**2 * volume_residuals(u, prob)

    jumps = edge_jumps(u, prob, flip_jump_sign)
    if jumps.size:
        interior = mesh.interior_edges
        for side in (0, 1):
            tri = mesh.edge_triangles[interior, side]
            values = values + np.bincount(
                tri, weights=weights[tri] * jumps, minlength=mesh.n_triangles
            )
    return Indicators(values=values, mesh=mesh)

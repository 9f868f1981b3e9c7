"""Problem data, weak-form assembly, energy functional and error norms.

The model problem is ``-div(eps A grad u) + kappa u + b(u) = f - div f_vec`` with
homogeneous Dirichlet data. The energy inner product is
``<<v, w>> = eps (A grad v, grad w) + kappa (v, w)`` and the energy functional is
``E(v) = 1/2 <<v, v>> + int B(v) - int f v - int f_vec . grad v``.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Union

import numpy as np
from scipy import sparse

from .exceptions import InvalidProblemError, MissingExactSolutionError
from .mesh import Mesh
from .quadrature import QuadratureRule, default_quadrature_degree, triangle_rule
from .space import FeFunction, FeSpace

logger = logging.getLogger(__name__)

ScalarField = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Nonlinearity:
    """Monotone reaction ``b`` with derivative and antiderivative ``B`` (``B(0) = 0``)."""
    name: str
    value: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]
    antiderivative: Callable[[np.ndarray], np.ndarray]

    def scaled(self, factor: float) -> "Nonlinearity":
        if factor == 1.0:
            return self
        return Nonlinearity(
            name=f"{factor!r}*{self.name}",
            value=lambda s: factor * self.value(s),
            derivative=lambda s: factor * self.derivative(s),
            antiderivative=lambda s: factor * self.antiderivative(s),
        )

    @property
    def is_zero(self) -> bool:
        return self.name == "zero"


def _zero(s):
    return np.zeros_like(np.asarray(s, dtype=float))


ZERO_NONLINEARITY = Nonlinearity("zero", _zero, _zero, _zero)


@dataclass
class ProblemSpec:
    """Data of a semilinear elliptic problem.

    ``diffusion`` is a scalar, a constant 2x2 matrix or a callable mapping element
    centroids ``(M, 2)`` to per-element matrices ``(M, 2, 2)``. ``source_vector`` is
    either a constant 2-vector or a callable mapping centroids to ``(M, 2)``.
    ``defaults`` holds recommended algorithm parameters for the problem.
    """
    name: str
    source: ScalarField
    nonlinearity: Nonlinearity = ZERO_NONLINEARITY
    diffusion: Union[float, np.ndarray, Callable[[np.ndarray], np.ndarray]] = 1.0
    eps: float = 1.0
    reaction_weight: float = 0.0
    source_vector: Optional[Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]] = None
    exact: Optional[ScalarField] = None
    exact_gradient: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    robust_estimator: bool = False
    domain: str = "unit-square"
    quadrature_degree: Optional[int] = None
    defaults: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.eps > 0:
            raise InvalidProblemError(f"eps must be positive, got {self.eps}")
        if self.reaction_weight < 0:
            raise InvalidProblemError(
                f"reaction weight must be non-negative, got {self.reaction_weight}"
            )
        if self.quadrature_degree is not None and self.quadrature_degree < 0:
            raise InvalidProblemError("quadrature degree must be non-negative")

    def diffusion_tensors(self, mesh: Mesh) -> np.ndarray:
        """Per-element diffusion matrices ``A|_T``, ``(M, 2, 2)``."""
        if callable(self.diffusion):
            tensors = np.asarray(self.diffusion(mesh.centroids), dtype=float)
            return np.broadcast_to(tensors, (mesh.n_triangles, 2, 2))
        tensor = np.asarray(self.diffusion, dtype=float)
        if tensor.ndim == 0:
            tensor = tensor * np.eye(2)
        return np.broadcast_to(tensor, (mesh.n_triangles, 2, 2))

    def source_vectors(self, mesh: Mesh) -> Optional[np.ndarray]:
        """Per-element constant ``f_vec``, ``(M, 2)``, or None when absent."""
        if self.source_vector is None:
            return None
        if callable(self.source_vector):
            values = np.asarray(self.source_vector(mesh.centroids), dtype=float)
        else:
            values = np.asarray(self.source_vector, dtype=float)
        return np.broadcast_to(values, (mesh.n_triangles, 2))

    def quadrature(self, degree: int) -> QuadratureRule:
        """Quadrature rule for polynomial degree ``degree``."""
        if self.quadrature_degree is not None:
            return triangle_rule(self.quadrature_degree)
        return triangle_rule(default_quadrature_degree(degree))

    def validate(self, mesh: Optional[Mesh] = None, samples: int = 2001, bound: float = 10.0):
        """Check the model assumptions by sampling.

        Checks ``b(0) = 0``, ``B(0) = 0``, ``B' = b``, monotonicity of the full reaction
        ``kappa + b' >= 0`` on ``[-bound, bound]`` and symmetric positive definite
        diffusion (on ``mesh`` when given).

        Raises:
            InvalidProblemError: If an assumption is violated.
        """
        b = self.nonlinearity
        xi = np.linspace(-bound, bound, samples)
        if abs(float(b.value(np.array([0.0]))[0])) > 1e-14:
            raise InvalidProblemError(f"{self.name}: b(0) must vanish")
        if abs(float(b.antiderivative(np.array([0.0]))[0])) > 1e-14:
            raise InvalidProblemError(f"{self.name}: B(0) must vanish")
        slope = self.reaction_weight + b.derivative(xi)
        if np.min(slope) < -1e-12:
            raise InvalidProblemError(
                f"{self.name}: reaction is not monotone, kappa + b' reaches {np.min(slope):.3e}"
            )
        h = 1e-5
        numeric = (b.antiderivative(xi + h) - b.antiderivative(xi - h)) / (2 * h)
        scale = 1.0 + np.abs(b.value(xi))
        if np.max(np.abs(numeric - b.value(xi)) / scale) > 1e-5:
            raise InvalidProblemError(f"{self.name}: antiderivative does not match b")

        if mesh is not None:
            tensors = self.diffusion_tensors(mesh)
        elif callable(self.diffusion):
            tensors = None
        else:
            tensor = np.asarray(self.diffusion, dtype=float)
            tensors = (tensor * np.eye(2) if tensor.ndim == 0 else tensor)[None]
        if tensors is not None:
            if not np.allclose(tensors, np.swapaxes(tensors, 1, 2), rtol=1e-12, atol=0.0):
                raise InvalidProblemError(f"{self.name}: diffusion must be symmetric")
            if np.min(np.linalg.eigvalsh(tensors)) <= 0.0:
                raise InvalidProblemError(f"{self.name}: diffusion must be positive definite")


def _assemble(space: FeSpace, local: np.ndarray) -> sparse.csr_matrix:
    dofs = space.element_dofs
    n_elem, n_basis = dofs.shape
    rows = np.broadcast_to(dofs[:, :, None], (n_elem, n_basis, n_basis)).ravel()
    cols = np.broadcast_to(dofs[:, None, :], (n_elem, n_basis, n_basis)).ravel()
    return sparse.coo_matrix(
        (local.ravel(), (rows, cols)), shape=(space.n_dofs, space.n_dofs)
    ).tocsr()


def _scatter(space: FeSpace, local: np.ndarray) -> np.ndarray:
    return np.bincount(
        space.element_dofs.ravel(), weights=local.ravel(), minlength=space.n_dofs
    )


def _values_at_quadrature(u: FeFunction, rule: QuadratureRule) -> np.ndarray:
    basis = u.space.reference.values(rule.reference_points)
    return u.space.local_coefficients(u.coefficients) @ basis.T


def assemble_inner_product(space: FeSpace, prob: ProblemSpec) -> sparse.csr_matrix:
    """Gram matrix ``K`` of ``<<v, w>> = eps (A grad v, grad w) + kappa (v, w)``."""
    ref = space.reference
    mesh = space.mesh
    rule = triangle_rule(2 * space.degree)
    grads = ref.gradients(rule.reference_points)
    shape_products = np.einsum("q,qbi,qcj->bcij", rule.weights, grads, grads)

    inv = space.inverse_jacobians
    metric = prob.eps * np.einsum("mik,mkl,mjl->mij", inv, prob.diffusion_tensors(mesh), inv)
    local = mesh.areas[:, None, None] * np.einsum("mij,bcij->mbc", metric, shape_products)

    if prob.reaction_weight:
        basis = ref.values(rule.reference_points)
        mass = np.einsum("q,qb,qc->bc", rule.weights, basis, basis)
        local = local + prob.reaction_weight * mesh.areas[:, None, None] * mass

    local = 0.5 * (local + np.swapaxes(local, 1, 2))
    return _assemble(space, local)


def assemble_mass(space: FeSpace) -> sparse.csr_matrix:
    """L2 Gram matrix of the nodal basis."""
    rule = triangle_rule(2 * space.degree)
    basis = space.reference.values(rule.reference_points)
    mass = np.einsum("q,qb,qc->bc", rule.weights, basis, basis)
    return _assemble(space, space.mesh.areas[:, None, None] * mass)


def load_vector(space: FeSpace, prob: ProblemSpec) -> np.ndarray:
    """Right-hand side ``F(phi_j) = int f phi_j + int f_vec . grad phi_j``."""
    mesh = space.mesh
    rule = prob.quadrature(space.degree)
    points = space.physical_points(rule)
    values = np.broadcast_to(
        np.asarray(prob.source(points[..., 0], points[..., 1]), dtype=float), points.shape[:2]
    )
    basis = space.reference.values(rule.reference_points)
    local = mesh.areas[:, None] * ((values * rule.weights) @ basis)

    f_vec = prob.source_vectors(mesh)
    if f_vec is not None:
        grads = space.reference.gradients(rule.reference_points)
        mean_grads = np.einsum("q,qbj->bj", rule.weights, grads)
        local = local + mesh.areas[:, None] * np.einsum(
            "mi,mji,bj->mb", f_vec, space.inverse_jacobians, mean_grads
        )
    return _scatter(space, local)


def reaction_vector(u: FeFunction, prob: ProblemSpec) -> np.ndarray:
    """``int b(u) phi_j`` for every DOF."""
    if prob.nonlinearity.is_zero:
        return np.zeros(u.space.n_dofs)
    rule = prob.quadrature(u.space.degree)
    values = prob.nonlinearity.value(_values_at_quadrature(u, rule))
    basis = u.space.reference.values(rule.reference_points)
    local = u.space.mesh.areas[:, None] * ((values * rule.weights) @ basis)
    return _scatter(u.space, local)


def assemble_reaction_jacobian(u: FeFunction, prob: ProblemSpec) -> sparse.csr_matrix:
    """Matrix of ``int b'(u) phi_i phi_j``, the Newton linearization of the reaction."""
    rule = prob.quadrature(u.space.degree)
    slopes = prob.nonlinearity.derivative(_values_at_quadrature(u, rule))
    basis = u.space.reference.values(rule.reference_points)
    local = u.space.mesh.areas[:, None, None] * np.einsum(
        "mq,q,qb,qc->mbc", slopes, rule.weights, basis, basis
    )
    return _assemble(u.space, local)


def apply_nonlinear_residual(
    u: FeFunction,
    prob: ProblemSpec,
    matrix: Optional[sparse.spmatrix] = None,
    load: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Residual ``r_j = F(phi_j) - <<u, phi_j>> - int b(u) phi_j``, zero on Dirichlet DOFs.

    Args:
        u: Current iterate.
        prob: Problem data.
        matrix: Precomputed Gram matrix, assembled when omitted.
        load: Precomputed load vector, assembled when omitted.
    """
    space = u.space
    if matrix is None:
        matrix = assemble_inner_product(space, prob)
    if load is None:
        load = load_vector(space, prob)
    residual = load - matrix @ u.coefficients - reaction_vector(u, prob)
    residual[space.dirichlet_mask] = 0.0
    return residual


def energy(
    u: FeFunction,
    prob: ProblemSpec,
    matrix: Optional[sparse.spmatrix] = None,
    load: Optional[np.ndarray] = None,
) -> float:
    """Energy ``E(u) = 1/2 <<u, u>> + int B(u) - F(u)``."""
    space = u.space
    if matrix is None:
        matrix = assemble_inner_product(space, prob)
    if load is None:
        load = load_vector(space, prob)
    c = u.coefficients
    value = 0.5 * float(c @ (matrix @ c)) - float(load @ c)
    if not prob.nonlinearity.is_zero:
        rule = prob.quadrature(space.degree)
        primitive = prob.nonlinearity.antiderivative(_values_at_quadrature(u, rule))
        value += float(space.mesh.areas @ (primitive @ rule.weights))
    return value


def energy_norm(
    space: FeSpace,
    prob: ProblemSpec,
    v: np.ndarray,
    matrix: Optional[sparse.spmatrix] = None,
) -> float:
    """``|||v||| = (v^T K v)^{1/2}``; roundoff-negative squares are clamped to 0."""
    if matrix is None:
        matrix = assemble_inner_product(space, prob)
    v = np.asarray(v, dtype=float)
    return float(np.sqrt(max(float(v @ (matrix @ v)), 0.0)))


def energy_norm_diff(
    u: FeFunction,
    v: FeFunction,
    prob: ProblemSpec,
    matrix: Optional[sparse.spmatrix] = None,
) -> float:
    """``|||u - v|||`` for two functions in the same space."""
    if u.space is not v.space:
        raise ValueError("energy_norm_diff needs functions in the same space")
    return energy_norm(u.space, prob, u.coefficients - v.coefficients, matrix)


def exact_error(u: FeFunction, prob: ProblemSpec) -> float:
    """Energy-norm error ``|||u* - u|||`` against the exact solution, by quadrature.

    Raises:
        MissingExactSolutionError: If the problem carries no exact gradient (or no
            exact solution while ``kappa > 0``).
    """
    if prob.exact_gradient is None or (prob.reaction_weight and prob.exact is None):
        raise MissingExactSolutionError(f"Problem '{prob.name}' has no exact solution")

    space = u.space
    mesh = space.mesh
    rule = triangle_rule(prob.quadrature(space.degree).degree + 2)
    points = space.physical_points(rule)
    x, y = points[..., 0], points[..., 1]
    local = space.local_coefficients(u.coefficients)

    grads = space.reference.gradients(rule.reference_points)
    discrete = np.einsum("mb,qbj,mji->mqi", local, grads, space.inverse_jacobians)
    diff = np.asarray(prob.exact_gradient(x, y), dtype=float) - discrete
    tensors = prob.diffusion_tensors(mesh)
    density = prob.eps * np.einsum("mqi,mij,mqj->mq", diff, tensors, diff)

    if prob.reaction_weight:
        basis = space.reference.values(rule.reference_points)
        gap = np.asarray(prob.exact(x, y), dtype=float) - local @ basis.T
        density = density + prob.reaction_weight * gap**2

    return float(np.sqrt(max(float(mesh.areas @ (density @ rule.weights)), 0.0)))

"""Conforming triangulations with newest vertex bisection (NVB).

Every triangle ``(v0, v1, v2)`` is stored positively oriented with its refinement
edge between local vertices 0 and 1; local vertex 2 is the newest vertex. Local edge
``j`` joins the local vertices ``LOCAL_EDGES[j]``, so local edge 0 is always the
refinement edge.
"""
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, List, Optional, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import InvalidMeshError, MeshFormatError

logger = logging.getLogger(__name__)

ROOT = -1

LOCAL_EDGES = np.array([[0, 1], [1, 2], [2, 0]], dtype=np.int64)

# point-location work arrays are chunked to roughly this many entries
_LOCATE_BLOCK = 2_000_000


def _signed_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p0 = vertices[triangles[:, 0]]
    p1 = vertices[triangles[:, 1]]
    p2 = vertices[triangles[:, 2]]
    return 0.5 * (
        (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
        - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1])
    )


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming triangulation of a polygonal domain.

    Attributes:
        vertices: ``(N, 2)`` vertex coordinates.
        triangles: ``(M, 3)`` vertex indices, refinement edge between columns 0 and 1.
        generation: ``(M,)`` number of bisections since the initial mesh.
        parent: ``(M,)`` index of the parent triangle in ``previous`` (``ROOT`` on level 0).
        level: mesh index in its refinement sequence.
        previous: the mesh this one was refined from, ``None`` on level 0.
    """
    vertices: np.ndarray
    triangles: np.ndarray
    generation: Optional[np.ndarray] = None
    parent: Optional[np.ndarray] = None
    level: int = 0
    previous: Optional["Mesh"] = field(default=None, repr=False)

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=float)
        triangles = np.array(self.triangles, dtype=np.int64)

        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise InvalidMeshError(f"vertices must have shape (N, 2), got {vertices.shape}")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise InvalidMeshError(f"triangles must have shape (M, 3), got {triangles.shape}")
        if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise InvalidMeshError("triangle references a vertex index out of range")
        if self.level < 0:
            raise InvalidMeshError(f"mesh level must be non-negative, got {self.level}")

        n_tri = len(triangles)
        generation = (
            np.zeros(n_tri, dtype=np.int64)
            if self.generation is None
            else np.array(self.generation, dtype=np.int64)
        )
        parent = (
            np.full(n_tri, ROOT, dtype=np.int64)
            if self.parent is None
            else np.array(self.parent, dtype=np.int64)
        )
        if generation.shape != (n_tri,) or parent.shape != (n_tri,):
            raise InvalidMeshError("generation and parent need one entry per triangle")

        if n_tri and np.any(_signed_areas(vertices, triangles) <= 0.0):
            raise InvalidMeshError("every triangle must have positive signed area")

        for name, value in (
            ("vertices", vertices),
            ("triangles", triangles),
            ("generation", generation),
            ("parent", parent),
        ):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @classmethod
    def from_arrays(
        cls,
        vertices: Union[np.ndarray, List],
        triangles: Union[np.ndarray, List],
        assign_refinement_edges: bool = True,
    ) -> "Mesh":
        """Build an initial mesh, fixing orientation and refinement edges.

        Negatively oriented triangles are repaired by swapping local vertices 0 and 1,
        which keeps the stored refinement edge. With ``assign_refinement_edges`` the
        refinement edge of every triangle is its longest edge, ties broken by the
        smallest global index of the opposite vertex.
        """
        vertices = np.asarray(vertices, dtype=float)
        triangles = np.array(triangles, dtype=np.int64)
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise InvalidMeshError(f"triangles must have shape (M, 3), got {triangles.shape}")
        if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise InvalidMeshError("triangle references a vertex index out of range")

        areas = _signed_areas(vertices, triangles)
        if np.any(areas == 0.0):
            raise InvalidMeshError("degenerate triangle with zero area")
        negative = areas < 0.0
        triangles[negative] = triangles[negative][:, [1, 0, 2]]

        if assign_refinement_edges and len(triangles):
            points = vertices[triangles]
            opposite = np.empty(triangles.shape)
            for j in range(3):
                d = points[:, (j + 1) % 3] - points[:, (j + 2) % 3]
                opposite[:, j] = np.einsum("ij,ij->i", d, d)
            longest = opposite.max(axis=1, keepdims=True)
            candidates = opposite >= longest * (1.0 - 1e-12)
            keys = np.where(candidates, triangles, np.iinfo(np.int64).max)
            newest = keys.argmin(axis=1)
            rotation = (newest[:, None] + np.array([1, 2, 3])) % 3
            triangles = np.take_along_axis(triangles, rotation, axis=1)

        return cls(vertices=vertices, triangles=triangles)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def areas(self) -> np.ndarray:
        """Triangle areas ``|T|``."""
        return _signed_areas(self.vertices, self.triangles)

    @cached_property
    def mesh_sizes(self) -> np.ndarray:
        """Local mesh sizes ``h_T = |T|^{1/2}``."""
        return np.sqrt(self.areas)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def _topology(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        n_tri = self.n_triangles
        n_vert = np.int64(self.n_vertices)
        local = self.triangles[:, LOCAL_EDGES]
        lo = local.min(axis=2)
        hi = local.max(axis=2)
        keys = (lo * n_vert + hi).ravel()
        unique_keys, inverse = np.unique(keys, return_inverse=True)
        inverse = inverse.reshape(-1)
        edges = np.column_stack((unique_keys // n_vert, unique_keys % n_vert))
        tri_edges = inverse.reshape(n_tri, 3)

        n_edges = len(edges)
        counts = np.bincount(inverse, minlength=n_edges)
        if n_edges and counts.max() > 2:
            raise InvalidMeshError("an edge is shared by more than two triangles")
        order = np.argsort(inverse, kind="stable")
        starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
        edge_triangles = np.full((n_edges, 2), ROOT, dtype=np.int64)
        edge_local = np.full((n_edges, 2), ROOT, dtype=np.int64)
        edge_triangles[:, 0] = order[starts] // 3
        edge_local[:, 0] = order[starts] % 3
        shared = counts == 2
        edge_triangles[shared, 1] = order[starts[shared] + 1] // 3
        edge_local[shared, 1] = order[starts[shared] + 1] % 3

        for value in (edges, tri_edges, edge_triangles, edge_local):
            value.setflags(write=False)
        return edges, tri_edges, edge_triangles, edge_local

    @property
    def edges(self) -> np.ndarray:
        """``(E, 2)`` edge table, each row sorted ascending."""
        return self._topology[0]

    @property
    def tri_edges(self) -> np.ndarray:
        """``(M, 3)`` global edge index of local edge ``j`` of each triangle."""
        return self._topology[1]

    @property
    def edge_triangles(self) -> np.ndarray:
        """``(E, 2)`` incident triangles; the second is ``ROOT`` on boundary edges."""
        return self._topology[2]

    @property
    def edge_local(self) -> np.ndarray:
        """``(E, 2)`` local edge index of the edge inside each incident triangle."""
        return self._topology[3]

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        return np.flatnonzero(self.edge_triangles[:, 1] == ROOT)

    @cached_property
    def interior_edges(self) -> np.ndarray:
        return np.flatnonzero(self.edge_triangles[:, 1] != ROOT)

    @cached_property
    def boundary_vertex_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.edges[self.boundary_edges].ravel()] = True
        return mask

    def mesh_size(self, t: int) -> float:
        """Return ``h_T = |T|^{1/2}`` of triangle ``t``."""
        if not 0 <= t < self.n_triangles:
            raise InvalidMeshError(f"triangle index {t} out of range")
        return float(self.mesh_sizes[t])

    def min_angle(self) -> float:
        """Smallest interior angle over all triangles, in degrees."""
        points = self.vertices[self.triangles]
        angles = []
        for j in range(3):
            a = points[:, (j + 1) % 3] - points[:, j]
            b = points[:, (j + 2) % 3] - points[:, j]
            cos = np.einsum("ij,ij->i", a, b) / (
                np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
            )
            angles.append(np.arccos(np.clip(cos, -1.0, 1.0)))
        return float(np.degrees(np.min(angles)))

    def is_conforming(self, tol: float = 1e-12) -> bool:
        """Check that no vertex lies inside an edge that has a single neighbour.

        Interior edges shared by more than two triangles are already rejected when
        the edge table is built; a hanging node shows up as a vertex lying strictly
        inside an edge that has only one incident triangle.
        """
        try:
            edges = self.edges[self.boundary_edges]
        except InvalidMeshError:
            return False
        if not len(edges):
            return True
        candidates = np.flatnonzero(self.boundary_vertex_mask)
        points = self.vertices[candidates]
        tree = cKDTree(points)
        p = self.vertices[edges[:, 0]]
        q = self.vertices[edges[:, 1]]
        midpoints = 0.5 * (p + q)
        radii = 0.5 * np.linalg.norm(q - p, axis=1)
        for e, hits in enumerate(tree.query_ball_point(midpoints, radii * (1.0 + 1e-9))):
            for h in hits:
                r = candidates[h]
                if r in (edges[e, 0], edges[e, 1]):
                    continue
                d = q[e] - p[e]
                w = self.vertices[r] - p[e]
                length2 = d @ d
                cross = d[0] * w[1] - d[1] * w[0]
                along = d @ w
                if abs(cross) <= tol * length2 and 0.0 < along < length2:
                    return False
        return True

    def locate(self, points: Union[np.ndarray, List], tol: float = 1e-12):
        """Find a containing triangle and barycentric coordinates for each point.

        Returns:
            ``(triangle_indices, barycentric)`` with shapes ``(P,)`` and ``(P, 3)``;
            triangles that do not contain the point get index ``ROOT``.
        """
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        corners = self.vertices[self.triangles]
        v0 = corners[:, 0]
        e1 = corners[:, 1] - v0
        e2 = corners[:, 2] - v0
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]

        found = np.full(len(points), ROOT, dtype=np.int64)
        bary = np.zeros((len(points), 3))
        block = max(1, _LOCATE_BLOCK // max(1, self.n_triangles))
        for start in range(0, len(points), block):
            chunk = points[start:start + block]
            d = chunk[:, None, :] - v0[None, :, :]
            l1 = (d[..., 0] * e2[:, 1] - d[..., 1] * e2[:, 0]) / det
            l2 = (e1[:, 0] * d[..., 1] - e1[:, 1] * d[..., 0]) / det
            l0 = 1.0 - l1 - l2
            inside = (l0 >= -tol) & (l1 >= -tol) & (l2 >= -tol)
            hit = inside.any(axis=1)
            first = inside.argmax(axis=1)
            rows = np.arange(len(chunk))
            found[start:start + block] = np.where(hit, first, ROOT)
            bary[start:start + block] = np.column_stack(
                (l0[rows, first], l1[rows, first], l2[rows, first])
            )
        return found, bary

    def ancestors_in(self, coarse: "Mesh") -> np.ndarray:
        """Map every triangle to the triangle of ``coarse`` that contains it.

        Raises:
            InvalidMeshError: If this mesh was not obtained from ``coarse`` by refinement.
        """
        index = np.arange(self.n_triangles)
        mesh = self
        while mesh is not coarse:
            if mesh.previous is None:
                raise InvalidMeshError("mesh is not a refinement of the given coarse mesh")
            index = mesh.parent[index]
            mesh = mesh.previous
        return index


def refine(mesh: Mesh, marked: Iterable[int]) -> Mesh:
    """Refine ``mesh`` by NVB so that every marked triangle is bisected.

    The closure marks the refinement edge of every marked triangle and then, until a
    fixpoint is reached, the refinement edge of every triangle that has any marked
    edge. Each triangle is then bisected once (refinement edge only), twice or three
    times, depending on which of its edges are marked. Midpoints are created once per
    marked edge, in edge order.

    Raises:
        InvalidMeshError: If a marked index is out of range.
    """
    marked = np.unique(np.fromiter((int(t) for t in marked), dtype=np.int64))
    if marked.size and (marked[0] < 0 or marked[-1] >= mesh.n_triangles):
        raise InvalidMeshError(
            f"marked triangle index out of range [0, {mesh.n_triangles})"
        )
    if not marked.size:
        return mesh

    tri_edges = mesh.tri_edges
    bisected = np.zeros(mesh.n_edges, dtype=bool)
    bisected[tri_edges[marked, 0]] = True
    while True:
        flags = bisected[tri_edges]
        forced = flags.any(axis=1) & ~flags[:, 0]
        if not forced.any():
            break
        bisected[tri_edges[forced, 0]] = True

    split_edges = np.flatnonzero(bisected)
    midpoint = np.full(mesh.n_edges, ROOT, dtype=np.int64)
    midpoint[split_edges] = mesh.n_vertices + np.arange(len(split_edges))
    ends = mesh.edges[split_edges]
    new_coords = 0.5 * (mesh.vertices[ends[:, 0]] + mesh.vertices[ends[:, 1]])

    refined = flags[:, 0]
    left = flags[:, 2]
    right = flags[:, 1]
    n_children = np.where(refined, 2 + left.astype(np.int64) + right.astype(np.int64), 1)
    offsets = np.concatenate(([0], np.cumsum(n_children)[:-1]))
    total = int(n_children.sum())

    triangles = np.empty((total, 3), dtype=np.int64)
    generation = np.empty(total, dtype=np.int64)
    parent = np.repeat(np.arange(mesh.n_triangles), n_children)

    keep = ~refined
    triangles[offsets[keep]] = mesh.triangles[keep]
    generation[offsets[keep]] = mesh.generation[keep]

    rows = np.flatnonzero(refined)
    v0, v1, v2 = mesh.triangles[rows].T
    g = mesh.generation[rows]
    m0 = midpoint[tri_edges[rows, 0]]
    m1 = midpoint[tri_edges[rows, 1]]
    m2 = midpoint[tri_edges[rows, 2]]
    slot = offsets[rows].copy()

    lf = left[rows]
    once = slot[~lf]
    triangles[once] = np.column_stack((v2, v0, m0))[~lf]
    generation[once] = g[~lf] + 1
    twice = slot[lf]
    triangles[twice] = np.column_stack((m0, v2, m2))[lf]
    triangles[twice + 1] = np.column_stack((v0, m0, m2))[lf]
    generation[twice] = g[lf] + 2
    generation[twice + 1] = g[lf] + 2
    slot += 1 + lf.astype(np.int64)

    rt = right[rows]
    once = slot[~rt]
    triangles[once] = np.column_stack((v1, v2, m0))[~rt]
    generation[once] = g[~rt] + 1
    twice = slot[rt]
    triangles[twice] = np.column_stack((m0, v1, m1))[rt]
    triangles[twice + 1] = np.column_stack((v2, m0, m1))[rt]
    generation[twice] = g[rt] + 2
    generation[twice + 1] = g[rt] + 2

    logger.debug(
        "refine level %d: %d marked, %d bisected edges, %d -> %d triangles",
        mesh.level, marked.size, len(split_edges), mesh.n_triangles, total,
    )
    return Mesh(
        vertices=np.vstack((mesh.vertices, new_coords)),
        triangles=triangles,
        generation=generation,
        parent=parent,
        level=mesh.level + 1,
        previous=mesh,
    )


def uniform_refine(mesh: Mesh, n: int) -> Mesh:
    """Apply ``n`` refinements that mark every triangle."""
    if n < 0:
        raise InvalidMeshError(f"number of refinements must be non-negative, got {n}")
    for _ in range(n):
        mesh = refine(mesh, range(mesh.n_triangles))
    return mesh


@dataclass
class MeshHierarchy:
    """Sequence of meshes where each one refines its predecessor."""
    meshes: List[Mesh] = field(default_factory=list)
    new_vertex_sets: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def from_mesh(cls, mesh: Mesh) -> "MeshHierarchy":
        hierarchy = cls()
        hierarchy.meshes.append(mesh)
        hierarchy.new_vertex_sets.append(np.arange(mesh.n_vertices))
        return hierarchy

    def append(self, mesh: Mesh) -> None:
        """Add the next level; ``mesh`` must be refined from the current finest mesh.

        Several refinements may lie in between. The new vertex set then holds every
        vertex created since the finest mesh.
        """
        if not self.meshes:
            self.meshes.append(mesh)
            self.new_vertex_sets.append(np.arange(mesh.n_vertices))
            return
        finest = self.meshes[-1]
        ancestor = mesh.previous
        while ancestor is not None and ancestor is not finest:
            ancestor = ancestor.previous
        if ancestor is None:
            raise InvalidMeshError("mesh was not refined from the finest mesh of the hierarchy")
        self.meshes.append(mesh)
        self.new_vertex_sets.append(np.arange(finest.n_vertices, mesh.n_vertices))

    @property
    def finest(self) -> Mesh:
        return self.meshes[-1]

    def __len__(self) -> int:
        return len(self.meshes)


def unit_square() -> Mesh:
    """Unit square split into two triangles along the diagonal (0,0)-(1,1)."""
    vertices = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
    triangles = [(0, 1, 2), (0, 2, 3)]
    return Mesh.from_arrays(vertices, triangles)


def l_shape() -> Mesh:
    """L-shaped domain ``(-1,1)^2 \\ [0,1]x[-1,0]`` split into six triangles."""
    vertices = [
        (-1.0, -1.0), (0.0, -1.0), (-1.0, 0.0), (0.0, 0.0),
        (1.0, 0.0), (-1.0, 1.0), (0.0, 1.0), (1.0, 1.0),
    ]
    triangles = [(0, 1, 3), (0, 3, 2), (2, 3, 6), (2, 6, 5), (3, 4, 7), (3, 7, 6)]
    return Mesh.from_arrays(vertices, triangles)


BUILTIN_MESHES = {
    "unit-square": unit_square,
    "l-shape": l_shape,
}


def builtin_mesh(name: str) -> Mesh:
    """Return a built-in initial mesh by name."""
    if name not in BUILTIN_MESHES:
        available = ", ".join(sorted(BUILTIN_MESHES))
        raise KeyError(f"Mesh '{name}' not found. Available meshes: {available}")
    return BUILTIN_MESHES[name]()


def read_mesh(path: Union[str, Path]) -> Mesh:
    """Read a mesh in the text format.

    The format is a header line ``vertices N triangles M`` followed by ``N`` lines
    ``x y`` and ``M`` lines ``v0 v1 v2``; the refinement edge is ``v0``-``v1``.

    Raises:
        FileNotFoundError: If the file does not exist.
        MeshFormatError: If the content does not follow the format.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Mesh file not found: {path}")

    lines = [line.strip() for line in path.read_text().splitlines()]
    lines = [line for line in lines if line and not line.startswith("#")]
    if not lines:
        raise MeshFormatError("Mesh file is empty")

    header = lines[0].split()
    if len(header) != 4 or header[0] != "vertices" or header[2] != "triangles":
        raise MeshFormatError(f"Invalid mesh header: {lines[0]!r}")
    try:
        n_vertices, n_triangles = int(header[1]), int(header[3])
    except ValueError as e:
        raise MeshFormatError(f"Invalid counts in mesh header: {lines[0]!r}") from e
    if n_vertices < 3 or n_triangles < 1:
        raise MeshFormatError("Mesh needs at least 3 vertices and 1 triangle")

    body = lines[1:]
    if len(body) != n_vertices + n_triangles:
        raise MeshFormatError(
            f"Expected {n_vertices + n_triangles} data lines, found {len(body)}"
        )
    try:
        vertices = np.array([[float(x) for x in line.split()] for line in body[:n_vertices]])
        triangles = np.array([[int(v) for v in line.split()] for line in body[n_vertices:]])
    except ValueError as e:
        raise MeshFormatError(f"Malformed mesh data: {e}") from e
    if vertices.shape != (n_vertices, 2) or triangles.shape != (n_triangles, 3):
        raise MeshFormatError("Vertex lines need 2 numbers and triangle lines 3 indices")

    try:
        return Mesh.from_arrays(vertices, triangles, assign_refinement_edges=False)
    except InvalidMeshError as e:
        raise MeshFormatError(f"Mesh file {path} describes an invalid mesh: {e}") from e


def write_mesh(mesh: Mesh, output_path: Union[str, Path]) -> int:
    """Write ``mesh`` in the text format and return the number of bytes written."""
    output_path = Path(output_path)
    lines = [f"vertices {mesh.n_vertices} triangles {mesh.n_triangles}"]
    lines.extend(f"{x!r} {y!r}" for x, y in mesh.vertices.tolist())
    lines.extend(f"{a} {b} {c}" for a, b, c in mesh.triangles.tolist())
    text = "\n".join(lines) + "\n"
    try:
        output_path.write_text(text)
    except OSError as e:
        raise MeshFormatError(f"Failed to write mesh to {output_path}: {e}") from e
    return len(text.encode())

"""Pytest configuration and fixtures for zarafem tests."""
import json
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np
import pytest

from zarafem.forms import ProblemSpec
from zarafem.mesh import Mesh, l_shape, refine, uniform_refine, unit_square
from zarafem.problems import linear_poisson, sine_gordon
from zarafem.space import build_space


@pytest.fixture
def rng():
    """Seeded random generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def square():
    """Unit square split along its diagonal."""
    return unit_square()


@pytest.fixture
def lshape():
    """L-shaped domain with six triangles."""
    return l_shape()


@pytest.fixture
def fine_square():
    """Unit square after four uniform refinements (32 triangles, 5x5 vertex grid)."""
    return uniform_refine(unit_square(), 4)


@pytest.fixture
def p1_space(fine_square):
    return build_space(fine_square, 1)


@pytest.fixture
def poisson():
    return linear_poisson()


@pytest.fixture
def sine():
    return sine_gordon()


@pytest.fixture
def pure_diffusion():
    """``-Laplace u = 0`` without reaction."""
    return ProblemSpec(name="pure-diffusion", source=lambda x, y: np.zeros_like(x))


@pytest.fixture
def temp_run_dir(tmp_path):
    """Temporary directory for run outputs."""
    run_dir = tmp_path / "runs"
    run_dir.mkdir()
    return run_dir


def adaptive_meshes(rng: np.random.Generator, mesh: Mesh, levels: int, fraction: float = 0.3):
    """Sequence of randomly refined meshes starting from ``mesh``."""
    meshes = [mesh]
    for _ in range(levels):
        current = meshes[-1]
        count = max(1, int(fraction * current.n_triangles))
        marked = rng.choice(current.n_triangles, size=count, replace=False)
        meshes.append(refine(current, marked))
    return meshes


def create_mesh_file(
    filepath: Path,
    vertices: Optional[Sequence[Sequence[float]]] = None,
    triangles: Optional[Sequence[Sequence[int]]] = None,
    header: Optional[str] = None,
    comment: Optional[str] = None,
) -> Dict[str, Any]:
    """
    Create a text mesh file for testing.

    Defaults to the unit square with its diagonal as refinement edge. Returns a dict
    with the file path and the data written.
    """
    if vertices is None:
        vertices = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
    if triangles is None:
        triangles = [(0, 2, 3), (2, 0, 1)]
    lines = []
    if comment is not None:
        lines.append(f"# {comment}")
    lines.append(header or f"vertices {len(vertices)} triangles {len(triangles)}")
    lines.extend(" ".join(str(float(c)) for c in v) for v in vertices)
    lines.extend(" ".join(str(int(i)) for i in t) for t in triangles)
    filepath.write_text("\n".join(lines) + "\n")
    return {
        "filepath": filepath,
        "vertices": np.asarray(vertices, dtype=float),
        "triangles": np.asarray(triangles, dtype=np.int64),
    }


def create_json_file(filepath: Path, data: Any) -> Path:
    """Write ``data`` as JSON and return the path."""
    filepath.write_text(json.dumps(data))
    return filepath


@pytest.fixture
def square_mesh_file(tmp_path):
    return create_mesh_file(tmp_path / "square.mesh")


@pytest.fixture
def custom_problem_data():
    """Custom reaction-diffusion problem on the L-shape."""
    return {
        "name": "custom-cubic",
        "domain": "l-shape",
        "nonlinearity": "cubic",
        "nonlinearity_scale": 2.0,
        "source": 1.0,
        "diffusion": [[2.0, 0.5], [0.5, 1.0]],
        "defaults": {"theta": 0.5},
    }


@pytest.fixture
def custom_problem_file(tmp_path, custom_problem_data):
    return create_json_file(tmp_path / "problem.json", custom_problem_data)

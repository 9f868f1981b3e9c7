"""Registry of model problems."""
import json
import logging
import math
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, Union

import numpy as np

from .exceptions import InvalidProblemError, UnknownProblemError
from .forms import ZERO_NONLINEARITY, Nonlinearity, ProblemSpec
from .mesh import BUILTIN_MESHES

logger = logging.getLogger(__name__)

PI = math.pi


def _cube(s):
    return s**3


def _cube_slope(s):
    return 3.0 * s**2


def _cube_primitive(s):
    return 0.25 * s**4


def _sine_primitive(s):
    return 1.0 - np.cos(s)


CUBIC = Nonlinearity("cubic", _cube, _cube_slope, _cube_primitive)
SINE = Nonlinearity("sine", np.sin, np.cos, _sine_primitive)
CUBIC_SINE = Nonlinearity(
    "cubic-sine",
    lambda s: s**3 + np.sin(s),
    lambda s: 3.0 * s**2 + np.cos(s),
    lambda s: 0.25 * s**4 + 1.0 - np.cos(s),
)

NONLINEARITIES: Dict[str, Nonlinearity] = {
    "zero": ZERO_NONLINEARITY,
    "cubic": CUBIC,
    "sine": SINE,
    "cubic-sine": CUBIC_SINE,
}


def sine_bump(x, y):
    """``u*(x, y) = sin(pi x) sin(pi y)``, zero on the boundary of the unit square."""
    return np.sin(PI * x) * np.sin(PI * y)


def sine_bump_gradient(x, y):
    return np.stack(
        (PI * np.cos(PI * x) * np.sin(PI * y), PI * np.sin(PI * x) * np.cos(PI * y)), axis=-1
    )


def sine_gordon() -> ProblemSpec:
    """``-Laplace u + u^3 + sin u = f`` on the unit square with ``u* = sin(pi x) sin(pi y)``."""

    def source(x, y):
        u = sine_bump(x, y)
        return 2.0 * PI**2 * u + u**3 + np.sin(u)

    return ProblemSpec(
        name="sine-gordon",
        source=source,
        nonlinearity=CUBIC_SINE,
        exact=sine_bump,
        exact_gradient=sine_bump_gradient,
        domain="unit-square",
        defaults={"delta": 0.3, "theta": 0.3, "lambda_lin": 0.7, "lambda_alg": 0.3},
    )


def singular_sine_gordon(eps: float = 1e-5) -> ProblemSpec:
    """``-eps Laplace u + u + u^3 + sin u = 1`` on the L-shape, with robust estimator weights."""
    return ProblemSpec(
        name="singular-sine-gordon",
        source=lambda x, y: np.ones_like(x),
        nonlinearity=CUBIC_SINE,
        eps=eps,
        reaction_weight=1.0,
        robust_estimator=True,
        domain="l-shape",
        defaults={"delta": 0.1, "theta": 0.3, "lambda_lin": 0.7, "lambda_alg": 0.7},
    )


def linear_poisson() -> ProblemSpec:
    """``-Laplace u = f`` on the unit square with ``u* = sin(pi x) sin(pi y)``."""
    return ProblemSpec(
        name="linear-poisson",
        source=lambda x, y: 2.0 * PI**2 * sine_bump(x, y),
        exact=sine_bump,
        exact_gradient=sine_bump_gradient,
        domain="unit-square",
        defaults={"delta": 1.0, "theta": 0.3, "lambda_lin": 0.7, "lambda_alg": 0.3},
    )


CUSTOM_KEYS = {
    "name",
    "domain",
    "eps",
    "reaction_weight",
    "nonlinearity",
    "nonlinearity_scale",
    "source",
    "diffusion",
    "robust_estimator",
    "defaults",
}


def load_custom_problem(source: Union[str, Path, Mapping[str, Any]]) -> ProblemSpec:
    """Build a problem from a JSON file or an already parsed mapping.

    Recognized keys: ``name``, ``domain`` (built-in mesh name), ``eps``,
    ``reaction_weight``, ``nonlinearity`` (one of ``NONLINEARITIES``),
    ``nonlinearity_scale``, ``source`` (constant), ``diffusion`` (scalar or 2x2),
    ``robust_estimator`` and ``defaults`` (algorithm parameters).

    Raises:
        FileNotFoundError: If the file does not exist.
        InvalidProblemError: If the description is malformed.
    """
    if isinstance(source, Mapping):
        data = dict(source)
    else:
        path = Path(source)
        if not path.exists():
            raise FileNotFoundError(f"Problem file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise InvalidProblemError(f"Problem file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise InvalidProblemError("Problem description must be a JSON object")

    unknown = set(data) - CUSTOM_KEYS
    if unknown:
        raise InvalidProblemError(f"Unknown problem keys: {', '.join(sorted(unknown))}")

    domain = data.get("domain", "unit-square")
    if domain not in BUILTIN_MESHES:
        raise InvalidProblemError(f"Unknown domain '{domain}'")
    name = data.get("nonlinearity", "zero")
    if name not in NONLINEARITIES:
        available = ", ".join(sorted(NONLINEARITIES))
        raise InvalidProblemError(f"Unknown nonlinearity '{name}'. Available: {available}")

    try:
        scale = float(data.get("nonlinearity_scale", 1.0))
        constant = float(data.get("source", 1.0))
        diffusion = np.asarray(data.get("diffusion", 1.0), dtype=float)
        eps = float(data.get("eps", 1.0))
        reaction_weight = float(data.get("reaction_weight", 0.0))
        defaults = {key: float(value) for key, value in data.get("defaults", {}).items()}
    except (TypeError, ValueError, AttributeError) as e:
        raise InvalidProblemError(f"Malformed problem description: {e}") from e
    if diffusion.shape not in ((), (2, 2)):
        raise InvalidProblemError("diffusion must be a scalar or a 2x2 matrix")
    if scale < 0:
        raise InvalidProblemError("nonlinearity_scale must be non-negative")

    spec = ProblemSpec(
        name=str(data.get("name", "custom")),
        source=lambda x, y: np.full(np.shape(x), constant),
        nonlinearity=NONLINEARITIES[name].scaled(scale),
        diffusion=diffusion,
        eps=eps,
        reaction_weight=reaction_weight,
        robust_estimator=bool(data.get("robust_estimator", False)),
        domain=domain,
        defaults=defaults,
    )
    spec.validate()
    return spec


PROBLEMS: Dict[str, Callable[..., ProblemSpec]] = {
    "sine-gordon": sine_gordon,
    "singular-sine-gordon": singular_sine_gordon,
    "linear-poisson": linear_poisson,
    "custom": load_custom_problem,
}


def make_problem(name: str, options: Optional[Mapping[str, Any]] = None) -> ProblemSpec:
    """Build a registered problem.

    Args:
        name: Registry key.
        options: ``eps`` for ``singular-sine-gordon``; ``path`` or ``data`` for ``custom``.

    Raises:
        UnknownProblemError: If ``name`` is not registered.
    """
    options = dict(options or {})
    if name not in PROBLEMS:
        available = ", ".join(sorted(PROBLEMS))
        raise UnknownProblemError(f"Problem '{name}' not found. Available problems: {available}")
    if name == "custom":
        if "data" in options:
            return load_custom_problem(options["data"])
        if "path" not in options:
            raise InvalidProblemError("custom problem needs a 'path' or 'data' option")
        return load_custom_problem(options["path"])
    if name == "singular-sine-gordon" and "eps" in options:
        return singular_sine_gordon(float(options["eps"]))
    return PROBLEMS[name]()

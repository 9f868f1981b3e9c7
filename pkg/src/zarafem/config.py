"""Run configuration: dataclass defaults < problem defaults < config file < flags.

Config files are flat JSON objects whose keys are ``RunConfig`` fields,
``AdaptiveParams`` fields or ``SolverConfig`` fields (the latter prefixed with
``solver_`` except ``solver`` itself, which selects the solver kind).
"""
import json
import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from .ailfem import AdaptiveParams
from .exceptions import ConfigError
from .linsolve import SolverConfig

logger = logging.getLogger(__name__)

NUM_WORKERS_ENV = "ZARAFEM_NUM_WORKERS"

PARAM_KEYS = {f.name for f in fields(AdaptiveParams)}
SOLVER_KEYS = {f"solver_{f.name}" for f in fields(SolverConfig) if f.name != "kind"}


@dataclass
class RunConfig:
    """Everything a ``run`` needs.

    Attributes:
        problem: registered problem name.
        problem_file: JSON description for the ``custom`` problem.
        eps: diffusion coefficient override for ``singular-sine-gordon``.
        mesh: built-in mesh name or mesh file; defaults to the problem's domain.
        params: adaptive algorithm parameters.
        solver: algebraic solver settings.
        output_dir: directory receiving ledger, summary and plot.
        prefix: file name prefix of the outputs.
        seed: random seed of the property checks.
        plot: also write an SVG convergence plot.
    """
    problem: str = "sine-gordon"
    problem_file: Optional[str] = None
    eps: Optional[float] = None
    mesh: Optional[str] = None
    params: AdaptiveParams = field(default_factory=AdaptiveParams)
    solver: SolverConfig = field(default_factory=SolverConfig)
    output_dir: str = "."
    prefix: str = "run"
    seed: int = 42
    plot: bool = False

    @property
    def ledger_path(self) -> Path:
        return Path(self.output_dir) / f"{self.prefix}_ledger.csv"

    @property
    def summary_path(self) -> Path:
        return Path(self.output_dir) / f"{self.prefix}_summary.json"

    @property
    def plot_path(self) -> Path:
        return Path(self.output_dir) / f"{self.prefix}_convergence.svg"


RUN_KEYS = {f.name for f in fields(RunConfig)} - {"params", "solver"}


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a flat JSON config file.

    Raises:
        FileNotFoundError: If the file does not exist.
        ConfigError: If it is not a flat JSON object with known keys.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must contain a JSON object")
    for key, value in data.items():
        if isinstance(value, (dict, list)):
            raise ConfigError(f"Config key '{key}' must be a scalar value")
    _check_keys(data)
    return data


def _check_keys(values: Mapping[str, Any]) -> None:
    known = RUN_KEYS | PARAM_KEYS | SOLVER_KEYS | {"solver"}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(sorted(unknown))}")


def build_run_config(*layers: Optional[Mapping[str, Any]]) -> RunConfig:
    """Merge flat key/value layers, later layers winning, into a validated ``RunConfig``.

    ``None`` values are skipped so that unset command-line flags do not override
    earlier layers.

    Raises:
        ConfigError: On unknown keys or invalid values.
    """
    merged: Dict[str, Any] = {}
    for layer in layers:
        if not layer:
            continue
        _check_keys(layer)
        merged.update({k: v for k, v in layer.items() if v is not None})

    run_values = {k: merged[k] for k in RUN_KEYS if k in merged}
    param_values = {k: merged[k] for k in PARAM_KEYS if k in merged}
    solver_values = {k[len("solver_"):]: merged[k] for k in SOLVER_KEYS if k in merged}
    if "solver" in merged:
        solver_values["kind"] = merged["solver"]

    try:
        params = AdaptiveParams(**param_values)
        solver = SolverConfig(**solver_values)
        return RunConfig(params=params, solver=solver, **run_values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def num_workers() -> int:
    """Worker processes for parameter sweeps, from ``ZARAFEM_NUM_WORKERS`` (default 1)."""
    raw = os.environ.get(NUM_WORKERS_ENV)
    if raw is None or raw.strip() == "":
        return 1
    try:
        workers = int(raw)
    except ValueError as e:
        raise ConfigError(f"{NUM_WORKERS_ENV} must be an integer, got {raw!r}") from e
    if workers < 1:
        raise ConfigError(f"{NUM_WORKERS_ENV} must be at least 1, got {workers}")
    return workers

"""Command-line front end: ``run``, ``sweep``, ``verify`` and ``mesh-info``."""
import argparse
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from .ailfem import run_adaptive
from .config import RunConfig, build_run_config, load_config_file, num_workers
from .exceptions import ConfigError, IterationCapError, ZarafemError
from .forms import ProblemSpec
from .ledger import (
    mark_blockwise_minima,
    summarize,
    weighted_cost,
    write_ledger_csv,
    write_summary_json,
    write_sweep_csv,
    write_sweep_matrix,
)
from .linsolve import SOLVER_KINDS
from .mesh import BUILTIN_MESHES, Mesh, builtin_mesh, read_mesh, uniform_refine
from .problems import PROBLEMS, make_problem
from .space import build_space
from .verify import FAULTS, format_report, run_checks

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# Command-line flag -> flat config key.
PROBLEM_FLAGS = {
    "problem": "problem",
    "problem_file": "problem_file",
    "eps": "eps",
    "mesh": "mesh",
    "p": "degree",
    "delta": "delta",
    "imin": "i_min",
    "tol": "stop_estimator_tol",
    "max_levels": "max_levels",
    "max_cost": "max_cost",
    "max_dofs": "max_dofs",
    "norm_cap": "norm_cap",
    "solver": "solver",
    "log_contraction": "solver_log_contraction",
}
RUN_FLAGS = {
    **PROBLEM_FLAGS,
    "theta": "theta",
    "lambda_lin": "lambda_lin",
    "lambda_alg": "lambda_alg",
    "uniform": "uniform",
    "output": "output_dir",
    "prefix": "prefix",
    "plot": "plot",
}


def load_mesh(name: str) -> Mesh:
    """Built-in mesh by name, otherwise a mesh file."""
    if name in BUILTIN_MESHES:
        return builtin_mesh(name)
    return read_mesh(name)


def make_run_problem(config: RunConfig) -> ProblemSpec:
    options: Dict[str, Any] = {}
    if config.eps is not None:
        options["eps"] = config.eps
    if config.problem_file is not None:
        options["path"] = config.problem_file
    return make_problem(config.problem, options)


def resolve_run(*layers: Optional[Mapping[str, Any]]) -> Tuple[RunConfig, ProblemSpec]:
    """Merge ``layers`` on top of the chosen problem's recommended parameters.

    Precedence: dataclass defaults < problem defaults < ``layers`` in order.
    """
    preliminary = build_run_config(*layers)
    problem = make_run_problem(preliminary)
    return build_run_config(problem.defaults, *layers), problem


def _flag_layer(args: argparse.Namespace, flags: Mapping[str, str]) -> Dict[str, Any]:
    layer = {key: getattr(args, flag, None) for flag, key in flags.items()}
    if layer.get("problem_file") is not None and layer.get("problem") is None:
        layer["problem"] = "custom"
    return layer


def _file_layer(args: argparse.Namespace) -> Dict[str, Any]:
    return load_config_file(args.config) if getattr(args, "config", None) else {}


def cmd_run(args: argparse.Namespace) -> int:
    """Run one adaptive experiment and write ledger, summary and optionally a plot."""
    config, problem = resolve_run(_file_layer(args), _flag_layer(args, RUN_FLAGS))
    mesh = load_mesh(config.mesh) if config.mesh else None
    output_dir = Path(config.output_dir)
    try:
        output_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"Cannot create output directory {output_dir}: {e}") from e

    logger.info("run %s on %s", problem.name, config.mesh or problem.domain)
    try:
        ledger = run_adaptive(problem, config.params, mesh, config.solver)
    except IterationCapError as e:
        partial = getattr(e, "ledger", None)
        if partial is not None:
            write_ledger_csv(partial.records, config.ledger_path)
            print(f"partial ledger: {config.ledger_path}")
        raise
    if config.mesh:
        ledger.mesh_name = config.mesh

    rows = write_ledger_csv(ledger.records, config.ledger_path)
    summary = summarize(ledger)
    write_summary_json(summary, config.summary_path)
    print(
        f"{ledger.termination_reason}: {len(ledger.levels)} levels, "
        f"eta={ledger.final_eta:.4e}, dofs={summary['final_dofs']}, "
        f"cost={ledger.total_cost}, rate vs cost {summary['rate_vs_cost']:.3f}"
    )
    print(f"ledger: {config.ledger_path} ({rows} rows)")
    print(f"summary: {config.summary_path}")
    if config.plot:
        from .plotting import plot_convergence

        print(f"plot: {plot_convergence(ledger, config.plot_path)}")
    return 0


def sweep_cell(layers: Sequence[Mapping[str, Any]]) -> Dict[str, Any]:
    """Run one parameter triple of a sweep; failures become NaN cells with a reason."""
    cell = dict(layers[-1])
    row: Dict[str, Any] = {
        "theta": cell["theta"],
        "lambda_lin": cell["lambda_lin"],
        "lambda_alg": cell["lambda_alg"],
        "weighted_cost": math.nan,
        "final_eta": math.nan,
        "total_cost": None,
        "levels": None,
        "termination_reason": "",
        "error": "",
    }
    try:
        config, problem = resolve_run(*layers)
        mesh = load_mesh(config.mesh) if config.mesh else None
        ledger = run_adaptive(problem, config.params, mesh, config.solver)
    except (ZarafemError, FileNotFoundError) as e:
        ledger = getattr(e, "ledger", None)
        row["termination_reason"] = ledger.termination_reason if ledger else "error"
        row["error"] = f"{type(e).__name__}: {e}"
        logger.warning("sweep cell %s failed: %s", cell, e)
        return row

    row.update(
        final_eta=ledger.final_eta,
        total_cost=ledger.total_cost,
        levels=len(ledger.levels),
        termination_reason=ledger.termination_reason,
    )
    if ledger.termination_reason == "tolerance":
        row["weighted_cost"] = weighted_cost(
            ledger.final_eta, ledger.total_cost, config.params.degree
        )
    else:
        row["error"] = f"estimator tolerance not reached ({ledger.termination_reason})"
    return row


def cmd_sweep(args: argparse.Namespace) -> int:
    """Weighted cost of every ``(theta, lambda_lin, lambda_alg)`` triple of the grids."""
    base = [{"track_exact_error": False}, _file_layer(args), _flag_layer(args, PROBLEM_FLAGS)]
    # Fail fast on an invalid base configuration before spawning workers.
    resolve_run(*base)
    tasks = [
        base + [{"theta": theta, "lambda_lin": lin, "lambda_alg": alg}]
        for alg in args.lambda_algs
        for theta in args.thetas
        for lin in args.lambda_lins
    ]
    workers = num_workers()
    logger.info("sweep of %d cells on %d worker(s)", len(tasks), workers)
    if workers == 1:
        rows = [sweep_cell(task) for task in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(sweep_cell, tasks))

    mark_blockwise_minima(rows)
    write_sweep_csv(rows, args.output)
    output = Path(args.output)
    matrix_path = output.with_name(f"{output.stem}_matrix{output.suffix or '.csv'}")
    write_sweep_matrix(rows, matrix_path)
    finite = sum(math.isfinite(r["weighted_cost"]) for r in rows)
    print(f"{len(rows)} cells ({finite} finite) written to {args.output}")
    print(f"weighted-cost matrices written to {matrix_path}")
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    """Run the property checks; exit code 1 if any of them fails."""
    config = build_run_config(_file_layer(args), {"seed": args.seed})
    results = run_checks(seed=config.seed, fault=args.fault)
    print(format_report(results))
    return 0 if all(r.passed for r in results) else 1


def cmd_mesh_info(args: argparse.Namespace) -> int:
    """Print size and quality figures of a built-in mesh or a mesh file."""
    mesh = uniform_refine(load_mesh(args.mesh), args.refine)
    space = build_space(mesh, args.p)
    print(f"mesh: {args.mesh}")
    print(f"refinements: {args.refine}")
    print(f"triangles: {mesh.n_triangles}")
    print(f"vertices: {mesh.n_vertices}")
    print(f"edges: {mesh.n_edges}")
    print(f"boundary edges: {len(mesh.boundary_edges)}")
    print(f"min angle: {mesh.min_angle():.2f} deg")
    print(f"max mesh size: {mesh.mesh_sizes.max():.6g}")
    print(f"free dofs (p={args.p}): {space.n_free}")
    return 0


def _grid(text: str) -> List[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"invalid grid '{text}': {e}") from e
    if not values:
        raise argparse.ArgumentTypeError("grid must not be empty")
    return values


def _add_problem_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="Flat JSON config file; flags override it.")
    parser.add_argument("--problem", choices=sorted(PROBLEMS), help="Model problem.")
    parser.add_argument("--problem-file", help="JSON description of a custom problem.")
    parser.add_argument("--eps", type=float, help="Diffusion of singular-sine-gordon.")
    parser.add_argument("--mesh", help="Built-in mesh name or mesh file.")
    parser.add_argument("--p", type=int, choices=(1, 2, 3), help="Polynomial degree.")
    parser.add_argument("--delta", type=float, help="Zarantonello damping.")
    parser.add_argument("--imin", type=int, help="Minimal algebraic steps per linearization.")
    parser.add_argument("--tol", type=float, help="Stop once the estimator is below this.")
    parser.add_argument("--max-levels", type=int, help="Last mesh level to solve on.")
    parser.add_argument("--max-cost", type=float, help="Cumulative cost budget.")
    parser.add_argument("--max-dofs", type=float, help="Largest admissible number of DOFs.")
    parser.add_argument("--norm-cap", type=float, help="Bound on the iterate energy norm.")
    parser.add_argument("--solver", choices=SOLVER_KINDS, help="Algebraic solver.")
    parser.add_argument(
        "--log-contraction",
        action="store_true",
        default=None,
        help="Measure per-step contraction against exact solves (slow).",
    )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--log-level",
        default="WARNING",
        choices=("DEBUG", "INFO", "WARNING", "ERROR"),
        help="Logging level (default: WARNING).",
    )
    common.add_argument(
        "-v", "--verbose", action="store_true", help="Shorthand for --log-level INFO."
    )

    parser = argparse.ArgumentParser(
        prog="zarafem",
        description="Adaptive iteratively linearized finite elements for semilinear problems.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", parents=[common], help="Run one adaptive experiment.")
    _add_problem_options(run)
    run.add_argument("--theta", type=float, help="Doerfler marking parameter.")
    run.add_argument("--lambda-lin", type=float, help="Linearization stopping parameter.")
    run.add_argument("--lambda-alg", type=float, help="Algebraic stopping parameter.")
    run.add_argument("--uniform", action="store_true", default=None, help="Refine uniformly.")
    run.add_argument("--output", help="Output directory (default: current directory).")
    run.add_argument("--prefix", help="Output file prefix (default: run).")
    run.add_argument("--plot", action="store_true", default=None, help="Write an SVG plot.")
    run.set_defaults(handler=cmd_run)

    sweep = commands.add_parser(
        "sweep", parents=[common], help="Weighted cost over parameter grids."
    )
    _add_problem_options(sweep)
    sweep.add_argument("--thetas", type=_grid, default=[0.3], help="Comma-separated thetas.")
    sweep.add_argument(
        "--lambda-lins", type=_grid, default=[0.7], help="Comma-separated lambda_lin values."
    )
    sweep.add_argument(
        "--lambda-algs", type=_grid, default=[0.3], help="Comma-separated lambda_alg values."
    )
    sweep.add_argument(
        "--output",
        default="sweep.csv",
        help="CSV file of the sweep table; the matrices go to <stem>_matrix.csv next to it.",
    )
    sweep.set_defaults(handler=cmd_sweep)

    verify = commands.add_parser("verify", parents=[common], help="Run the property checks.")
    verify.add_argument("--config", help="Flat JSON config file providing the seed.")
    verify.add_argument("--seed", type=int, help="Random seed (default: 42).")
    verify.add_argument("--fault", choices=FAULTS, help="Inject a known fault.")
    verify.set_defaults(handler=cmd_verify)

    info = commands.add_parser("mesh-info", parents=[common], help="Describe a mesh.")
    info.add_argument("mesh", nargs="?", default="unit-square", help="Mesh name or file.")
    info.add_argument("--refine", type=int, default=0, help="Uniform refinements first.")
    info.add_argument("--p", type=int, default=1, choices=(1, 2, 3), help="Degree for DOFs.")
    info.set_defaults(handler=cmd_mesh_info)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = "INFO" if args.verbose and args.log_level == "WARNING" else args.log_level
    logging.basicConfig(level=getattr(logging, level), format=LOG_FORMAT)
    try:
        return args.handler(args)
    except (ZarafemError, FileNotFoundError) as e:
        print(f"zarafem: error: {e}", file=sys.stderr)
        return 1

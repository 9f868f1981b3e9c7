"""Ledger files, cost bookkeeping and convergence-rate fits.

CSV schema, one row per iterate ``(level, k, i)``:

    level, k, i              indices, lexicographically increasing
    is_final_i, is_final_k   0/1 flags for final algebraic / linearization iterates
    dofs                     number of free DOFs
    n_triangles              number of triangles of the level's mesh
    eta                      estimator of the iterate
    energy                   energy of the iterate
    energy_norm              |||u^{k,i}|||
    norm_update              |||u^{k,i} - u^{k,i-1}|||
    cost                     cumulative sum of n_triangles up to this row
    seconds                  wall time since the start of the run
    exact_error              |||u* - u^{k,i}||| at final iterates, empty otherwise
"""
import csv
import json
import logging
import math
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np

from .ailfem import IterateRecord, RunLedger
from .exceptions import ConfigError

logger = logging.getLogger(__name__)

CSV_COLUMNS = [f.name for f in fields(IterateRecord)]

_INT_COLUMNS = {"level", "k", "i", "dofs", "n_triangles", "cost"}
_BOOL_COLUMNS = {"is_final_i", "is_final_k"}


def _format(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_ledger_csv(records: Sequence[IterateRecord], output_path: Union[str, Path]) -> int:
    """Write ledger rows and return the number of rows written.

    Raises:
        ConfigError: If the file cannot be written.
    """
    output_path = Path(output_path)
    try:
        with open(output_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(CSV_COLUMNS)
            for record in records:
                writer.writerow([_format(getattr(record, name)) for name in CSV_COLUMNS])
    except OSError as e:
        raise ConfigError(f"Failed to write ledger to {output_path}: {e}") from e
    return len(records)


def read_ledger_csv(path: Union[str, Path]) -> List[IterateRecord]:
    """Read rows written by ``write_ledger_csv``.

    Raises:
        FileNotFoundError: If the file does not exist.
        ConfigError: If the header or a row does not match the schema.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Ledger file not found: {path}")
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_COLUMNS:
            raise ConfigError(f"Unexpected ledger header in {path}: {reader.fieldnames}")
        records = []
        for line, row in enumerate(reader, start=2):
            try:
                values: Dict[str, Any] = {}
                for name in CSV_COLUMNS:
                    text = row[name]
                    if name in _BOOL_COLUMNS:
                        values[name] = text == "1"
                    elif name in _INT_COLUMNS:
                        values[name] = int(text)
                    elif name == "exact_error":
                        values[name] = float(text) if text else None
                    else:
                        values[name] = float(text)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"Malformed ledger row {line} in {path}: {e}") from e
            records.append(IterateRecord(**values))
    return records


def recompute_cost(records: Sequence[IterateRecord]) -> np.ndarray:
    """Cumulative cost ``sum of n_triangles`` over all rows up to each row."""
    return np.cumsum([r.n_triangles for r in records], dtype=np.int64)


def fit_rate(x: Sequence[float], y: Sequence[float], decades: float = 1.0) -> float:
    """Least-squares slope of ``log y`` over ``log x`` on the last ``decades`` of ``x``.

    Returns NaN when fewer than two usable points remain.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    usable = (x > 0) & (y > 0) & np.isfinite(x) & np.isfinite(y)
    x, y = x[usable], y[usable]
    if len(x) < 2:
        return math.nan
    window = x >= x.max() / 10.0**decades
    if window.sum() < 2:
        window = np.zeros(len(x), dtype=bool)
        window[np.argsort(x)[-2:]] = True
    if np.ptp(np.log(x[window])) == 0.0:
        return math.nan
    slope, _ = np.polyfit(np.log(x[window]), np.log(y[window]), 1)
    return float(slope)


def weighted_cost(eta: float, cost: float, degree: int) -> float:
    """``eta * cost^{p/2}`` of a terminated run."""
    return float(eta * cost ** (degree / 2.0))


def estimate_q_alg(records: Sequence[IterateRecord]) -> Dict[str, float]:
    """Update-ratio estimate of the algebraic contraction.

    Within every algebraic loop the ratio of consecutive updates
    ``|||u^{k,i} - u^{k,i-1}||| / |||u^{k,i-1} - u^{k,i-2}|||`` approximates ``q_alg``.
    """
    ratios = []
    for previous, current in zip(records, records[1:]):
        same_loop = (previous.level, previous.k) == (current.level, current.k)
        if same_loop and previous.norm_update > 0.0:
            ratios.append(current.norm_update / previous.norm_update)
    if not ratios:
        return {"median": math.nan, "max": math.nan, "samples": 0}
    return {
        "median": float(np.median(ratios)),
        "max": float(np.max(ratios)),
        "samples": len(ratios),
    }


def estimate_energy_contraction(records: Sequence[IterateRecord]) -> Dict[str, float]:
    """Ratios of consecutive energy decreases between final algebraic iterates of a level."""
    ratios = []
    finals = [r for r in records if r.is_final_i]
    for a, b, c in zip(finals, finals[1:], finals[2:]):
        if a.level == b.level == c.level:
            first = a.energy - b.energy
            second = b.energy - c.energy
            if first > 0.0 and second >= 0.0:
                ratios.append(second / first)
    if not ratios:
        return {"median": math.nan, "max": math.nan, "samples": 0}
    return {
        "median": float(np.median(ratios)),
        "max": float(np.max(ratios)),
        "samples": len(ratios),
    }


def summarize(ledger: RunLedger) -> Dict[str, Any]:
    """Summary of a run: final values, fitted rates and measured contractions."""
    finals = ledger.final_records()
    eta = [r.eta for r in finals]
    summary: Dict[str, Any] = {
        "problem": ledger.problem,
        "mesh": ledger.mesh_name,
        "solver": ledger.solver,
        "termination_reason": ledger.termination_reason,
        "levels": len(ledger.levels),
        "final_eta": ledger.final_eta,
        "final_dofs": finals[-1].dofs if finals else 0,
        "total_cost": ledger.total_cost,
        "total_seconds": ledger.records[-1].seconds if ledger.records else 0.0,
        "weighted_cost": weighted_cost(ledger.final_eta, ledger.total_cost, ledger.params.degree),
        "rate_vs_dofs": fit_rate([r.dofs for r in finals], eta),
        "rate_vs_cost": fit_rate([r.cost for r in finals], eta),
        "rate_vs_seconds": fit_rate([r.seconds for r in finals], eta),
        "max_iterate_norm": ledger.max_iterate_norm,
        "q_alg_estimate": estimate_q_alg(ledger.records),
        "energy_contraction_estimate": estimate_energy_contraction(ledger.records),
        "params": asdict(ledger.params),
    }
    if ledger.contraction_ratios:
        summary["measured_contraction"] = {
            "max": float(np.max(ledger.contraction_ratios)),
            "median": float(np.median(ledger.contraction_ratios)),
        }
    errors = [(r.cost, r.exact_error, r.eta) for r in finals if r.exact_error is not None]
    if errors:
        summary["final_exact_error"] = errors[-1][1]
        summary["rate_exact_error_vs_cost"] = fit_rate(
            [c for c, _, _ in errors], [e for _, e, _ in errors]
        )
        summary["reliability_constants"] = [e / n for _, e, n in errors if n > 0.0]
    q = summary["q_alg_estimate"]
    if ledger.solver == "pcg" and q["samples"] and q["max"] >= 1.0:
        logger.warning("PCG update ratios reach %.3f, q_alg is not uniform", q["max"])
    return summary


def _json_safe(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None if math.isnan(value) else ("inf" if value > 0 else "-inf")
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def write_summary_json(summary: Dict[str, Any], output_path: Union[str, Path]) -> int:
    """Write a summary as JSON and return the number of bytes written."""
    output_path = Path(output_path)
    text = json.dumps(_json_safe(summary), indent=2, sort_keys=True) + "\n"
    try:
        output_path.write_text(text)
    except OSError as e:
        raise ConfigError(f"Failed to write summary to {output_path}: {e}") from e
    return len(text.encode())


SWEEP_COLUMNS = [
    "theta",
    "lambda_lin",
    "lambda_alg",
    "weighted_cost",
    "final_eta",
    "total_cost",
    "levels",
    "termination_reason",
    "row_min",
    "col_min",
    "error",
]


def mark_blockwise_minima(rows: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
    """Flag the smallest weighted cost of every row and column of each ``lambda_alg`` block.

    Within a block rows are indexed by ``theta`` and columns by ``lambda_lin``.
    NaN cells never count as minima. Flags are set in place; ``rows`` is returned.
    """
    for row in rows:
        row["row_min"] = False
        row["col_min"] = False
    for flag, fixed in (("row_min", "theta"), ("col_min", "lambda_lin")):
        groups: Dict[Any, List[Dict[str, Any]]] = {}
        for row in rows:
            groups.setdefault((row["lambda_alg"], row[fixed]), []).append(row)
        for group in groups.values():
            finite = [r for r in group if math.isfinite(r["weighted_cost"])]
            if not finite:
                continue
            best = min(r["weighted_cost"] for r in finite)
            for r in finite:
                r[flag] = r["weighted_cost"] == best
    return rows


def write_sweep_csv(rows: Sequence[Dict[str, Any]], output_path: Union[str, Path]) -> int:
    """Write sweep cells in long format and return the number of rows written.

    Raises:
        ConfigError: If the file cannot be written.
    """
    output_path = Path(output_path)
    try:
        with open(output_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(SWEEP_COLUMNS)
            for row in rows:
                writer.writerow([_format(row.get(name)) for name in SWEEP_COLUMNS])
    except OSError as e:
        raise ConfigError(f"Failed to write sweep table to {output_path}: {e}") from e
    return len(rows)


def pivot_sweep(
    rows: Sequence[Dict[str, Any]],
) -> Dict[float, Tuple[List[float], List[float], np.ndarray]]:
    """Weighted costs as a ``theta x lambda_lin`` matrix for every ``lambda_alg``.

    Returns:
        ``{lambda_alg: (thetas, lambda_lins, matrix)}`` with sorted axes; grid points
        without a cell are NaN.
    """
    blocks: Dict[float, Tuple[List[float], List[float], np.ndarray]] = {}
    for alg in sorted({row["lambda_alg"] for row in rows}):
        block = [row for row in rows if row["lambda_alg"] == alg]
        thetas = sorted({row["theta"] for row in block})
        lins = sorted({row["lambda_lin"] for row in block})
        matrix = np.full((len(thetas), len(lins)), np.nan)
        for row in block:
            i, j = thetas.index(row["theta"]), lins.index(row["lambda_lin"])
            matrix[i, j] = row["weighted_cost"]
        blocks[alg] = (thetas, lins, matrix)
    return blocks


def _minimum_marks(row: Dict[str, Any]) -> str:
    return ("*" if row.get("row_min") else "") + ("^" if row.get("col_min") else "")


def write_sweep_matrix(rows: Sequence[Dict[str, Any]], output_path: Union[str, Path]) -> int:
    """Write one ``theta x lambda_lin`` weighted-cost matrix per ``lambda_alg`` block.

    Blocks are separated by an empty line. Each block starts with a header
    ``lambda_alg=<value>,<lambda_lin values...>`` followed by one line per theta.
    Row minima carry a ``*`` suffix and column minima a ``^`` suffix, taken from the
    ``row_min`` and ``col_min`` flags of :func:`mark_blockwise_minima`.

    Returns:
        Number of blocks written.

    Raises:
        ConfigError: If the file cannot be written.
    """
    output_path = Path(output_path)
    marks = {
        (row["lambda_alg"], row["theta"], row["lambda_lin"]): _minimum_marks(row) for row in rows
    }
    blocks = pivot_sweep(rows)
    try:
        with open(output_path, "w", newline="") as f:
            writer = csv.writer(f)
            for n, (alg, (thetas, lins, matrix)) in enumerate(blocks.items()):
                if n:
                    writer.writerow([])
                writer.writerow([f"lambda_alg={_format(alg)}"] + [_format(v) for v in lins])
                for theta, values in zip(thetas, matrix):
                    cells = [
                        _format(value) + marks.get((alg, theta, lin), "")
                        for lin, value in zip(lins, values)
                    ]
                    writer.writerow([_format(theta)] + cells)
    except OSError as e:
        raise ConfigError(f"Failed to write sweep matrix to {output_path}: {e}") from e
    return len(blocks)

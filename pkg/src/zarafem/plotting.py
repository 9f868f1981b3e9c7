"""Log-log convergence plots of a run (requires the ``plot`` extra)."""
import logging
from pathlib import Path
from typing import Union

from .ailfem import RunLedger
from .exceptions import ConfigError

logger = logging.getLogger(__name__)


def plot_convergence(ledger: RunLedger, output_path: Union[str, Path]) -> Path:
    """Write estimator and error of the final iterates over cost and wall time as SVG.

    Raises:
        ConfigError: If matplotlib is not installed or the file cannot be written.
    """
    try:
        from matplotlib.figure import Figure
    except ImportError as e:
        raise ConfigError("Plotting needs matplotlib: pip install 'zarafem[plot]'") from e

    output_path = Path(output_path)
    finals = ledger.final_records()
    cost = [r.cost for r in finals]
    seconds = [r.seconds for r in finals]
    eta = [r.eta for r in finals]
    errors = [(r.cost, r.seconds, r.exact_error) for r in finals if r.exact_error is not None]

    figure = Figure(figsize=(10, 4))
    by_cost, by_time = figure.subplots(1, 2)
    by_cost.plot(cost, eta, "o-", label="estimator")
    by_time.plot(seconds, eta, "o-", label="estimator")
    if errors:
        by_cost.plot([c for c, _, _ in errors], [e for _, _, e in errors], "s-", label="error")
        by_time.plot([s for _, s, _ in errors], [e for _, _, e in errors], "s-", label="error")
    if cost:
        degree = ledger.params.degree
        reference = [eta[0] * (c / cost[0]) ** (-degree / 2.0) for c in cost]
        by_cost.plot(cost, reference, "k--", label=f"cost^(-{degree}/2)")

    by_cost.set_xlabel("cost")
    by_time.set_xlabel("time [s]")
    for axes in (by_cost, by_time):
        axes.loglog()
        axes.grid(True, which="both", alpha=0.3)
        axes.legend(loc="lower left")
    figure.suptitle(f"{ledger.problem}, p={ledger.params.degree}")
    figure.tight_layout()

    try:
        figure.savefig(output_path, format="svg")
    except OSError as e:
        raise ConfigError(f"Failed to write plot to {output_path}: {e}") from e
    logger.info("wrote convergence plot %s", output_path)
    return output_path

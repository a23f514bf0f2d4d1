# app/services/reports.py

import logging
import os
from typing import Dict, List, Sequence, Tuple

import pandas as pd

from app.core.settings import SIGNIFICANT_DIGITS
from app.services.model import TransitionType
from app.services.simulator import SimulationEstimate
from app.services.solver import AggregateDistribution, PerformanceReport

logger = logging.getLogger(__name__)

REPORT_FILE = "report.csv"
PI_FILE = "pi.csv"
SIM_REPORT_FILE = "sim_report.csv"


class ReportError(Exception):
    """Raised when an output file cannot be written."""
    pass


def write_frame(frame: pd.DataFrame, path: str, significant_digits: int = SIGNIFICANT_DIGITS) -> str:
    """
    Write a table as comma-separated UTF-8 with a header row and LF line endings.

    :return: The written path
    :raises ReportError: If the file cannot be written
    """
    try:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        frame.to_csv(
            path,
            index=False,
            float_format=f"%.{significant_digits}g",
            lineterminator="\n",
            encoding="utf-8",
            na_rep="nan"
        )
    except OSError as e:
        raise ReportError(f"Failed to write {path}: {e}")
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def report_frame(report: PerformanceReport) -> pd.DataFrame:
    return pd.DataFrame(report.metric_rows(), columns=["metric", "class", "value"])


def pi_frame(pi: AggregateDistribution) -> pd.DataFrame:
    """One row per set of Ind ∪ {∅}: label, member names, π(𝒜), Δ(𝒜)."""
    g = pi.graph
    rows = []
    for class_set, probability in pi.items():
        delta_value = pi.delta_of(class_set)
        rows.append({
            "set": g.set_label(class_set),
            "members": " ".join(g.member_names(class_set)),
            "probability": probability,
            "delta": float("nan") if delta_value is None else delta_value,
        })
    return pd.DataFrame(rows, columns=["set", "members", "probability", "delta"])


def write_solve_outputs(
    report: PerformanceReport,
    out_dir: str,
    significant_digits: int = SIGNIFICANT_DIGITS
) -> Tuple[str, str]:
    """Write report.csv and pi.csv."""
    return (
        write_frame(report_frame(report), os.path.join(out_dir, REPORT_FILE), significant_digits),
        write_frame(pi_frame(report.pi), os.path.join(out_dir, PI_FILE), significant_digits),
    )


def write_simulation_outputs(
    estimate: SimulationEstimate,
    out_dir: str,
    significant_digits: int = SIGNIFICANT_DIGITS
) -> str:
    return write_frame(estimate.to_frame(), os.path.join(out_dir, SIM_REPORT_FILE), significant_digits)


# -------------------------------------------------------------------------
# Sweep tables: parameter,<class-1>,...,<class-n>,average
# -------------------------------------------------------------------------

def analytic_sweep_tables(points: Sequence[Tuple[float, PerformanceReport]]) -> Dict[str, pd.DataFrame]:
    """
    Per-metric tables across a parameter grid.

    Averages of waiting probabilities and waits are arrival-weighted; the
    transition table has one column per transition type.
    """
    if not points:
        return {}
    g = points[0][1].graph
    customers, servers = list(g.customer_names), list(g.server_names)
    kinds = [t.value for t in TransitionType]

    tables: Dict[str, List[dict]] = {
        "waiting_customers": [], "waiting_servers": [],
        "mean_wait_customers": [], "mean_wait_servers": [],
        "transitions": [], "pi_empty": [],
    }
    for parameter, r in points:
        tables["waiting_customers"].append(
            {"parameter": parameter, **dict(zip(customers, r.customer_waiting)), "average": r.average_customer_waiting}
        )
        tables["waiting_servers"].append(
            {"parameter": parameter, **dict(zip(servers, r.server_waiting)), "average": r.average_server_waiting}
        )
        tables["mean_wait_customers"].append(
            {"parameter": parameter, **dict(zip(customers, r.customer_mean_wait)), "average": r.average_customer_wait}
        )
        tables["mean_wait_servers"].append(
            {"parameter": parameter, **dict(zip(servers, r.server_mean_wait)), "average": r.average_server_wait}
        )
        tables["transitions"].append(
            {"parameter": parameter, **{t.value: p for t, p in r.transition_probs.items()}}
        )
        tables["pi_empty"].append({"parameter": parameter, "pi_empty": r.pi_empty, "min_delta": r.min_delta})

    columns = {
        "waiting_customers": ["parameter", *customers, "average"],
        "waiting_servers": ["parameter", *servers, "average"],
        "mean_wait_customers": ["parameter", *customers, "average"],
        "mean_wait_servers": ["parameter", *servers, "average"],
        "transitions": ["parameter", *kinds],
        "pi_empty": ["parameter", "pi_empty", "min_delta"],
    }
    return {name: pd.DataFrame(rows, columns=columns[name]) for name, rows in tables.items()}


def simulated_sweep_tables(points: Sequence[Tuple[float, SimulationEstimate]]) -> Dict[str, pd.DataFrame]:
    """The analytic sweep layout filled with across-replication means."""
    if not points:
        return {}
    g = points[0][1].graph
    customers, servers = list(g.customer_names), list(g.server_names)
    kinds = [t.value for t in TransitionType]

    def row(parameter: float, estimate: SimulationEstimate, metric: str, names: List[str], average: str) -> dict:
        values = {n: estimate.get(metric, n).mean for n in names}
        return {"parameter": parameter, **values, "average": estimate.get(*average.split(":")).mean}

    frames = {
        "sim_waiting_customers": pd.DataFrame(
            [row(p, e, "waiting_probability", customers, "average_waiting_probability:customers") for p, e in points],
            columns=["parameter", *customers, "average"]
        ),
        "sim_waiting_servers": pd.DataFrame(
            [row(p, e, "waiting_probability", servers, "average_waiting_probability:servers") for p, e in points],
            columns=["parameter", *servers, "average"]
        ),
        "sim_mean_wait_customers": pd.DataFrame(
            [row(p, e, "mean_wait", customers, "average_wait:customers") for p, e in points],
            columns=["parameter", *customers, "average"]
        ),
        "sim_mean_wait_servers": pd.DataFrame(
            [row(p, e, "mean_wait", servers, "average_wait:servers") for p, e in points],
            columns=["parameter", *servers, "average"]
        ),
        "sim_transitions": pd.DataFrame(
            [
                {"parameter": p, **{k: e.get("transition_frequency", k).mean for k in kinds}}
                for p, e in points
            ],
            columns=["parameter", *kinds]
        ),
    }
    return frames


def write_sweep_tables(
    tables: Dict[str, pd.DataFrame],
    out_dir: str,
    significant_digits: int = SIGNIFICANT_DIGITS
) -> List[str]:
    return [
        write_frame(frame, os.path.join(out_dir, f"{name}.csv"), significant_digits)
        for name, frame in tables.items()
    ]

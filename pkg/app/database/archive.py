# app/database/archive.py

import logging
import math
from typing import Any, Dict, List, Optional

from sqlalchemy.exc import SQLAlchemyError

from app.database.base import get_db
from app.database.models import MetricRecord, RunRecord
from app.services.simulator import SimulationEstimate
from app.services.solver import PerformanceReport

logger = logging.getLogger(__name__)


class ArchiveError(Exception):
    """Raised when a run cannot be stored in the results archive."""
    pass


def _finite(value: Optional[float]) -> Optional[float]:
    if value is None or not math.isfinite(value):
        return None
    return float(value)


def _store(run: RunRecord, rows: List[Dict[str, Any]]) -> int:
    run.metrics = rows
    for row in rows:
        run.metric_rows.append(MetricRecord(
            metric=row["metric"],
            class_name=row["class"],
            value=row["value"],
            stddev=row.get("stddev")
        ))
    try:
        with get_db() as db:
            db.add(run)
            db.commit()
            run_id = run.id
    except SQLAlchemyError as e:
        logger.error(f"Failed to archive {run.command} run of '{run.model_name}': {e}")
        raise ArchiveError(f"Failed to archive run: {e}")
    logger.debug(f"Archived {run.command} run {run_id} with {len(rows)} metrics")
    return run_id


def archive_report(
    report: PerformanceReport,
    command: str,
    model_name: str,
    parameter: Optional[float] = None
) -> int:
    """
    Store an analytic report.

    :return: The id of the new run
    :raises ArchiveError: On database failure
    """
    rows = [
        {"metric": r["metric"], "class": r["class"], "value": _finite(r["value"])}
        for r in report.metric_rows()
    ]
    run = RunRecord(
        command=command,
        model_name=model_name,
        parameter=parameter,
        pi_empty=report.pi_empty,
        min_delta=_finite(report.min_delta),
        stable=True
    )
    return _store(run, rows)


def archive_estimate(
    estimate: SimulationEstimate,
    model_name: str,
    parameter: Optional[float] = None,
    stable: Optional[bool] = None,
    command: str = "simulate"
) -> int:
    """
    Store a simulation estimate; value holds the across-replication mean.

    :return: The id of the new run
    :raises ArchiveError: On database failure
    """
    rows = [
        {"metric": metric, "class": name, "value": _finite(s.mean), "stddev": _finite(s.std)}
        for (metric, name), s in estimate.metrics.items()
    ]
    empty = estimate.metrics.get(("empty_frequency", ""))
    run = RunRecord(
        command=command,
        model_name=model_name,
        parameter=parameter,
        pi_empty=_finite(empty.mean) if empty else None,
        stable=stable
    )
    return _store(run, rows)

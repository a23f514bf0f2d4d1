# app/tasks/compare.py

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import pandas as pd

from app.core.settings import COMPARE_Z_THRESHOLD
from app.services.model import ArrivalModel, CompatibilityGraph, Side
from app.services.simulator import SimulationConfig, SimulationEstimate, simulate
from app.services.solver import PerformanceReport, solve

logger = logging.getLogger(__name__)


@dataclass
class ComparisonRow:
    metric: str
    class_name: str
    analytic: float
    sim_mean: float
    sim_stddev: float
    z: float

    def exceeds(self, threshold: float) -> bool:
        return not math.isnan(self.z) and abs(self.z) > threshold


@dataclass
class Comparison:
    rows: List[ComparisonRow] = field(default_factory=list)
    threshold: float = COMPARE_Z_THRESHOLD
    advisories: List[str] = field(default_factory=list)

    @property
    def failures(self) -> List[ComparisonRow]:
        return [r for r in self.rows if r.exceeds(self.threshold)]

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "metric": r.metric, "class": r.class_name, "analytic": r.analytic,
                    "sim_mean": r.sim_mean, "sim_stddev": r.sim_stddev, "z": r.z,
                }
                for r in self.rows
            ],
            columns=["metric", "class", "analytic", "sim_mean", "sim_stddev", "z"]
        )


def analytic_counterparts(report: PerformanceReport) -> List[Tuple[str, str, float]]:
    """(simulated metric, class, analytic value) for every metric both engines produce."""
    g = report.graph
    pairs: List[Tuple[str, str, float]] = []
    for side in (Side.CUSTOMER, Side.SERVER):
        for class_id in g.class_ids(side):
            pairs.append(("waiting_probability", g.class_name(class_id), report.waiting_probability(class_id)))
    for side in (Side.CUSTOMER, Side.SERVER):
        for class_id in g.class_ids(side):
            pairs.append(("mean_wait", g.class_name(class_id), report.mean_wait(class_id)))
    pairs += [
        ("average_waiting_probability", "customers", report.average_customer_waiting),
        ("average_waiting_probability", "servers", report.average_server_waiting),
        ("average_wait", "customers", report.average_customer_wait),
        ("average_wait", "servers", report.average_server_wait),
        ("mean_unmatched_total", "customers", report.total_customers),
    ]
    pairs += [("transition_frequency", t.value, p) for t, p in report.transition_probs.items()]
    pairs.append(("empty_frequency", "", report.pi_empty))
    pairs.append(("mean_return_time", "", 1.0 / report.pi_empty))
    return pairs


def z_score(analytic: float, mean: float, std: float, count: int) -> float:
    """(mean − analytic) / (std / √count); zero spread gives 0 on agreement and ±inf otherwise."""
    if count == 0 or math.isnan(mean):
        return math.nan
    error = std / math.sqrt(count)
    difference = mean - analytic
    if error == 0.0:
        if abs(difference) <= 1e-12 * max(1.0, abs(analytic)):
            return 0.0
        return math.copysign(math.inf, difference)
    return difference / error


def compare_metrics(
    report: PerformanceReport,
    estimate: SimulationEstimate,
    threshold: float = COMPARE_Z_THRESHOLD
) -> Comparison:
    comparison = Comparison(threshold=threshold, advisories=list(estimate.advisories))
    for metric, name, analytic in analytic_counterparts(report):
        summary = estimate.metrics.get((metric, name))
        if summary is None:
            continue
        comparison.rows.append(ComparisonRow(
            metric=metric,
            class_name=name,
            analytic=analytic,
            sim_mean=summary.mean,
            sim_stddev=summary.std,
            z=z_score(analytic, summary.mean, summary.std, summary.count)
        ))

    for row in comparison.failures:
        logger.warning(
            f"{row.metric}[{row.class_name}]: analytic {row.analytic:.6g}, "
            f"simulated {row.sim_mean:.6g} ± {row.sim_stddev:.3g} (z = {row.z:.2f})"
        )
    return comparison


def run_compare(
    graph: CompatibilityGraph,
    arrivals: ArrivalModel,
    config: Optional[SimulationConfig] = None,
    threshold: float = COMPARE_Z_THRESHOLD,
    **solver_options
) -> Tuple[PerformanceReport, SimulationEstimate, Comparison]:
    """
    Solve and simulate the same model and compare every shared metric.

    :raises UnstableModel: If the model is not stable
    """
    report = solve(graph, arrivals, **solver_options)
    estimate = simulate(graph, arrivals, config)
    comparison = compare_metrics(report, estimate, threshold)
    logger.info(
        f"Compared {len(comparison.rows)} metrics: "
        f"{len(comparison.failures)} with |z| > {threshold:g}"
    )
    return report, estimate, comparison

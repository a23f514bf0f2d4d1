# app/tasks/sweep.py

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import pandas as pd

from app.config.model_spec import ModelSpec
from app.core.settings import DEFAULT_MAX_INDEPENDENT_SETS, NEAR_INSTABILITY_THRESHOLD
from app.services.reports import analytic_sweep_tables, simulated_sweep_tables
from app.services.simulator import SimulationConfig, SimulationEstimate, simulate
from app.services.solver import PerformanceReport, SolverError, solve

logger = logging.getLogger(__name__)


class SweepError(Exception):
    """Raised when a grid point cannot be solved."""
    def __init__(self, parameter_name: str, parameter: float, reason: str):
        self.parameter_name = parameter_name
        self.parameter = parameter
        self.reason = reason
        super().__init__(f"{parameter_name} = {parameter:g}: {reason}")


@dataclass
class SweepOptions:
    max_sets: int = DEFAULT_MAX_INDEPENDENT_SETS
    near_instability_threshold: float = NEAR_INSTABILITY_THRESHOLD
    workers: int = 1
    simulation: Optional[SimulationConfig] = None


@dataclass
class SweepPoint:
    parameter: float
    report: Optional[PerformanceReport] = None
    estimate: Optional[SimulationEstimate] = None
    error: Optional[str] = None


@dataclass
class SweepResult:
    """Grid points in grid order."""
    spec: ModelSpec
    points: List[SweepPoint] = field(default_factory=list)

    def analytic_tables(self) -> Dict[str, pd.DataFrame]:
        return analytic_sweep_tables([(p.parameter, p.report) for p in self.points])

    def simulated_tables(self) -> Dict[str, pd.DataFrame]:
        return simulated_sweep_tables([(p.parameter, p.estimate) for p in self.points if p.estimate is not None])

    def tables(self) -> Dict[str, pd.DataFrame]:
        return {**self.analytic_tables(), **self.simulated_tables()}


def evaluate_point(spec: ModelSpec, parameter: float, options: SweepOptions) -> SweepPoint:
    """Solve, and optionally simulate, the model at one grid value."""
    graph, arrivals = spec.build(parameter)
    try:
        report = solve(
            graph,
            arrivals,
            max_sets=options.max_sets,
            near_instability_threshold=options.near_instability_threshold
        )
    except SolverError as e:
        logger.error(f"{spec.sweep.parameter} = {parameter:g}: {e}")
        return SweepPoint(parameter, error=str(e))

    estimate = None
    if options.simulation is not None:
        estimate = simulate(graph, arrivals, options.simulation)
    logger.debug(f"{spec.sweep.parameter} = {parameter:g}: π(∅) = {report.pi_empty:.6g}")
    return SweepPoint(parameter, report=report, estimate=estimate)


def _evaluate_task(args) -> SweepPoint:
    return evaluate_point(*args)


def run_sweep(spec: ModelSpec, options: Optional[SweepOptions] = None) -> SweepResult:
    """
    Evaluate every grid value of the model's sweep.

    Points may run in a process pool; results are kept in grid order.

    :raises SweepError: For the first grid value (in grid order) that cannot be solved
    """
    options = options or SweepOptions()
    grid = spec.grid()
    logger.info(
        f"Sweeping {spec.sweep.parameter} over {len(grid)} values "
        f"({grid[0]:g} .. {grid[-1]:g}) for model '{spec.name}'"
    )

    if options.workers > 1 and len(grid) > 1:
        # Replications stay sequential inside pool workers.
        if options.simulation is not None and options.simulation.workers > 1:
            options = dataclasses.replace(options, simulation=dataclasses.replace(options.simulation, workers=1))
        with ProcessPoolExecutor(max_workers=options.workers) as pool:
            points = list(pool.map(_evaluate_task, [(spec, p, options) for p in grid]))
    else:
        points = [evaluate_point(spec, p, options) for p in grid]

    for point in points:
        if point.error is not None:
            raise SweepError(spec.sweep.parameter, point.parameter, point.error)
    return SweepResult(spec, points)

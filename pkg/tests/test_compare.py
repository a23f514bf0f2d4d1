# tests/test_compare.py

import math

import pytest

from app.core.settings import COMPARE_Z_THRESHOLD
from app.services.simulator import SimulationConfig, simulate
from app.services.solver import UnstableModel, solve
from app.services.model import ArrivalModel
from app.tasks.compare import analytic_counterparts, compare_metrics, run_compare, z_score
from tests.factories import k11, n_graph, path_model


def test_z_score():
    assert z_score(1.0, 1.2, 0.4, 16) == pytest.approx(2.0)
    assert z_score(0.5, 0.5, 0.0, 3) == 0.0
    assert z_score(0.5, 0.6, 0.0, 3) == math.inf
    assert math.isnan(z_score(0.5, math.nan, 0.1, 3))


def test_counterparts_cover_both_sides():
    report = solve(*n_graph())
    names = {(metric, name) for metric, name, _ in analytic_counterparts(report)}

    assert ("waiting_probability", "B") in names
    assert ("mean_wait", "2") in names
    assert ("transition_frequency", "equal/pm") in names
    assert ("mean_return_time", "") in names


def test_k11_compare_is_exact():
    graph, arrivals = k11()
    config = SimulationConfig(seed=1, warmup_slots=10, measured_slots=500, replications=3)
    _, _, comparison = run_compare(graph, arrivals, config)

    assert comparison.passed
    assert all(row.z == 0.0 for row in comparison.rows)


@pytest.mark.slow
def test_path_model_compare_passes():
    graph, arrivals = path_model(0.5)
    config = SimulationConfig(seed=3, warmup_slots=20_000, measured_slots=200_000, replications=20, workers=4)
    report, estimate, comparison = run_compare(graph, arrivals, config)

    assert comparison.threshold == COMPARE_Z_THRESHOLD
    assert comparison.passed, [(r.metric, r.class_name, r.z) for r in comparison.failures]
    assert len(comparison.rows) == len(analytic_counterparts(report))
    assert not estimate.unstable_advisory


def test_large_deviation_fails():
    graph, arrivals = n_graph()
    shifted = solve(graph, ArrivalModel((0.5, 0.5), (0.4, 0.6)))
    estimate = simulate(graph, arrivals, SimulationConfig(seed=3, warmup_slots=1_000, measured_slots=20_000, replications=5))

    comparison = compare_metrics(shifted, estimate)
    assert not comparison.passed
    assert list(comparison.to_frame().columns) == ["metric", "class", "analytic", "sim_mean", "sim_stddev", "z"]


def test_unstable_model_is_refused():
    graph, _ = n_graph()
    with pytest.raises(UnstableModel):
        run_compare(graph, ArrivalModel((0.2, 0.8), (0.25, 0.75)), SimulationConfig(measured_slots=10, replications=1))

# tests/test_solver.py

import logging
import math

import numpy as np
import pytest

from app.services.model import ArrivalModel, ClassId, ClassSet, Side, TransitionType
from app.services.solver import (
    NumericalUnderflow,
    UnstableModel,
    mean_unmatched_per_class,
    mean_unmatched_total,
    recursion_identity_residual,
    solve,
    solve_pi,
    transition_type_probabilities,
    waiting_probabilities,
)
from tests.factories import k11, n_graph, path_model, random_stable_models

EXACT = 1e-12


def test_n_graph_exact_values():
    graph, arrivals = n_graph()
    report = solve(graph, arrivals)

    assert report.pi_empty == pytest.approx(2 / 3, abs=EXACT)
    assert report.pi[ClassSet.of([1], [0])] == pytest.approx(1 / 3, abs=EXACT)
    assert report.customer_waiting == pytest.approx((0.0, 0.5), abs=EXACT)
    assert report.server_waiting == pytest.approx((2 / 3, 0.0), abs=EXACT)
    assert report.customer_mean_unmatched == pytest.approx((0.0, 0.5), abs=EXACT)
    assert report.total_customers == pytest.approx(0.5, abs=EXACT)
    assert report.total_servers == pytest.approx(0.5, abs=EXACT)
    assert report.mean_wait(ClassId.customer(1)) == pytest.approx(1.0, abs=EXACT)

    expected = {
        TransitionType.MINUS_MINUS: 1 / 8,
        TransitionType.PM_EQUAL: 1 / 8,
        TransitionType.EQUAL_PM: 1 / 24,
        TransitionType.EQUAL_EQUAL: 7 / 12,
        TransitionType.PLUS_PLUS: 1 / 8,
    }
    for kind, value in expected.items():
        assert report.transition_probs[kind] == pytest.approx(value, abs=EXACT)


def test_n_graph_conditional_mean():
    graph, arrivals = n_graph()
    pi = solve_pi(graph, arrivals)
    means = mean_unmatched_per_class(graph, arrivals, pi, ClassId.customer(1))

    assert means.total == pytest.approx(0.5, abs=EXACT)
    assert means.conditional(ClassSet.of([1], [0])) == pytest.approx(1.5, abs=EXACT)
    assert means.conditional(ClassSet()) == 0.0


def test_k11_is_always_matched():
    graph, arrivals = k11()
    report = solve(graph, arrivals)

    assert report.pi_empty == 1.0
    assert report.customer_waiting == (0.0,)
    assert report.server_waiting == (0.0,)
    assert report.total_customers == 0.0
    assert report.transition_probs[TransitionType.EQUAL_EQUAL] == pytest.approx(1.0)
    assert report.min_delta is None


def test_unstable_model_is_refused():
    graph, _ = n_graph()
    with pytest.raises(UnstableModel) as excinfo:
        solve(graph, ArrivalModel((0.2, 0.8), (0.25, 0.75)))
    assert excinfo.value.witness == ClassSet.of([1], [0])
    assert excinfo.value.delta < 0
    assert "{2,A}" in str(excinfo.value)


def test_near_instability_warning():
    graph, _ = n_graph()
    arrivals = ArrivalModel((0.5, 0.5), (0.5 - 1e-10, 0.5 + 1e-10))
    report = solve(graph, arrivals)

    assert report.warnings
    assert "Near instability" in report.warnings[0]
    assert report.min_delta == pytest.approx(1e-10, rel=1e-3)


def test_normalization_constant_is_the_inverse_of_pi_empty():
    graph, arrivals = n_graph()
    pi = solve_pi(graph, arrivals)

    assert pi.normalization_constant == pytest.approx(1.5, abs=EXACT)
    assert pi.total == pytest.approx(1.0, abs=EXACT)


def test_rescaling_keeps_the_distribution(monkeypatch, caplog):
    graph, arrivals = path_model(0.3)
    reference = solve_pi(graph, arrivals)

    monkeypatch.setattr("app.services.solver.RESCALE_UPPER", 1.05)
    with caplog.at_level(logging.WARNING, logger="app.services.solver"):
        rescaled = solve_pi(graph, arrivals)

    assert "Rescaled the unnormalized recursion" in caplog.text
    for class_set, value in reference.items():
        assert rescaled[class_set] == pytest.approx(value, abs=1e-15)


def test_overflowing_recursion_raises(monkeypatch):
    graph, arrivals = n_graph()
    monkeypatch.setattr(
        "app.services.solver.compute_deltas",
        lambda g, a, sets: {s: 5e-324 for s in sets if s}
    )
    with pytest.raises(NumericalUnderflow, match="not finite"):
        solve_pi(graph, arrivals)


def test_transition_balance_and_recursion_identity_on_random_models():
    rng = np.random.default_rng(12345)
    for graph, arrivals in random_stable_models(rng, 1000):
        pi = solve_pi(graph, arrivals)
        probabilities, residual = transition_type_probabilities(graph, arrivals, pi)

        assert abs(residual) <= 1e-10
        assert math.fsum(probabilities.values()) == pytest.approx(1.0, abs=1e-10)
        assert recursion_identity_residual(graph, arrivals, pi) <= 1e-10
        assert pi.total == pytest.approx(1.0, abs=1e-12)


def test_aggregate_identities_on_random_models():
    rng = np.random.default_rng(99)
    for graph, arrivals in random_stable_models(rng, 100):
        report = solve(graph, arrivals)

        assert report.total_customers == pytest.approx(report.total_servers, rel=1e-9, abs=1e-12)
        assert math.fsum(report.customer_mean_unmatched) == pytest.approx(report.total_customers, rel=1e-9, abs=1e-12)
        assert math.fsum(report.server_mean_unmatched) == pytest.approx(report.total_servers, rel=1e-9, abs=1e-12)
        assert report.average_customer_wait == pytest.approx(report.total_customers)
        for waiting in report.customer_waiting + report.server_waiting:
            assert 0.0 <= waiting <= 1.0
        # An arriving customer waits in a +/+ or ±/= transition.
        appended = report.transition_probs[TransitionType.PLUS_PLUS] + report.transition_probs[TransitionType.PM_EQUAL]
        assert report.average_customer_waiting == pytest.approx(appended, abs=1e-10)


def test_server_metrics_match_the_mirrored_model():
    rng = np.random.default_rng(5)
    for graph, arrivals in random_stable_models(rng, 50):
        report = solve(graph, arrivals)
        mirrored = solve(graph.mirrored(), arrivals.mirrored())

        assert mirrored.pi_empty == pytest.approx(report.pi_empty, rel=1e-12)
        assert mirrored.customer_waiting == pytest.approx(report.server_waiting, abs=1e-12)
        assert mirrored.customer_mean_unmatched == pytest.approx(report.server_mean_unmatched, rel=1e-9, abs=1e-12)
        assert mirrored.transition_probs[TransitionType.PM_EQUAL] == pytest.approx(
            report.transition_probs[TransitionType.EQUAL_PM], abs=1e-12
        )


def test_pi_mirrored_is_the_distribution_of_the_mirrored_model():
    graph, arrivals = path_model(0.3)
    pi = solve_pi(graph, arrivals)
    direct = solve_pi(graph.mirrored(), arrivals.mirrored())
    mirrored = pi.mirrored()

    for class_set, value in direct.items():
        assert mirrored[class_set] == pytest.approx(value, rel=1e-10)


def _path_relabel(report):
    """Metrics after the relabeling 1↔4, 2↔3, A↔E, B↔D."""
    return (
        tuple(reversed(report.customer_waiting)),
        tuple(reversed(report.server_waiting)),
        tuple(reversed(report.customer_mean_wait)),
        tuple(reversed(report.server_mean_wait)),
    )


@pytest.mark.parametrize("rho", [0.05, 0.2, 0.35, 0.45])
def test_path_model_symmetry(rho):
    report = solve(*path_model(rho))
    opposite = solve(*path_model(1 - rho))

    relabeled = _path_relabel(opposite)
    assert report.customer_waiting == pytest.approx(relabeled[0], abs=1e-10)
    assert report.server_waiting == pytest.approx(relabeled[1], abs=1e-10)
    assert report.customer_mean_wait == pytest.approx(relabeled[2], rel=1e-10)
    assert report.server_mean_wait == pytest.approx(relabeled[3], rel=1e-10)
    assert report.pi_empty == pytest.approx(opposite.pi_empty, abs=1e-10)
    for kind in TransitionType:
        assert report.transition_probs[kind] == pytest.approx(opposite.transition_probs[kind], abs=1e-10)


def test_waiting_probabilities_and_totals_are_consistent_with_solve():
    graph, arrivals = path_model(0.5)
    pi = solve_pi(graph, arrivals)
    customers, servers = waiting_probabilities(graph, arrivals, pi)
    totals = mean_unmatched_total(graph, arrivals, pi)
    report = solve(graph, arrivals)

    assert customers == pytest.approx(report.customer_waiting)
    assert servers == pytest.approx(report.server_waiting)
    assert totals.total_customers == pytest.approx(report.total_customers)
    assert len(pi) == 43


def test_metric_rows_cover_every_class():
    graph, arrivals = n_graph()
    rows = solve(graph, arrivals).metric_rows()
    waiting = {r["class"]: r["value"] for r in rows if r["metric"] == "waiting_probability"}

    assert set(waiting) == {"1", "2", "A", "B"}
    assert rows[0] == {"metric": "pi_empty", "class": "", "value": pytest.approx(2 / 3)}
    assert {"metric": "min_delta", "class": "{2,A}", "value": pytest.approx(0.25)} in rows
    assert sum(1 for r in rows if r["metric"] == "transition_probability") == len(TransitionType)
    assert all(isinstance(r["value"], float) for r in rows)


def test_server_side_class_means_use_server_indices():
    graph, arrivals = n_graph()
    pi = solve_pi(graph, arrivals)
    means = mean_unmatched_per_class(graph, arrivals, pi, ClassId(Side.SERVER, 0))

    assert means.total == pytest.approx(0.5, abs=EXACT)
    assert set(means.table) == {ClassSet.of([1], [0])}

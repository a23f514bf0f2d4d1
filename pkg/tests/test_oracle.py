# tests/test_oracle.py

import numpy as np
import pytest

from app.services.model import ArrivalModel, ClassId, ClassSet, CompatibilityGraph, Side, TransitionType
from app.services.oracle import (
    ExplicitState,
    OracleError,
    TruncationDivergence,
    enumerate_explicit_states,
    explicit_successor,
    product_form_weight,
    truncated_aggregates,
)
from app.services.simulator import QueueState, step
from app.services.solver import solve
from tests.factories import k11, n_graph, path_model, random_model, random_stable_models

ROUNDING = 1e-12


def test_product_form_weight_examples():
    graph, arrivals = n_graph()
    assert product_form_weight(ExplicitState(), graph, arrivals) == 1.0
    assert product_form_weight(ExplicitState((1,), (0,)), graph, arrivals) == pytest.approx(1 / 3)
    assert product_form_weight(ExplicitState((1, 1), (0, 0)), graph, arrivals) == pytest.approx(1 / 9)


def test_n_graph_truncated_sum_is_geometric():
    graph, arrivals = n_graph()
    oracle = truncated_aggregates(graph, arrivals, max_length=30)
    two_a = ClassSet.of([1], [0])

    ratio = oracle.unnormalized[two_a] / oracle.unnormalized[ClassSet()]
    assert ratio == pytest.approx((1 - 3.0 ** -30) / 2, abs=5e-15)
    assert oracle.tail_ratio == pytest.approx(1 / 3)
    assert oracle.pi_of(two_a) == pytest.approx(1 / 3, abs=1e-12)
    assert oracle.mean_unmatched(ClassId.customer(1)) == pytest.approx(0.5, abs=1e-12)
    assert oracle.transition_probs[TransitionType.EQUAL_PM] == pytest.approx(1 / 24, abs=1e-12)


def test_k11_oracle_has_only_the_empty_state():
    graph, arrivals = k11()
    oracle = truncated_aggregates(graph, arrivals, max_length=5)

    assert oracle.pi == {ClassSet(): 1.0}
    assert oracle.tail_bound == 0.0
    assert oracle.transition_probs[TransitionType.EQUAL_EQUAL] == 1.0


def test_enumerated_states_are_members():
    graph, _ = path_model(0.5)
    states = list(enumerate_explicit_states(graph, 2))

    assert states[0] == ExplicitState()
    assert len(states) == len(set(states))
    assert all(s.is_member(graph) for s in states)
    assert [len(s.c) for s in states] == sorted(len(s.c) for s in states)
    assert sum(1 for s in states if len(s.c) == 1) == sum(
        1 for i in range(4) for k in range(5) if not graph.compatible(i, k)
    )


def test_unnormalized_mass_grows_with_the_truncation():
    graph, arrivals = path_model(0.4)
    previous = 0.0
    for length in (2, 4, 6):
        total = sum(truncated_aggregates(graph, arrivals, length).unnormalized.values())
        assert total > previous
        previous = total


def _check_explicit_step_against_simulator(graph: CompatibilityGraph, max_length: int):
    for state in enumerate_explicit_states(graph, max_length):
        for i in range(graph.customer_count):
            for k in range(graph.server_count):
                successor, kind = explicit_successor(state, i, k, graph)
                queue = QueueState.from_sequences(graph, list(state.c), list(state.d))
                _, transition, _ = step(queue, i, k, len(state.c) + 1)

                assert transition is kind
                assert queue.customer_sequence() == list(successor.c)
                assert queue.server_sequence() == list(successor.d)
                assert successor.is_member(graph)


def test_explicit_step_agrees_with_simulator_on_the_n_graph():
    graph, _ = n_graph()
    _check_explicit_step_against_simulator(graph, 3)


def test_explicit_step_agrees_with_simulator_on_the_path_model():
    graph, _ = path_model(0.5)
    _check_explicit_step_against_simulator(graph, 2)


def test_explicit_step_agrees_with_simulator_on_random_models():
    rng = np.random.default_rng(31)
    for _ in range(10):
        graph, _ = random_model(rng, 4, 4)
        _check_explicit_step_against_simulator(graph, 2)


def _oracle_at_a_settled_length(graph, arrivals, max_length: int):
    try:
        return truncated_aggregates(graph, arrivals, max_length=max_length)
    except TruncationDivergence:
        # Near the stability boundary the level totals can still be growing here.
        return truncated_aggregates(graph, arrivals, max_length=4 * max_length)


def _assert_oracle_matches_solver(graph, arrivals, oracle):
    report = solve(graph, arrivals)

    for class_set, value in report.pi.items():
        assert oracle.pi_of(class_set) == pytest.approx(value, abs=oracle.tail_bound + ROUNDING)
    for kind in TransitionType:
        assert oracle.transition_probs[kind] == pytest.approx(
            report.transition_probs[kind], abs=oracle.tail_bound + ROUNDING
        )
    for side in (Side.CUSTOMER, Side.SERVER):
        for class_id in graph.class_ids(side):
            assert oracle.mean_unmatched(class_id) == pytest.approx(
                report.mean_unmatched(class_id), abs=oracle.mean_tail_bound + ROUNDING
            )


@pytest.mark.slow
def test_oracle_agrees_with_the_solver_on_random_models():
    rng = np.random.default_rng(4242)
    for graph, arrivals in random_stable_models(rng, 100, max_customers=4, max_servers=4):
        oracle = _oracle_at_a_settled_length(graph, arrivals, 40)
        _assert_oracle_matches_solver(graph, arrivals, oracle)


def test_oracle_agrees_with_the_solver_on_the_path_model():
    graph, arrivals = path_model(0.5)
    oracle = truncated_aggregates(graph, arrivals, max_length=60)

    assert oracle.tail_bound < 1e-6
    assert len(oracle.pi) == 43
    _assert_oracle_matches_solver(graph, arrivals, oracle)


def test_unstable_model_diverges():
    graph, _ = n_graph()
    with pytest.raises(TruncationDivergence) as excinfo:
        truncated_aggregates(graph, ArrivalModel((0.2, 0.8), (0.25, 0.75)), max_length=10)
    assert excinfo.value.total > excinfo.value.previous_total


def test_oracle_refuses_large_models():
    graph = CompatibilityGraph(7, 6, frozenset((i, k) for i in range(7) for k in range(6)))
    arrivals = ArrivalModel((1 / 7,) * 7, (1 / 6,) * 6)
    with pytest.raises(OracleError, match="I \\+ K"):
        truncated_aggregates(graph, arrivals)

# app/services/oracle.py

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

from app.core.settings import DEFAULT_ORACLE_MAX_LENGTH, MAX_ORACLE_CLASS_COUNT
from app.services.model import (
    ArrivalModel,
    ClassId,
    ClassSet,
    CompatibilityGraph,
    Side,
    TransitionType,
    mask_from_indices,
)

logger = logging.getLogger(__name__)


class OracleError(Exception):
    """Base exception for the brute-force oracle."""
    pass


class TruncationDivergence(OracleError):
    """Raised when level totals stop decreasing at the truncation length."""
    def __init__(self, level: int, previous_total: float, total: float):
        self.level = level
        self.previous_total = previous_total
        self.total = total
        super().__init__(
            f"Level totals are not decreasing at length {level} "
            f"({previous_total:.6g} -> {total:.6g}); model unstable or truncation too short"
        )


@dataclass(frozen=True)
class ExplicitState:
    """Queue contents (c, d), oldest first."""
    c: Tuple[int, ...] = ()
    d: Tuple[int, ...] = ()

    def is_member(self, graph: CompatibilityGraph) -> bool:
        """Membership in Π: equal lengths and no compatible (c_p, d_q)."""
        if len(self.c) != len(self.d):
            return False
        return all(not graph.compatible(i, k) for i in self.c for k in self.d)

    def class_set(self) -> ClassSet:
        return ClassSet(mask_from_indices(self.c), mask_from_indices(self.d))

    def count(self, class_id: ClassId) -> int:
        items = self.c if class_id.side is Side.CUSTOMER else self.d
        return sum(1 for x in items if x == class_id.index)


def product_form_weight(state: ExplicitState, graph: CompatibilityGraph, arrivals: ArrivalModel) -> float:
    """
    Unnormalized stationary measure of an explicit state:

        Π_p [λ_{c_p} / μ(𝒦({c_1..c_p}))] · [μ_{d_p} / λ(ℐ({d_1..d_p}))]
    """
    weight = 1.0
    customers, servers = 0, 0
    for i, k in zip(state.c, state.d):
        customers |= 1 << i
        servers |= 1 << k
        weight *= arrivals.lam[i] / arrivals.mu_sum(graph.servers_of(customers))
        weight *= arrivals.mu[k] / arrivals.lambda_sum(graph.customers_of(servers))
    return weight


def explicit_successor(
    state: ExplicitState,
    i: int,
    k: int,
    graph: CompatibilityGraph
) -> Tuple[ExplicitState, TransitionType]:
    """
    One first-come-first-matched step on explicit sequences, scanning each
    queue from its oldest item.
    """
    c, d = list(state.c), list(state.d)
    server_at = next((q for q, server in enumerate(d) if graph.compatible(i, server)), None)
    customer_at = next((p for p, customer in enumerate(c) if graph.compatible(customer, k)), None)

    if server_at is not None:
        del d[server_at]
    if customer_at is not None:
        del c[customer_at]

    if server_at is not None and customer_at is not None:
        transition = TransitionType.MINUS_MINUS
    elif server_at is not None:
        d.append(k)
        transition = TransitionType.EQUAL_PM
    elif customer_at is not None:
        c.append(i)
        transition = TransitionType.PM_EQUAL
    elif graph.compatible(i, k):
        transition = TransitionType.EQUAL_EQUAL
    else:
        c.append(i)
        d.append(k)
        transition = TransitionType.PLUS_PLUS
    return ExplicitState(tuple(c), tuple(d)), transition


def explicit_transition_type(state: ExplicitState, i: int, k: int, graph: CompatibilityGraph) -> TransitionType:
    return explicit_successor(state, i, k, graph)[1]


def _check_size(graph: CompatibilityGraph) -> None:
    if graph.class_count > MAX_ORACLE_CLASS_COUNT:
        raise OracleError(
            f"Oracle is limited to I + K <= {MAX_ORACLE_CLASS_COUNT}, got {graph.class_count}"
        )


def enumerate_explicit_states(graph: CompatibilityGraph, max_length: int) -> Iterator[ExplicitState]:
    """
    Every state of Π with at most max_length items per queue, shortest first.

    Longer states extend shorter ones by one (customer, server) pair, keeping
    only extensions that stay in Π.
    """
    _check_size(graph)
    level = [ExplicitState()]
    for _ in range(max_length + 1):
        next_level = []
        for state in level:
            yield state
            servers = graph.servers_of(mask_from_indices(state.c))
            customers = graph.customers_of(mask_from_indices(state.d))
            for i in range(graph.customer_count):
                if customers >> i & 1:
                    continue
                for k in range(graph.server_count):
                    if servers >> k & 1 or graph.compatible(i, k):
                        continue
                    next_level.append(ExplicitState(state.c + (i,), state.d + (k,)))
        level = next_level


@dataclass
class _LevelNode:
    weight: float
    customer_moments: List[float]
    server_moments: List[float]
    representative: ExplicitState


@dataclass
class OracleAggregates:
    """
    Truncated product-form sums, normalized by the truncated total.

    tail_bound bounds the missing probability mass; mean_tail_bound bounds the
    missing mass weighted by queue length.
    """
    graph: CompatibilityGraph
    max_length: int
    pi: Dict[ClassSet, float]
    unnormalized: Dict[ClassSet, float]
    customer_means: Dict[int, Dict[ClassSet, float]]
    server_means: Dict[int, Dict[ClassSet, float]]
    transition_probs: Dict[TransitionType, float]
    level_totals: List[float]
    tail_ratio: float
    tail_bound: float
    mean_tail_bound: float
    state_count: int = field(default=0)

    def pi_of(self, class_set: ClassSet) -> float:
        return self.pi.get(class_set, 0.0)

    def mean_unmatched(self, class_id: ClassId) -> float:
        tables = self.customer_means if class_id.side is Side.CUSTOMER else self.server_means
        return math.fsum(tables[class_id.index].values())

    @property
    def total_customers(self) -> float:
        return math.fsum(self.mean_unmatched(c) for c in self.graph.class_ids(Side.CUSTOMER))


def truncated_aggregates(
    graph: CompatibilityGraph,
    arrivals: ArrivalModel,
    max_length: int = DEFAULT_ORACLE_MAX_LENGTH
) -> OracleAggregates:
    """
    Sum the product-form measure over all states of length <= max_length.

    States are grown level by level. Extensions with the same customer-class and
    server-class sets carry identical future weight factors, so they are summed
    into one node; each node keeps one explicit representative, on which the
    explicit step classifies every arrival pair.

    :raises TruncationDivergence: If the last level total is not below the previous one
    """
    _check_size(graph)
    arrivals.validate_for(graph)
    I, K = graph.customer_count, graph.server_count
    lam, mu = arrivals.lam, arrivals.mu

    served_cache: Dict[int, float] = {}
    feeding_cache: Dict[int, float] = {}

    def served(mask: int) -> float:
        if mask not in served_cache:
            served_cache[mask] = arrivals.mu_sum(graph.servers_of(mask))
        return served_cache[mask]

    def feeding(mask: int) -> float:
        if mask not in feeding_cache:
            feeding_cache[mask] = arrivals.lambda_sum(graph.customers_of(mask))
        return feeding_cache[mask]

    level: Dict[Tuple[int, int], _LevelNode] = {
        (0, 0): _LevelNode(1.0, [0.0] * I, [0.0] * K, ExplicitState())
    }
    sums: Dict[Tuple[int, int], float] = {}
    customer_sums: Dict[Tuple[int, int], List[float]] = {}
    server_sums: Dict[Tuple[int, int], List[float]] = {}
    transitions: Dict[TransitionType, List[float]] = {t: [] for t in TransitionType}
    level_totals: List[float] = []
    state_count = 0

    for length in range(max_length + 1):
        level_totals.append(math.fsum(node.weight for node in level.values()))
        state_count += len(level)
        next_level: Dict[Tuple[int, int], _LevelNode] = {}

        for (cm, sm), node in level.items():
            sums[(cm, sm)] = sums.get((cm, sm), 0.0) + node.weight
            c_acc = customer_sums.setdefault((cm, sm), [0.0] * I)
            s_acc = server_sums.setdefault((cm, sm), [0.0] * K)
            for j in range(I):
                c_acc[j] += node.customer_moments[j]
            for j in range(K):
                s_acc[j] += node.server_moments[j]

            for i in range(I):
                for k in range(K):
                    kind = explicit_transition_type(node.representative, i, k, graph)
                    transitions[kind].append(node.weight * lam[i] * mu[k])

            if length == max_length:
                continue

            for i in range(I):
                next_cm = cm | 1 << i
                blocked = graph.servers_of(next_cm)
                for k in range(K):
                    next_sm = sm | 1 << k
                    if blocked & next_sm:
                        continue
                    factor = lam[i] / served(next_cm) * mu[k] / feeding(next_sm)
                    child = next_level.get((next_cm, next_sm))
                    if child is None:
                        child = _LevelNode(
                            0.0, [0.0] * I, [0.0] * K,
                            ExplicitState(node.representative.c + (i,), node.representative.d + (k,))
                        )
                        next_level[(next_cm, next_sm)] = child
                    child.weight += node.weight * factor
                    for j in range(I):
                        child.customer_moments[j] += node.customer_moments[j] * factor
                    for j in range(K):
                        child.server_moments[j] += node.server_moments[j] * factor
                    child.customer_moments[i] += node.weight * factor
                    child.server_moments[k] += node.weight * factor
        level = next_level

    tail_ratio, tail_mass, tail_mean_mass = _tail(level_totals)
    total = math.fsum(sums.values())

    pi = {ClassSet(cm, sm): v / total for (cm, sm), v in sums.items()}
    customer_means = {
        i: {ClassSet(cm, sm): acc[i] / total for (cm, sm), acc in customer_sums.items() if acc[i] > 0.0}
        for i in range(I)
    }
    server_means = {
        k: {ClassSet(cm, sm): acc[k] / total for (cm, sm), acc in server_sums.items() if acc[k] > 0.0}
        for k in range(K)
    }
    transition_probs = {t: math.fsum(values) / total for t, values in transitions.items()}

    aggregates = OracleAggregates(
        graph=graph,
        max_length=max_length,
        pi=pi,
        unnormalized={ClassSet(cm, sm): v for (cm, sm), v in sums.items()},
        customer_means=customer_means,
        server_means=server_means,
        transition_probs=transition_probs,
        level_totals=level_totals,
        tail_ratio=tail_ratio,
        tail_bound=tail_mass / total,
        mean_tail_bound=tail_mean_mass / total,
        state_count=state_count
    )
    logger.debug(
        f"Oracle summed {state_count} lumped nodes up to length {max_length}; "
        f"tail ratio {tail_ratio:.4g}, tail bound {aggregates.tail_bound:.3g}"
    )
    return aggregates


def _tail(level_totals: List[float]) -> Tuple[float, float, float]:
    """
    Geometric bound on the mass beyond the last level, using the largest
    level-to-level ratio among the last three levels.

    :return: (ratio, missing mass bound, missing length-weighted mass bound)
    """
    last = len(level_totals) - 1
    if last == 0 or level_totals[last] == 0.0:
        return 0.0, 0.0, 0.0
    if level_totals[last] >= level_totals[last - 1]:
        raise TruncationDivergence(last, level_totals[last - 1], level_totals[last])

    ratio: Optional[float] = None
    for n in range(max(1, last - 2), last + 1):
        if level_totals[n - 1] > 0.0:
            r = level_totals[n] / level_totals[n - 1]
            ratio = r if ratio is None else max(ratio, r)
    if ratio is None or ratio >= 1.0:
        raise TruncationDivergence(last, level_totals[last - 1], level_totals[last])

    top = level_totals[last]
    mass = top * ratio / (1.0 - ratio)
    mean_mass = top * (last * ratio / (1.0 - ratio) + ratio / (1.0 - ratio) ** 2)
    return ratio, mass, mean_mass

# app/services/simulator.py

import logging
import math
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Deque, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.core.settings import (
    DEFAULT_MEASURED_SLOTS,
    DEFAULT_REPLICATIONS,
    DEFAULT_SEED,
    DEFAULT_WARMUP_SLOTS,
    INSTABILITY_EARLY_FRACTION,
    INSTABILITY_MEDIAN_FACTOR,
    RANDOM_BLOCK_SIZE,
)
from app.services.model import (
    ArrivalModel,
    ClassSet,
    CompatibilityGraph,
    Side,
    TransitionType,
    iter_bits,
)

logger = logging.getLogger(__name__)


class SimulatorError(Exception):
    """Base exception for simulator errors."""
    pass


class InvalidSimulationConfig(SimulatorError):
    """Raised when a simulation configuration is out of range."""
    pass


class QueueInvariantError(SimulatorError):
    """Raised in checked mode when a queue state leaves Π."""
    pass


class MatchEvent(NamedTuple):
    """An item leaving the system at departure_slot."""
    side: Side
    index: int
    arrival_slot: int
    departure_slot: int

    @property
    def wait(self) -> int:
        return self.departure_slot - self.arrival_slot


class QueueState:
    """
    Unmatched customers and servers under first-come-first-matched.

    Each class keeps a FIFO of arrival slots. All items of a class are equally
    compatible, so the longest-waiting compatible item is always the head of
    one class FIFO: the one with the smallest head slot among the compatible,
    non-empty classes.
    """

    def __init__(self, graph: CompatibilityGraph):
        self.graph = graph
        self.customers: List[Deque[int]] = [deque() for _ in range(graph.customer_count)]
        self.servers: List[Deque[int]] = [deque() for _ in range(graph.server_count)]
        self.customer_total = 0
        self.server_total = 0
        self.customer_classes = 0
        self.server_classes = 0

    @classmethod
    def from_sequences(
        cls,
        graph: CompatibilityGraph,
        customers: Sequence[int],
        servers: Sequence[int],
        first_slot: int = 0
    ) -> "QueueState":
        """
        Build a state from queue contents ordered oldest first.

        The p-th customer and the p-th server are stamped with slot first_slot + p.
        """
        state = cls(graph)
        for p, i in enumerate(customers):
            state._push_customer(i, first_slot + p)
        for p, k in enumerate(servers):
            state._push_server(k, first_slot + p)
        return state

    def __len__(self) -> int:
        return self.customer_total

    @property
    def is_empty(self) -> bool:
        return self.customer_total == 0 and self.server_total == 0

    def class_set(self) -> ClassSet:
        return ClassSet(self.customer_classes, self.server_classes)

    def customer_sequence(self) -> List[int]:
        return [i for _, i in sorted((slot, i) for i, q in enumerate(self.customers) for slot in q)]

    def server_sequence(self) -> List[int]:
        return [k for _, k in sorted((slot, k) for k, q in enumerate(self.servers) for slot in q)]

    def copy(self) -> "QueueState":
        clone = QueueState(self.graph)
        clone.customers = [deque(q) for q in self.customers]
        clone.servers = [deque(q) for q in self.servers]
        clone.customer_total = self.customer_total
        clone.server_total = self.server_total
        clone.customer_classes = self.customer_classes
        clone.server_classes = self.server_classes
        return clone

    def check_invariants(self) -> None:
        """
        :raises QueueInvariantError: If the queue lengths differ or a compatible pair is queued
        """
        if self.customer_total != self.server_total:
            raise QueueInvariantError(
                f"Queue lengths differ: {self.customer_total} customers, {self.server_total} servers"
            )
        for i in iter_bits(self.customer_classes):
            clash = self.graph.customer_neighbors[i] & self.server_classes
            if clash:
                raise QueueInvariantError(
                    f"Customer class {self.graph.customer_names[i]} is queued with compatible "
                    f"server classes {[self.graph.server_names[k] for k in iter_bits(clash)]}"
                )

    def _push_customer(self, i: int, slot: int) -> None:
        self.customers[i].append(slot)
        self.customer_total += 1
        self.customer_classes |= 1 << i

    def _push_server(self, k: int, slot: int) -> None:
        self.servers[k].append(slot)
        self.server_total += 1
        self.server_classes |= 1 << k

    def _pop_customer(self, i: int) -> int:
        queue = self.customers[i]
        slot = queue.popleft()
        self.customer_total -= 1
        if not queue:
            self.customer_classes &= ~(1 << i)
        return slot

    def _pop_server(self, k: int) -> int:
        queue = self.servers[k]
        slot = queue.popleft()
        self.server_total -= 1
        if not queue:
            self.server_classes &= ~(1 << k)
        return slot

    @staticmethod
    def _oldest(queues: List[Deque[int]], candidates: int) -> Optional[int]:
        best_class, best_slot = None, None
        for c in iter_bits(candidates):
            head = queues[c][0]
            if best_slot is None or head < best_slot:
                best_class, best_slot = c, head
        return best_class


def step(
    state: QueueState,
    i: int,
    k: int,
    slot: int
) -> Tuple[QueueState, TransitionType, List[MatchEvent]]:
    """
    Apply the arrival of a class-i customer and a class-k server in one slot.

    1. The customer takes the longest-waiting compatible server, if any.
    2. The server takes the longest-waiting compatible customer, if any.
    3. If neither found a partner and i ∼ k, they are matched together.
    4. Whatever is still unmatched joins the back of its queue.

    The state is updated in place and returned.
    """
    graph = state.graph
    events: List[MatchEvent] = []

    server_partner = state._oldest(state.servers, graph.customer_neighbors[i] & state.server_classes)
    customer_partner = state._oldest(state.customers, graph.server_neighbors[k] & state.customer_classes)

    if server_partner is not None:
        events.append(MatchEvent(Side.SERVER, server_partner, state._pop_server(server_partner), slot))
        events.append(MatchEvent(Side.CUSTOMER, i, slot, slot))
    if customer_partner is not None:
        events.append(MatchEvent(Side.CUSTOMER, customer_partner, state._pop_customer(customer_partner), slot))
        events.append(MatchEvent(Side.SERVER, k, slot, slot))

    if server_partner is not None and customer_partner is not None:
        transition = TransitionType.MINUS_MINUS
    elif server_partner is not None:
        state._push_server(k, slot)
        transition = TransitionType.EQUAL_PM
    elif customer_partner is not None:
        state._push_customer(i, slot)
        transition = TransitionType.PM_EQUAL
    elif graph.compatible(i, k):
        events.append(MatchEvent(Side.CUSTOMER, i, slot, slot))
        events.append(MatchEvent(Side.SERVER, k, slot, slot))
        transition = TransitionType.EQUAL_EQUAL
    else:
        state._push_customer(i, slot)
        state._push_server(k, slot)
        transition = TransitionType.PLUS_PLUS

    return state, transition, events


@dataclass(frozen=True)
class SimulationConfig:
    """Run lengths and seeding; defaults follow 20 runs of 10^6 slots after 10^6 warm-up slots."""
    seed: int = DEFAULT_SEED
    warmup_slots: int = DEFAULT_WARMUP_SLOTS
    measured_slots: int = DEFAULT_MEASURED_SLOTS
    replications: int = DEFAULT_REPLICATIONS
    workers: int = 1
    checked: bool = False

    def __post_init__(self):
        if not 0 <= self.seed < 2 ** 64:
            raise InvalidSimulationConfig(f"seed must be a 64-bit nonnegative integer, got {self.seed}")
        if self.warmup_slots < 0:
            raise InvalidSimulationConfig(f"warmup_slots must be >= 0, got {self.warmup_slots}")
        if self.measured_slots < 1:
            raise InvalidSimulationConfig(f"measured_slots must be >= 1, got {self.measured_slots}")
        if self.replications < 1:
            raise InvalidSimulationConfig(f"replications must be >= 1, got {self.replications}")
        if self.workers < 1:
            raise InvalidSimulationConfig(f"workers must be >= 1, got {self.workers}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SimulationConfig":
        """Create a SimulationConfig from the `simulation` configuration section."""
        return cls(
            seed=int(data.get("seed", DEFAULT_SEED)),
            warmup_slots=int(data.get("warmup_slots", DEFAULT_WARMUP_SLOTS)),
            measured_slots=int(data.get("measured_slots", DEFAULT_MEASURED_SLOTS)),
            replications=int(data.get("replications", DEFAULT_REPLICATIONS)),
            workers=int(data.get("workers", 1)),
            checked=bool(data.get("checked", False))
        )


@dataclass
class ReplicationResult:
    """Measurements of one replication, keyed by (metric, class)."""
    replication: int
    values: Dict[Tuple[str, str], float]
    final_length: int
    median_length: float
    horizon: int = 0

    @property
    def looks_unstable(self) -> bool:
        """
        Final length above ten times the median over the first tenth of the run,
        and above √(slots simulated), which a stable chain almost never reaches.
        """
        floor = math.sqrt(self.horizon)
        return self.final_length > max(INSTABILITY_MEDIAN_FACTOR * max(1.0, self.median_length), floor)


@dataclass
class MetricSummary:
    mean: float
    std: float
    count: int


@dataclass
class SimulationEstimate:
    """Across-replication mean and standard deviation of every simulated metric."""
    graph: CompatibilityGraph
    config: SimulationConfig
    metrics: Dict[Tuple[str, str], MetricSummary]
    replications: List[ReplicationResult] = field(repr=False)
    advisories: List[str] = field(default_factory=list)

    @property
    def unstable_advisory(self) -> bool:
        return any(r.looks_unstable for r in self.replications)

    def get(self, metric: str, class_name: str = "") -> MetricSummary:
        return self.metrics[(metric, class_name)]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {"metric": metric, "class": name, "mean": s.mean, "stddev": s.std}
                for (metric, name), s in self.metrics.items()
            ],
            columns=["metric", "class", "mean", "stddev"]
        )


def replication_rng(seed: int, replication: int) -> np.random.Generator:
    """Independent PCG64 stream for one replication, derived from (seed, replication)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(replication,))))


def _cumulative(probabilities: Sequence[float]) -> np.ndarray:
    cumulative = np.cumsum(np.asarray(probabilities, dtype=float))
    cumulative[-1] = 1.0
    return cumulative


def _class_draws(rng: np.random.Generator, lam_cdf: np.ndarray, mu_cdf: np.ndarray, count: int):
    """Inverse-CDF draws of (customer, server) classes in blocks."""
    remaining = count
    while remaining > 0:
        size = min(RANDOM_BLOCK_SIZE, remaining)
        u = rng.random((size, 2))
        customers = np.searchsorted(lam_cdf, u[:, 0], side="right")
        servers = np.searchsorted(mu_cdf, u[:, 1], side="right")
        np.minimum(customers, len(lam_cdf) - 1, out=customers)
        np.minimum(servers, len(mu_cdf) - 1, out=servers)
        yield from zip(customers.tolist(), servers.tolist())
        remaining -= size


def run_replication(
    graph: CompatibilityGraph,
    arrivals: ArrivalModel,
    config: SimulationConfig,
    replication: int
) -> ReplicationResult:
    """Simulate one replication from the empty state."""
    I, K = graph.customer_count, graph.server_count
    rng = replication_rng(config.seed, replication)
    state = QueueState(graph)
    warmup = config.warmup_slots
    horizon = warmup + config.measured_slots

    customer_arrivals = [0] * I
    customer_appended = [0] * I
    server_arrivals = [0] * K
    server_appended = [0] * K
    wait_sums = {Side.CUSTOMER: [0] * I, Side.SERVER: [0] * K}
    wait_counts = {Side.CUSTOMER: [0] * I, Side.SERVER: [0] * K}
    transitions = {t: 0 for t in TransitionType}
    length_total = 0
    early_slots = max(1, int(horizon * INSTABILITY_EARLY_FRACTION))
    early_lengths: List[int] = []
    empty_slots = 0
    last_empty: Optional[int] = None
    return_gaps = 0
    return_count = 0

    draws = _class_draws(rng, _cumulative(arrivals.lam), _cumulative(arrivals.mu), horizon)
    for slot, (i, k) in enumerate(draws):
        _, transition, events = step(state, i, k, slot)
        if config.checked:
            state.check_invariants()
        if slot < early_slots:
            early_lengths.append(state.customer_total)
        if slot < warmup:
            continue

        customer_arrivals[i] += 1
        server_arrivals[k] += 1
        if transition is TransitionType.PM_EQUAL or transition is TransitionType.PLUS_PLUS:
            customer_appended[i] += 1
        if transition is TransitionType.EQUAL_PM or transition is TransitionType.PLUS_PLUS:
            server_appended[k] += 1
        transitions[transition] += 1
        for event in events:
            wait_sums[event.side][event.index] += event.departure_slot - event.arrival_slot
            wait_counts[event.side][event.index] += 1

        length_total += state.customer_total
        if state.customer_total == 0:
            empty_slots += 1
            if last_empty is not None:
                return_gaps += slot - last_empty
                return_count += 1
            last_empty = slot

        if slot % 1_000_000 == 0 and slot > warmup:
            logger.debug(f"Replication {replication}: slot {slot}/{horizon}, queue length {state.customer_total}")

    measured = config.measured_slots
    values: Dict[Tuple[str, str], float] = {}

    def ratio(numerator: float, denominator: float) -> float:
        return numerator / denominator if denominator else math.nan

    for i, name in enumerate(graph.customer_names):
        values[("waiting_probability", name)] = ratio(customer_appended[i], customer_arrivals[i])
    for k, name in enumerate(graph.server_names):
        values[("waiting_probability", name)] = ratio(server_appended[k], server_arrivals[k])
    for i, name in enumerate(graph.customer_names):
        values[("mean_wait", name)] = ratio(wait_sums[Side.CUSTOMER][i], wait_counts[Side.CUSTOMER][i])
    for k, name in enumerate(graph.server_names):
        values[("mean_wait", name)] = ratio(wait_sums[Side.SERVER][k], wait_counts[Side.SERVER][k])

    values[("average_waiting_probability", "customers")] = sum(customer_appended) / measured
    values[("average_waiting_probability", "servers")] = sum(server_appended) / measured
    values[("average_wait", "customers")] = ratio(sum(wait_sums[Side.CUSTOMER]), sum(wait_counts[Side.CUSTOMER]))
    values[("average_wait", "servers")] = ratio(sum(wait_sums[Side.SERVER]), sum(wait_counts[Side.SERVER]))
    values[("mean_unmatched_total", "customers")] = length_total / measured
    for transition, count in transitions.items():
        values[("transition_frequency", transition.value)] = count / measured
    values[("empty_frequency", "")] = empty_slots / measured
    values[("mean_return_time", "")] = ratio(return_gaps, return_count)

    result = ReplicationResult(
        replication=replication,
        values=values,
        final_length=state.customer_total,
        median_length=float(np.median(np.asarray(early_lengths, dtype=np.int64))),
        horizon=horizon
    )
    logger.debug(
        f"Replication {replication} done: final length {result.final_length}, "
        f"median length {result.median_length}"
    )
    return result


def _run_replication_task(args: Tuple[CompatibilityGraph, ArrivalModel, SimulationConfig, int]) -> ReplicationResult:
    return run_replication(*args)


def _summarize(samples: Sequence[float]) -> MetricSummary:
    values = np.asarray(samples, dtype=float)
    values = values[~np.isnan(values)]
    if values.size == 0:
        return MetricSummary(math.nan, math.nan, 0)
    std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return MetricSummary(float(values.mean()), std, int(values.size))


def simulate(
    graph: CompatibilityGraph,
    arrivals: ArrivalModel,
    config: Optional[SimulationConfig] = None
) -> SimulationEstimate:
    """
    Estimate the stationary metrics by independent replications.

    Stability is not required; replications whose final queue length exceeds
    ten times the median over the first tenth of the run (and √slots) raise
    an instability advisory.

    :param graph: Compatibility graph
    :param arrivals: Arrival probabilities
    :param config: Run lengths, seed and worker count
    :return: SimulationEstimate aggregated across replications
    """
    config = config or SimulationConfig()
    arrivals.validate_for(graph)
    logger.info(
        f"Simulating {config.replications} replication(s) of {config.measured_slots} slots "
        f"after {config.warmup_slots} warm-up slots (seed={config.seed})"
    )

    tasks = [(graph, arrivals, config, r) for r in range(config.replications)]
    if config.workers > 1 and config.replications > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_run_replication_task, tasks))
    else:
        results = [_run_replication_task(task) for task in tasks]

    keys = list(results[0].values)
    metrics = {key: _summarize([r.values[key] for r in results]) for key in keys}

    advisories = []
    for r in results:
        if r.looks_unstable:
            message = (
                f"Replication {r.replication} ended with {r.final_length} unmatched customers "
                f"(early median {r.median_length:g}); the model may be unstable"
            )
            logger.warning(message)
            advisories.append(message)

    return SimulationEstimate(graph=graph, config=config, metrics=metrics, replications=results, advisories=advisories)

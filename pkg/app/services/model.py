# app/services/model.py

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Sequence, Tuple

from app.core.settings import (
    DEFAULT_MAX_INDEPENDENT_SETS,
    MAX_BRUTE_FORCE_SIDE,
    MAX_CLASS_COUNT,
    PROBABILITY_SUM_TOLERANCE,
)

logger = logging.getLogger(__name__)


class MatchingModelError(Exception):
    """Base exception for matching-model errors."""
    pass


class InvalidModelError(MatchingModelError):
    """Raised when a graph or arrival model violates its invariants."""
    pass


class CountLimitExceeded(MatchingModelError):
    """Raised when the independent-set family is too large for exact solving."""
    def __init__(self, count: int, cap: int):
        self.count = count
        self.cap = cap
        super().__init__(
            f"Independent-set enumeration exceeded the cap of {cap} sets "
            f"(reached {count}); the instance is too large for exact solving"
        )


class Side(str, Enum):
    CUSTOMER = "customer"
    SERVER = "server"

    @property
    def other(self) -> "Side":
        return Side.SERVER if self is Side.CUSTOMER else Side.CUSTOMER


class TransitionType(str, Enum):
    """Effect of one arriving (customer, server) pair on the (customer, server) queues."""
    MINUS_MINUS = "minus/minus"
    PM_EQUAL = "pm/equal"
    EQUAL_PM = "equal/pm"
    EQUAL_EQUAL = "equal/equal"
    PLUS_PLUS = "plus/plus"

    @property
    def symbol(self) -> str:
        return _TRANSITION_SYMBOLS[self]


_TRANSITION_SYMBOLS = {
    TransitionType.MINUS_MINUS: "−/−",
    TransitionType.PM_EQUAL: "±/=",
    TransitionType.EQUAL_PM: "=/±",
    TransitionType.EQUAL_EQUAL: "=/=",
    TransitionType.PLUS_PLUS: "+/+",
}


@dataclass(frozen=True)
class ClassId:
    """A customer or server class, indexed densely from 0 within its side."""
    side: Side
    index: int

    def __post_init__(self):
        if self.index < 0:
            raise InvalidModelError(f"Class index must be nonnegative, got {self.index}")

    @classmethod
    def customer(cls, index: int) -> "ClassId":
        return cls(Side.CUSTOMER, index)

    @classmethod
    def server(cls, index: int) -> "ClassId":
        return cls(Side.SERVER, index)

    def mirrored(self) -> "ClassId":
        return ClassId(self.side.other, self.index)


def iter_bits(mask: int) -> Iterator[int]:
    """Yield the indices of the set bits of mask in increasing order."""
    while mask:
        low = mask & -mask
        yield low.bit_length() - 1
        mask ^= low


def popcount(mask: int) -> int:
    return bin(mask).count("1")


def mask_from_indices(indices: Iterable[int]) -> int:
    mask = 0
    for index in indices:
        mask |= 1 << index
    return mask


@dataclass(frozen=True)
class ClassSet:
    """
    A set of classes split into a customer bitmask and a server bitmask.

    Set algebra is word-level on the two masks; the graph caps I + K at 64.
    """
    customer_mask: int = 0
    server_mask: int = 0

    @classmethod
    def of(cls, customers: Iterable[int] = (), servers: Iterable[int] = ()) -> "ClassSet":
        return cls(mask_from_indices(customers), mask_from_indices(servers))

    def __contains__(self, class_id: ClassId) -> bool:
        mask = self.customer_mask if class_id.side is Side.CUSTOMER else self.server_mask
        return bool(mask >> class_id.index & 1)

    def __or__(self, other: "ClassSet") -> "ClassSet":
        return ClassSet(self.customer_mask | other.customer_mask, self.server_mask | other.server_mask)

    def __and__(self, other: "ClassSet") -> "ClassSet":
        return ClassSet(self.customer_mask & other.customer_mask, self.server_mask & other.server_mask)

    def __sub__(self, other: "ClassSet") -> "ClassSet":
        return ClassSet(self.customer_mask & ~other.customer_mask, self.server_mask & ~other.server_mask)

    def __len__(self) -> int:
        return popcount(self.customer_mask) + popcount(self.server_mask)

    def __bool__(self) -> bool:
        return bool(self.customer_mask or self.server_mask)

    union = __or__
    intersection = __and__
    difference = __sub__

    @property
    def is_mixed(self) -> bool:
        """True when both the customer part and the server part are non-empty."""
        return bool(self.customer_mask) and bool(self.server_mask)

    def customers(self) -> List[int]:
        return list(iter_bits(self.customer_mask))

    def servers(self) -> List[int]:
        return list(iter_bits(self.server_mask))

    def customer_part(self) -> "ClassSet":
        return ClassSet(self.customer_mask, 0)

    def server_part(self) -> "ClassSet":
        return ClassSet(0, self.server_mask)

    def mirrored(self) -> "ClassSet":
        return ClassSet(self.server_mask, self.customer_mask)

    def sort_key(self) -> Tuple[int, int, int]:
        return (len(self), self.customer_mask, self.server_mask)


EMPTY_SET = ClassSet()


def default_server_names(count: int) -> Tuple[str, ...]:
    if count <= 26:
        return tuple(chr(ord("A") + k) for k in range(count))
    return tuple(f"S{k + 1}" for k in range(count))


@dataclass(frozen=True)
class CompatibilityGraph:
    """
    Bipartite compatibility graph between customer and server classes.

    Edges are (customer index, server index) pairs. The graph must be connected
    and I + K must not exceed 64.
    """
    customer_count: int
    server_count: int
    edges: FrozenSet[Tuple[int, int]]
    customer_names: Tuple[str, ...] = ()
    server_names: Tuple[str, ...] = ()
    customer_neighbors: Tuple[int, ...] = field(init=False, repr=False, compare=False)
    server_neighbors: Tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        I, K = self.customer_count, self.server_count
        if I < 1 or K < 1:
            raise InvalidModelError(f"Need at least one class per side, got I={I}, K={K}")
        if I + K > MAX_CLASS_COUNT:
            raise InvalidModelError(
                f"I + K = {I + K} exceeds the limit of {MAX_CLASS_COUNT} classes"
            )

        edges = frozenset((int(i), int(k)) for i, k in self.edges)
        for i, k in sorted(edges):
            if not (0 <= i < I and 0 <= k < K):
                raise InvalidModelError(f"Edge ({i}, {k}) references an unknown class")
        object.__setattr__(self, "edges", edges)

        customer_names = tuple(self.customer_names) or tuple(str(i + 1) for i in range(I))
        server_names = tuple(self.server_names) or default_server_names(K)
        for side, names, count in (("customer", customer_names, I), ("server", server_names, K)):
            if len(names) != count:
                raise InvalidModelError(f"Expected {count} {side} names, got {len(names)}")
            if len(set(names)) != count:
                raise InvalidModelError(f"Duplicate {side} class names: {list(names)}")
        object.__setattr__(self, "customer_names", customer_names)
        object.__setattr__(self, "server_names", server_names)

        customer_neighbors = [0] * I
        server_neighbors = [0] * K
        for i, k in edges:
            customer_neighbors[i] |= 1 << k
            server_neighbors[k] |= 1 << i
        object.__setattr__(self, "customer_neighbors", tuple(customer_neighbors))
        object.__setattr__(self, "server_neighbors", tuple(server_neighbors))

        components = self.components()
        if len(components) > 1:
            listing = "; ".join(
                "{" + ", ".join(self.class_name(c) for c in component) + "}"
                for component in components
            )
            raise InvalidModelError(
                f"Compatibility graph is not connected ({len(components)} components): {listing}"
            )

    @classmethod
    def from_names(
        cls,
        customers: Sequence[str],
        servers: Sequence[str],
        edges: Iterable[Tuple[str, str]]
    ) -> "CompatibilityGraph":
        """Build a graph from class names and name pairs."""
        customer_index = {name: i for i, name in enumerate(customers)}
        server_index = {name: k for k, name in enumerate(servers)}
        pairs = set()
        for customer, server in edges:
            if customer not in customer_index:
                raise InvalidModelError(f"Edge references unknown customer class '{customer}'")
            if server not in server_index:
                raise InvalidModelError(f"Edge references unknown server class '{server}'")
            pairs.add((customer_index[customer], server_index[server]))
        return cls(len(customers), len(servers), frozenset(pairs), tuple(customers), tuple(servers))

    @property
    def class_count(self) -> int:
        return self.customer_count + self.server_count

    @property
    def all_customers_mask(self) -> int:
        return (1 << self.customer_count) - 1

    @property
    def all_servers_mask(self) -> int:
        return (1 << self.server_count) - 1

    def compatible(self, i: int, k: int) -> bool:
        return bool(self.customer_neighbors[i] >> k & 1)

    def servers_of(self, customer_mask: int) -> int:
        """Mask of 𝒦(C) for a customer mask C."""
        result = 0
        for i in iter_bits(customer_mask):
            result |= self.customer_neighbors[i]
        return result

    def customers_of(self, server_mask: int) -> int:
        """Mask of ℐ(S) for a server mask S."""
        result = 0
        for k in iter_bits(server_mask):
            result |= self.server_neighbors[k]
        return result

    def is_independent(self, class_set: ClassSet) -> bool:
        return self.servers_of(class_set.customer_mask) & class_set.server_mask == 0

    def mirrored(self) -> "CompatibilityGraph":
        """The same graph with the roles of customers and servers swapped."""
        return CompatibilityGraph(
            self.server_count,
            self.customer_count,
            frozenset((k, i) for i, k in self.edges),
            self.server_names,
            self.customer_names
        )

    def class_name(self, class_id: ClassId) -> str:
        names = self.customer_names if class_id.side is Side.CUSTOMER else self.server_names
        return names[class_id.index]

    def class_ids(self, side: Side) -> List[ClassId]:
        count = self.customer_count if side is Side.CUSTOMER else self.server_count
        return [ClassId(side, index) for index in range(count)]

    def member_names(self, class_set: ClassSet) -> List[str]:
        return (
            [self.customer_names[i] for i in class_set.customers()]
            + [self.server_names[k] for k in class_set.servers()]
        )

    def set_label(self, class_set: ClassSet) -> str:
        return "{" + ",".join(self.member_names(class_set)) + "}"

    def components(self) -> List[List[ClassId]]:
        """Connected components, each listed customers first."""
        seen_customers = 0
        seen_servers = 0
        components = []
        for start in range(self.customer_count + self.server_count):
            if start < self.customer_count:
                if seen_customers >> start & 1:
                    continue
                frontier_customers, frontier_servers = 1 << start, 0
            else:
                k = start - self.customer_count
                if seen_servers >> k & 1:
                    continue
                frontier_customers, frontier_servers = 0, 1 << k
            customers, servers = 0, 0
            while frontier_customers or frontier_servers:
                customers |= frontier_customers
                servers |= frontier_servers
                next_servers = self.servers_of(frontier_customers) & ~servers
                next_customers = self.customers_of(frontier_servers) & ~customers
                frontier_customers, frontier_servers = next_customers, next_servers
            seen_customers |= customers
            seen_servers |= servers
            components.append(
                [ClassId.customer(i) for i in iter_bits(customers)]
                + [ClassId.server(k) for k in iter_bits(servers)]
            )
        return components


def _normalized(values: Sequence[float], label: str, tolerance: float) -> Tuple[float, ...]:
    values = tuple(float(v) for v in values)
    if not values:
        raise InvalidModelError(f"{label} must not be empty")
    for index, value in enumerate(values):
        if not math.isfinite(value) or value <= 0.0:
            raise InvalidModelError(
                f"{label}[{index}] = {value}; arrival probabilities must be strictly positive"
            )
    total = math.fsum(values)
    if abs(total - 1.0) > tolerance:
        raise InvalidModelError(f"{label} sums to {total!r}, expected 1 within {tolerance}")
    return tuple(v / total for v in values)


@dataclass(frozen=True)
class ArrivalModel:
    """
    Per-slot arrival probabilities: lam over customer classes, mu over server classes.

    Both vectors are validated to sum to one within 1e-12 and then divided by their sum.
    """
    lam: Tuple[float, ...]
    mu: Tuple[float, ...]
    tolerance: float = field(default=PROBABILITY_SUM_TOLERANCE, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "lam", _normalized(self.lam, "lambda", self.tolerance))
        object.__setattr__(self, "mu", _normalized(self.mu, "mu", self.tolerance))

    def validate_for(self, graph: CompatibilityGraph) -> None:
        if len(self.lam) != graph.customer_count:
            raise InvalidModelError(
                f"lambda has {len(self.lam)} entries but the graph has {graph.customer_count} customer classes"
            )
        if len(self.mu) != graph.server_count:
            raise InvalidModelError(
                f"mu has {len(self.mu)} entries but the graph has {graph.server_count} server classes"
            )

    def lambda_sum(self, customer_mask: int) -> float:
        return math.fsum(self.lam[i] for i in iter_bits(customer_mask))

    def mu_sum(self, server_mask: int) -> float:
        return math.fsum(self.mu[k] for k in iter_bits(server_mask))

    def mirrored(self) -> "ArrivalModel":
        return ArrivalModel(self.mu, self.lam, self.tolerance)


def lambda_of(class_set: ClassSet, arrivals: ArrivalModel) -> float:
    """λ(𝒜) = Σ_{i ∈ 𝒜∩ℐ} λ_i."""
    return arrivals.lambda_sum(class_set.customer_mask)


def mu_of(class_set: ClassSet, arrivals: ArrivalModel) -> float:
    """μ(𝒜) = Σ_{k ∈ 𝒜∩𝒦} μ_k."""
    return arrivals.mu_sum(class_set.server_mask)


def compatible_servers(class_set: ClassSet, graph: CompatibilityGraph) -> ClassSet:
    """𝒦(𝒜∩ℐ): server classes compatible with at least one customer class of the set."""
    return ClassSet(0, graph.servers_of(class_set.customer_mask))


def compatible_customers(class_set: ClassSet, graph: CompatibilityGraph) -> ClassSet:
    """ℐ(𝒜∩𝒦): customer classes compatible with at least one server class of the set."""
    return ClassSet(graph.customers_of(class_set.server_mask), 0)


def enumerate_independent_sets(
    graph: CompatibilityGraph,
    max_sets: int = DEFAULT_MAX_INDEPENDENT_SETS
) -> List[ClassSet]:
    """
    Enumerate Ind ∪ {∅} in nondecreasing cardinality.

    Customer subsets are extended depth-first in index order while 𝒦(C) is
    carried along; every non-empty server subset avoiding 𝒦(C) then completes
    an independent set. One-sided non-empty sets are not part of the family.

    :param graph: Compatibility graph
    :param max_sets: Cap on the number of sets (and visited customer subsets)
    :return: List starting with the empty set
    :raises CountLimitExceeded: If the family exceeds max_sets
    """
    all_servers = graph.all_servers_mask
    found: List[ClassSet] = [EMPTY_SET]
    visited = 0

    # Stack entries: (next customer index, customer mask, 𝒦(customer mask))
    stack = [(0, 0, 0)]
    while stack:
        start, customer_mask, forbidden = stack.pop()
        visited += 1
        if visited > max_sets:
            raise CountLimitExceeded(visited, max_sets)

        if customer_mask:
            available = all_servers & ~forbidden
            sub = available
            while sub:
                found.append(ClassSet(customer_mask, sub))
                sub = (sub - 1) & available
            if len(found) > max_sets:
                raise CountLimitExceeded(len(found), max_sets)

        for i in range(graph.customer_count - 1, start - 1, -1):
            next_forbidden = forbidden | graph.customer_neighbors[i]
            if next_forbidden == all_servers:
                # A customer set compatible with every server has no mixed extension.
                continue
            stack.append((i + 1, customer_mask | 1 << i, next_forbidden))

    found.sort(key=ClassSet.sort_key)
    logger.debug(f"Enumerated {len(found)} sets in Ind ∪ {{∅}}")
    return found


def delta(class_set: ClassSet, graph: CompatibilityGraph, arrivals: ArrivalModel) -> float:
    """
    Stability margin Δ(𝒜) = μ(𝒦(𝒜∩ℐ))·λ(ℐ(𝒜∩𝒦)) − λ(𝒜∩ℐ)·μ(𝒜∩𝒦).
    """
    served = arrivals.mu_sum(graph.servers_of(class_set.customer_mask))
    feeding = arrivals.lambda_sum(graph.customers_of(class_set.server_mask))
    return served * feeding - arrivals.lambda_sum(class_set.customer_mask) * arrivals.mu_sum(class_set.server_mask)


@dataclass(frozen=True)
class StabilityVerdict:
    """
    Outcome of a stability check.

    witness is a violating set when unstable; min_delta/argmin describe the
    tightest set of Ind (None when Ind is empty or for brute-force checks).
    """
    stable: bool
    witness: Optional[ClassSet] = None
    min_delta: Optional[float] = None
    argmin: Optional[ClassSet] = None
    method: str = "delta"

    def describe(self, graph: CompatibilityGraph) -> str:
        if self.stable:
            if self.argmin is None:
                return "Stable; Ind is empty"
            return f"Stable; min Δ = {self.min_delta:.12g} at {graph.set_label(self.argmin)}"
        label = graph.set_label(self.witness) if self.witness is not None else "?"
        if self.min_delta is not None:
            return f"Unstable; Δ = {self.min_delta:.12g} at {label}"
        return f"Unstable; condition violated at {label}"


def compute_deltas(
    graph: CompatibilityGraph,
    arrivals: ArrivalModel,
    independent_sets: Sequence[ClassSet]
) -> Dict[ClassSet, float]:
    """Δ(𝒜) for every non-empty set of the family."""
    return {s: delta(s, graph, arrivals) for s in independent_sets if s}


def check_stability(
    graph: CompatibilityGraph,
    arrivals: ArrivalModel,
    independent_sets: Optional[Sequence[ClassSet]] = None,
    max_sets: int = DEFAULT_MAX_INDEPENDENT_SETS
) -> StabilityVerdict:
    """
    Stable iff Δ(𝒜) > 0 for every 𝒜 ∈ Ind. The witness of an unstable model is
    the set with the smallest Δ.

    :param graph: Compatibility graph
    :param arrivals: Arrival probabilities matching the graph
    :param independent_sets: Precomputed Ind ∪ {∅}, enumerated when omitted
    :param max_sets: Enumeration cap
    :return: StabilityVerdict
    """
    arrivals.validate_for(graph)
    if independent_sets is None:
        independent_sets = enumerate_independent_sets(graph, max_sets)
    deltas = compute_deltas(graph, arrivals, independent_sets)
    if not deltas:
        return StabilityVerdict(stable=True)

    argmin = min(deltas, key=lambda s: (deltas[s], s.sort_key()))
    min_delta = deltas[argmin]
    if min_delta > 0.0:
        return StabilityVerdict(stable=True, min_delta=min_delta, argmin=argmin)
    return StabilityVerdict(stable=False, witness=argmin, min_delta=min_delta, argmin=argmin)


def _proper_subsets(count: int) -> Iterator[int]:
    full = (1 << count) - 1
    for mask in range(1, full):
        yield mask


def check_stability_by_customer_sets(graph: CompatibilityGraph, arrivals: ArrivalModel) -> StabilityVerdict:
    """λ(C) < μ(𝒦(C)) for every non-empty C ⊊ ℐ."""
    if graph.customer_count > MAX_BRUTE_FORCE_SIDE:
        raise CountLimitExceeded(1 << graph.customer_count, 1 << MAX_BRUTE_FORCE_SIDE)
    for mask in _proper_subsets(graph.customer_count):
        if not arrivals.lambda_sum(mask) < arrivals.mu_sum(graph.servers_of(mask)):
            return StabilityVerdict(stable=False, witness=ClassSet(mask, 0), method="customers")
    return StabilityVerdict(stable=True, method="customers")


def check_stability_by_server_sets(graph: CompatibilityGraph, arrivals: ArrivalModel) -> StabilityVerdict:
    """μ(S) < λ(ℐ(S)) for every non-empty S ⊊ 𝒦."""
    if graph.server_count > MAX_BRUTE_FORCE_SIDE:
        raise CountLimitExceeded(1 << graph.server_count, 1 << MAX_BRUTE_FORCE_SIDE)
    for mask in _proper_subsets(graph.server_count):
        if not arrivals.mu_sum(mask) < arrivals.lambda_sum(graph.customers_of(mask)):
            return StabilityVerdict(stable=False, witness=ClassSet(0, mask), method="servers")
    return StabilityVerdict(stable=True, method="servers")


def check_stability_debug(
    graph: CompatibilityGraph,
    arrivals: ArrivalModel,
    max_sets: int = DEFAULT_MAX_INDEPENDENT_SETS
) -> StabilityVerdict:
    """
    Evaluate the Δ criterion and both one-sided conditions independently.
    Each one-sided condition alone is equivalent to stability, so each must
    match the Δ verdict on its own.

    :return: The Δ-based verdict
    :raises MatchingModelError: If any one-sided verdict differs from the Δ verdict
    """
    verdict = check_stability(graph, arrivals, max_sets=max_sets)
    for other in (
        check_stability_by_customer_sets(graph, arrivals),
        check_stability_by_server_sets(graph, arrivals),
    ):
        if other.stable == verdict.stable:
            continue
        witness = other.witness if other.witness is not None else verdict.witness
        label = graph.set_label(witness) if witness is not None else "none"
        raise MatchingModelError(
            f"Stability verdicts disagree: delta={verdict.stable}, "
            f"{other.method}={other.stable}, witness {label}"
        )
    return verdict


def vanishing_sets(
    graph: CompatibilityGraph,
    arrivals: ArrivalModel,
    tolerance: float,
    independent_sets: Optional[Sequence[ClassSet]] = None
) -> List[Tuple[ClassSet, float]]:
    """
    Sets of Ind whose margin Δ(𝒜) is at most tolerance, tightest first.

    Evaluated near an end of a parameter range, these are the sets driving
    the loss of stability at that end.
    """
    if independent_sets is None:
        independent_sets = enumerate_independent_sets(graph)
    deltas = compute_deltas(graph, arrivals, independent_sets)
    tight = [(s, d) for s, d in deltas.items() if d <= tolerance]
    return sorted(tight, key=lambda item: (item[1], item[0].sort_key()))

# app/services/solver.py

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

from app.core.settings import (
    DEFAULT_MAX_INDEPENDENT_SETS,
    NEAR_INSTABILITY_THRESHOLD,
    RESCALE_LOWER,
    RESCALE_UPPER,
)
from app.services.model import (
    ArrivalModel,
    ClassId,
    ClassSet,
    CompatibilityGraph,
    Side,
    TransitionType,
    compute_deltas,
    enumerate_independent_sets,
    iter_bits,
)

logger = logging.getLogger(__name__)

Key = Tuple[int, int]


class SolverError(Exception):
    """Base exception for analytic solver errors."""
    pass


class UnstableModel(SolverError):
    """Raised when some set of Ind has a nonpositive stability margin."""
    def __init__(self, witness: ClassSet, delta_value: float, label: Optional[str] = None):
        self.witness = witness
        self.delta = delta_value
        self.label = label or repr(witness)
        super().__init__(f"Model is unstable: Δ({self.label}) = {delta_value:.12g} <= 0")


class NumericalUnderflow(SolverError):
    """Raised when the unnormalized recursion leaves the floating-point range."""
    pass


def _key(class_set: ClassSet) -> Key:
    return (class_set.customer_mask, class_set.server_mask)


@dataclass
class AggregateDistribution:
    """
    Stationary probability π(𝒜) of each set of unmatched classes 𝒜 ∈ Ind ∪ {∅}.

    Lookups of sets outside the family return 0.
    """
    graph: CompatibilityGraph
    arrivals: ArrivalModel
    order: List[Key]
    values: Dict[Key, float]
    deltas: Dict[Key, float]
    normalization_constant: float
    min_delta: Optional[float] = None
    argmin: Optional[ClassSet] = None
    warnings: List[str] = field(default_factory=list)

    def __getitem__(self, class_set: ClassSet) -> float:
        return self.values.get(_key(class_set), 0.0)

    def __len__(self) -> int:
        return len(self.order)

    def __iter__(self) -> Iterator[ClassSet]:
        return (ClassSet(cm, sm) for cm, sm in self.order)

    def items(self) -> Iterator[Tuple[ClassSet, float]]:
        for cm, sm in self.order:
            yield ClassSet(cm, sm), self.values[(cm, sm)]

    def delta_of(self, class_set: ClassSet) -> Optional[float]:
        return self.deltas.get(_key(class_set))

    @property
    def pi_empty(self) -> float:
        return self.values[(0, 0)]

    @property
    def total(self) -> float:
        return math.fsum(self.values.values())

    @property
    def probabilities(self) -> Dict[ClassSet, float]:
        return dict(self.items())

    def mirrored(self) -> "AggregateDistribution":
        """The distribution of the model with customers and servers swapped."""
        return AggregateDistribution(
            graph=self.graph.mirrored(),
            arrivals=self.arrivals.mirrored(),
            order=[(sm, cm) for cm, sm in self.order],
            values={(sm, cm): v for (cm, sm), v in self.values.items()},
            deltas={(sm, cm): d for (cm, sm), d in self.deltas.items()},
            normalization_constant=self.normalization_constant,
            min_delta=self.min_delta,
            argmin=self.argmin.mirrored() if self.argmin is not None else None,
            warnings=list(self.warnings)
        )


@dataclass
class PerClassMeans:
    """ℓ_i(𝒜) for one tracked class and its total L_i."""
    class_id: ClassId
    table: Dict[ClassSet, float]
    total: float
    pi: Optional[AggregateDistribution] = field(default=None, repr=False)

    def conditional(self, class_set: ClassSet) -> float:
        """Mean number of unmatched items of the class given the set of unmatched classes is 𝒜."""
        value = self.table.get(class_set, 0.0)
        if value == 0.0 or self.pi is None:
            return 0.0
        return value / self.pi[class_set]


@dataclass
class TotalMeans:
    """ℓ_ℐ(𝒜), L_ℐ and the mirrored server total L_𝒦."""
    table: Dict[ClassSet, float]
    total_customers: float
    total_servers: float


@dataclass
class PerformanceReport:
    """All stationary metrics of one model instance."""
    graph: CompatibilityGraph
    arrivals: ArrivalModel
    pi: AggregateDistribution
    pi_empty: float
    customer_waiting: Tuple[float, ...]
    server_waiting: Tuple[float, ...]
    customer_mean_unmatched: Tuple[float, ...]
    server_mean_unmatched: Tuple[float, ...]
    total_customers: float
    total_servers: float
    customer_mean_wait: Tuple[float, ...]
    server_mean_wait: Tuple[float, ...]
    average_customer_wait: float
    average_server_wait: float
    transition_probs: Dict[TransitionType, float]
    balance_residual: float
    warnings: List[str] = field(default_factory=list)

    @property
    def average_customer_waiting(self) -> float:
        """Arrival-weighted waiting probability of customers."""
        return math.fsum(l * w for l, w in zip(self.arrivals.lam, self.customer_waiting))

    @property
    def average_server_waiting(self) -> float:
        return math.fsum(m * w for m, w in zip(self.arrivals.mu, self.server_waiting))

    @property
    def min_delta(self) -> Optional[float]:
        return self.pi.min_delta

    def waiting_probability(self, class_id: ClassId) -> float:
        values = self.customer_waiting if class_id.side is Side.CUSTOMER else self.server_waiting
        return values[class_id.index]

    def mean_unmatched(self, class_id: ClassId) -> float:
        values = self.customer_mean_unmatched if class_id.side is Side.CUSTOMER else self.server_mean_unmatched
        return values[class_id.index]

    def mean_wait(self, class_id: ClassId) -> float:
        values = self.customer_mean_wait if class_id.side is Side.CUSTOMER else self.server_mean_wait
        return values[class_id.index]

    def metric_rows(self) -> List[Dict[str, Any]]:
        """One row per (metric, class), in a stable order."""
        g = self.graph
        rows: List[Dict[str, Any]] = [{"metric": "pi_empty", "class": "", "value": self.pi_empty}]

        per_class = (
            ("waiting_probability", self.customer_waiting, self.server_waiting),
            ("mean_unmatched", self.customer_mean_unmatched, self.server_mean_unmatched),
            ("mean_wait", self.customer_mean_wait, self.server_mean_wait),
        )
        for metric, customers, servers in per_class:
            rows += [{"metric": metric, "class": n, "value": v} for n, v in zip(g.customer_names, customers)]
            rows += [{"metric": metric, "class": n, "value": v} for n, v in zip(g.server_names, servers)]

        rows += [
            {"metric": "average_waiting_probability", "class": "customers", "value": self.average_customer_waiting},
            {"metric": "average_waiting_probability", "class": "servers", "value": self.average_server_waiting},
            {"metric": "mean_unmatched_total", "class": "customers", "value": self.total_customers},
            {"metric": "mean_unmatched_total", "class": "servers", "value": self.total_servers},
            {"metric": "average_wait", "class": "customers", "value": self.average_customer_wait},
            {"metric": "average_wait", "class": "servers", "value": self.average_server_wait},
        ]
        rows += [
            {"metric": "transition_probability", "class": t.value, "value": p}
            for t, p in self.transition_probs.items()
        ]
        rows.append({"metric": "balance_residual", "class": "", "value": self.balance_residual})
        if self.pi.argmin is not None:
            rows.append({"metric": "min_delta", "class": g.set_label(self.pi.argmin), "value": self.pi.min_delta})
        return rows


def solve_pi(
    graph: CompatibilityGraph,
    arrivals: ArrivalModel,
    independent_sets: Optional[Sequence[ClassSet]] = None,
    max_sets: int = DEFAULT_MAX_INDEPENDENT_SETS,
    near_instability_threshold: float = NEAR_INSTABILITY_THRESHOLD
) -> AggregateDistribution:
    """
    Solve the stationary distribution over Ind ∪ {∅}.

    Sets are processed by nondecreasing cardinality from π(∅) = 1, each value
    following from its subsets through

        Δ(𝒜)π(𝒜) = μ(𝒜∩𝒦) Σ_i λ_i π(𝒜∖{i}) + λ(𝒜∩ℐ) Σ_k μ_k π(𝒜∖{k})
                    + Σ_i Σ_k λ_i μ_k π(𝒜∖{i,k}),

    and the table is then normalized.

    :raises UnstableModel: If some Δ(𝒜) <= 0
    :raises NumericalUnderflow: If values leave the floating-point range
    """
    arrivals.validate_for(graph)
    if independent_sets is None:
        independent_sets = enumerate_independent_sets(graph, max_sets)

    set_deltas = compute_deltas(graph, arrivals, independent_sets)
    min_delta, argmin = None, None
    if set_deltas:
        argmin = min(set_deltas, key=lambda s: (set_deltas[s], s.sort_key()))
        min_delta = set_deltas[argmin]
        if min_delta <= 0.0:
            raise UnstableModel(argmin, min_delta, graph.set_label(argmin))

    lam, mu = arrivals.lam, arrivals.mu
    order = [_key(s) for s in independent_sets]
    deltas = {_key(s): d for s, d in set_deltas.items()}
    values: Dict[Key, float] = {(0, 0): 1.0}
    running_total = 1.0
    rescaled = 0

    for cm, sm in order:
        if (cm, sm) == (0, 0):
            continue
        customers = list(iter_bits(cm))
        servers = list(iter_bits(sm))
        lam_c = math.fsum(lam[i] for i in customers)
        mu_s = math.fsum(mu[k] for k in servers)

        acc = 0.0
        for i in customers:
            acc += mu_s * lam[i] * values.get((cm & ~(1 << i), sm), 0.0)
        for k in servers:
            acc += lam_c * mu[k] * values.get((cm, sm & ~(1 << k)), 0.0)
        for i in customers:
            rest = cm & ~(1 << i)
            for k in servers:
                acc += lam[i] * mu[k] * values.get((rest, sm & ~(1 << k)), 0.0)

        value = acc / deltas[(cm, sm)]
        values[(cm, sm)] = value
        running_total += value

        if not math.isfinite(running_total):
            raise NumericalUnderflow(f"Unnormalized total is not finite at {graph.set_label(ClassSet(cm, sm))}")
        if running_total > RESCALE_UPPER or running_total < RESCALE_LOWER:
            scale = 1.0 / running_total
            for key in values:
                values[key] *= scale
            running_total = 1.0
            rescaled += 1

    if rescaled:
        logger.warning(f"Rescaled the unnormalized recursion {rescaled} time(s)")

    total = math.fsum(values.values())
    if not (math.isfinite(total) and total > 0.0):
        raise NumericalUnderflow(f"Invalid normalization total {total!r}")
    probabilities = {key: value / total for key, value in values.items()}
    if any(p <= 0.0 for p in probabilities.values()):
        raise NumericalUnderflow("Some stationary probabilities underflowed to zero")

    warnings = []
    if min_delta is not None and min_delta < near_instability_threshold:
        message = (
            f"Near instability: min Δ = {min_delta:.3g} at {graph.set_label(argmin)}; "
            f"metrics scale as 1/Δ and lose relative precision"
        )
        logger.warning(message)
        warnings.append(message)

    distribution = AggregateDistribution(
        graph=graph,
        arrivals=arrivals,
        order=order,
        values=probabilities,
        deltas=deltas,
        normalization_constant=1.0 / probabilities[(0, 0)],
        min_delta=min_delta,
        argmin=argmin,
        warnings=warnings
    )
    logger.info(
        f"Solved {len(order)} sets; π(∅) = {distribution.pi_empty:.12g}"
        + (f", min Δ = {min_delta:.6g} at {graph.set_label(argmin)}" if argmin is not None else "")
    )
    return distribution


def _customer_waiting(
    graph: CompatibilityGraph,
    arrivals: ArrivalModel,
    pi: AggregateDistribution
) -> Tuple[float, ...]:
    lam, mu = arrivals.lam, arrivals.mu
    result = []
    for i in range(graph.customer_count):
        neighbors = graph.customer_neighbors[i]
        terms = []
        for (cm, sm) in pi.order:
            if sm & neighbors:
                continue
            free = neighbors & ~graph.servers_of(cm)
            terms.append((1.0 - math.fsum(mu[k] for k in iter_bits(free))) * pi.values[(cm, sm)])
        result.append(math.fsum(terms))
    return tuple(result)


def waiting_probabilities(
    graph: CompatibilityGraph,
    arrivals: ArrivalModel,
    pi: AggregateDistribution
) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    """
    Probability that an arriving item of each class joins its queue unmatched.

    :return: (ω_i for each customer class, ω_k for each server class)
    """
    customers = _customer_waiting(graph, arrivals, pi)
    servers = _customer_waiting(graph.mirrored(), arrivals.mirrored(), pi.mirrored())
    return customers, servers


def _customer_means(
    arrivals: ArrivalModel,
    pi: AggregateDistribution,
    i: int
) -> Tuple[Dict[Key, float], float]:
    lam, mu = arrivals.lam, arrivals.mu
    p = pi.values
    bit_i = 1 << i
    lam_i = lam[i]
    ell: Dict[Key, float] = {}

    for cm, sm in pi.order:
        if not cm & bit_i or not sm:
            continue
        customers = list(iter_bits(cm))
        servers = list(iter_bits(sm))
        lam_c = math.fsum(lam[j] for j in customers)
        mu_s = math.fsum(mu[k] for k in servers)
        without_i = cm & ~bit_i

        acc = lam_i * mu_s * (p[(cm, sm)] + p.get((without_i, sm), 0.0))
        for k in servers:
            rest = sm & ~(1 << k)
            acc += lam_i * mu[k] * (p.get((cm, rest), 0.0) + p.get((without_i, rest), 0.0))
        for j in customers:
            acc += mu_s * lam[j] * ell.get((cm & ~(1 << j), sm), 0.0)
        for k in servers:
            acc += lam_c * mu[k] * ell.get((cm, sm & ~(1 << k)), 0.0)
        for j in customers:
            rest_c = cm & ~(1 << j)
            for k in servers:
                acc += lam[j] * mu[k] * ell.get((rest_c, sm & ~(1 << k)), 0.0)

        ell[(cm, sm)] = acc / pi.deltas[(cm, sm)]
    return ell, math.fsum(ell.values())


def mean_unmatched_per_class(
    graph: CompatibilityGraph,
    arrivals: ArrivalModel,
    pi: AggregateDistribution,
    class_id: ClassId
) -> PerClassMeans:
    """
    ℓ(𝒜) table and mean number L of unmatched items of one class.

    The recursion sums over customer classes j ∈ 𝒜∩ℐ only. Server classes
    run the same recursion on the mirrored model.
    """
    if class_id.side is Side.CUSTOMER:
        table, total = _customer_means(arrivals, pi, class_id.index)
        return PerClassMeans(class_id, {ClassSet(cm, sm): v for (cm, sm), v in table.items()}, total, pi)

    table, total = _customer_means(arrivals.mirrored(), pi.mirrored(), class_id.index)
    return PerClassMeans(class_id, {ClassSet(sm, cm): v for (cm, sm), v in table.items()}, total, pi)


def _total_means(graph: CompatibilityGraph, arrivals: ArrivalModel, pi: AggregateDistribution) -> Dict[Key, float]:
    lam, mu = arrivals.lam, arrivals.mu
    p = pi.values
    ell: Dict[Key, float] = {}

    for cm, sm in pi.order:
        if not (cm and sm):
            continue
        customers = list(iter_bits(cm))
        servers = list(iter_bits(sm))
        lam_c = math.fsum(lam[i] for i in customers)
        mu_s = math.fsum(mu[k] for k in servers)
        served = arrivals.mu_sum(graph.servers_of(cm))
        feeding = arrivals.lambda_sum(graph.customers_of(sm))

        acc = served * feeding * p[(cm, sm)]
        for i in customers:
            acc += mu_s * lam[i] * ell.get((cm & ~(1 << i), sm), 0.0)
        for k in servers:
            acc += lam_c * mu[k] * ell.get((cm, sm & ~(1 << k)), 0.0)
        for i in customers:
            rest = cm & ~(1 << i)
            for k in servers:
                acc += lam[i] * mu[k] * ell.get((rest, sm & ~(1 << k)), 0.0)

        ell[(cm, sm)] = acc / pi.deltas[(cm, sm)]
    return ell


def mean_unmatched_total(
    graph: CompatibilityGraph,
    arrivals: ArrivalModel,
    pi: AggregateDistribution
) -> TotalMeans:
    """ℓ_ℐ(𝒜) table, L_ℐ, and L_𝒦 from the mirrored model."""
    customers = _total_means(graph, arrivals, pi)
    servers = _total_means(graph.mirrored(), arrivals.mirrored(), pi.mirrored())
    return TotalMeans(
        table={ClassSet(cm, sm): v for (cm, sm), v in customers.items()},
        total_customers=math.fsum(customers.values()),
        total_servers=math.fsum(servers.values())
    )


def mean_waiting_times(
    arrivals: ArrivalModel,
    mean_unmatched: Sequence[float],
    total: float,
    side: Side = Side.CUSTOMER
) -> Tuple[Tuple[float, ...], float]:
    """
    Little's law in slots: W_i = L_i / λ_i (W_k = L_k / μ_k for servers).
    One item of each side arrives per slot, so the average wait equals the total.
    """
    rates = arrivals.lam if side is Side.CUSTOMER else arrivals.mu
    return tuple(l / r for l, r in zip(mean_unmatched, rates)), total


def transition_type_probabilities(
    graph: CompatibilityGraph,
    arrivals: ArrivalModel,
    pi: AggregateDistribution
) -> Tuple[Dict[TransitionType, float], float]:
    """
    Stationary probability of each transition type for an arriving pair (i, k).

    In state 𝒜 the customer finds a partner iff i ∈ ℐ(𝒜∩𝒦) and the server
    iff k ∈ 𝒦(𝒜∩ℐ); when neither does, the pair is matched together iff i ∼ k.

    :return: (probabilities by type, P(−/−) − P(+/+))
    """
    lam = arrivals.lam
    all_customers = graph.all_customers_mask
    all_servers = graph.all_servers_mask
    terms: Dict[TransitionType, List[float]] = {t: [] for t in TransitionType}

    for (cm, sm) in pi.order:
        weight = pi.values[(cm, sm)]
        finds_server = graph.customers_of(sm)
        finds_customer = graph.servers_of(cm)
        lw = arrivals.lambda_sum(finds_server)
        lw_not = arrivals.lambda_sum(all_customers & ~finds_server)
        mw = arrivals.mu_sum(finds_customer)
        mw_not = arrivals.mu_sum(all_servers & ~finds_customer)

        terms[TransitionType.MINUS_MINUS].append(weight * lw * mw)
        terms[TransitionType.EQUAL_PM].append(weight * lw * mw_not)
        terms[TransitionType.PM_EQUAL].append(weight * lw_not * mw)
        for i in iter_bits(all_customers & ~finds_server):
            open_servers = all_servers & ~finds_customer
            together = graph.customer_neighbors[i] & open_servers
            terms[TransitionType.EQUAL_EQUAL].append(weight * lam[i] * arrivals.mu_sum(together))
            terms[TransitionType.PLUS_PLUS].append(weight * lam[i] * arrivals.mu_sum(open_servers & ~together))

    probabilities = {t: math.fsum(values) for t, values in terms.items()}
    residual = probabilities[TransitionType.MINUS_MINUS] - probabilities[TransitionType.PLUS_PLUS]
    return probabilities, residual


def recursion_identity_residual(
    graph: CompatibilityGraph,
    arrivals: ArrivalModel,
    pi: AggregateDistribution
) -> float:
    """
    Largest violation over Ind of

        μ(𝒦(𝒜∩ℐ))λ(ℐ(𝒜∩𝒦))π(𝒜)
            = Σ_i Σ_k λ_i μ_k (π(𝒜) + π(𝒜∖{i}) + π(𝒜∖{k}) + π(𝒜∖{i,k})).
    """
    lam, mu = arrivals.lam, arrivals.mu
    p = pi.values
    worst = 0.0
    for cm, sm in pi.order:
        if not (cm and sm):
            continue
        left = arrivals.mu_sum(graph.servers_of(cm)) * arrivals.lambda_sum(graph.customers_of(sm)) * p[(cm, sm)]
        right = []
        for i in iter_bits(cm):
            for k in iter_bits(sm):
                right.append(lam[i] * mu[k] * (
                    p[(cm, sm)]
                    + p.get((cm & ~(1 << i), sm), 0.0)
                    + p.get((cm, sm & ~(1 << k)), 0.0)
                    + p.get((cm & ~(1 << i), sm & ~(1 << k)), 0.0)
                ))
        worst = max(worst, abs(left - math.fsum(right)))
    return worst


def solve(
    graph: CompatibilityGraph,
    arrivals: ArrivalModel,
    max_sets: int = DEFAULT_MAX_INDEPENDENT_SETS,
    near_instability_threshold: float = NEAR_INSTABILITY_THRESHOLD
) -> PerformanceReport:
    """
    Compute every stationary metric of the model.

    :raises UnstableModel: If the model is not stable
    """
    pi = solve_pi(
        graph,
        arrivals,
        max_sets=max_sets,
        near_instability_threshold=near_instability_threshold
    )
    customer_waiting, server_waiting = waiting_probabilities(graph, arrivals, pi)

    customer_means = tuple(
        mean_unmatched_per_class(graph, arrivals, pi, c).total for c in graph.class_ids(Side.CUSTOMER)
    )
    server_means = tuple(
        mean_unmatched_per_class(graph, arrivals, pi, c).total for c in graph.class_ids(Side.SERVER)
    )
    totals = mean_unmatched_total(graph, arrivals, pi)

    customer_wait, average_customer_wait = mean_waiting_times(
        arrivals, customer_means, totals.total_customers, Side.CUSTOMER
    )
    server_wait, average_server_wait = mean_waiting_times(
        arrivals, server_means, totals.total_servers, Side.SERVER
    )
    transitions, residual = transition_type_probabilities(graph, arrivals, pi)

    return PerformanceReport(
        graph=graph,
        arrivals=arrivals,
        pi=pi,
        pi_empty=pi.pi_empty,
        customer_waiting=customer_waiting,
        server_waiting=server_waiting,
        customer_mean_unmatched=customer_means,
        server_mean_unmatched=server_means,
        total_customers=totals.total_customers,
        total_servers=totals.total_servers,
        customer_mean_wait=customer_wait,
        server_mean_wait=server_wait,
        average_customer_wait=average_customer_wait,
        average_server_wait=average_server_wait,
        transition_probs=transitions,
        balance_residual=residual,
        warnings=list(pi.warnings)
    )

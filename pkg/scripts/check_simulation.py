#!/usr/bin/env python3
"""
Check the simulator against the analytic solver on the five-by-four path
model at rho = 0.3, 0.5 and 0.7, and the renewal identity for the empty state.

Full protocol: 20 replications of 10^6 measured slots after 10^6 warm-up
slots. --quick uses 10^5 slots and three times looser tolerances.
"""

import sys
import os
import json
import logging
import argparse
from typing import Optional, Dict, Any
from dataclasses import dataclass

# Add the app directory to the Python path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.config.model_spec import load_model_spec
from app.services.model import Side
from app.services.simulator import SimulationConfig, simulate
from app.services.solver import solve

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

MODELS_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs", "models")


@dataclass
class TestResult:
    """Represents the result of a test case."""
    name: str
    passed: bool
    error: Optional[str] = None
    debug_info: Optional[Dict[str, Any]] = None


def run_test(name: str, test_func) -> TestResult:
    """Run a test and return its result."""
    try:
        debug_info = test_func()
        return TestResult(name=name, passed=True, debug_info=debug_info)
    except Exception as e:
        return TestResult(name=name, passed=False, error=str(e))


def check_class_metrics(rho: float, config: SimulationConfig, looseness: float) -> Dict[str, Any]:
    """Per-class waiting probabilities within 0.01 and mean waits within 5%."""
    graph, arrivals = load_model_spec(os.path.join(MODELS_DIR, "path_4x5.json")).build(rho)
    report = solve(graph, arrivals)
    estimate = simulate(graph, arrivals, config)

    worst_waiting, worst_wait = 0.0, 0.0
    for side in (Side.CUSTOMER, Side.SERVER):
        for class_id in graph.class_ids(side):
            name = graph.class_name(class_id)
            waiting_error = abs(estimate.get("waiting_probability", name).mean - report.waiting_probability(class_id))
            analytic_wait = report.mean_wait(class_id)
            wait_error = abs(estimate.get("mean_wait", name).mean - analytic_wait) / analytic_wait
            worst_waiting = max(worst_waiting, waiting_error)
            worst_wait = max(worst_wait, wait_error)
            if waiting_error > 0.01 * looseness:
                raise AssertionError(f"waiting probability of {name} off by {waiting_error:.4g}")
            if wait_error > 0.05 * looseness:
                raise AssertionError(f"mean wait of {name} off by {100 * wait_error:.2f}%")

    logger.info(f"rho={rho}: worst waiting error {worst_waiting:.4g}, worst relative wait error {worst_wait:.4g}")
    return {"rho": rho, "worst_waiting_error": worst_waiting, "worst_relative_wait_error": worst_wait}


def check_return_time(model: str, parameter: Optional[float], config: SimulationConfig) -> Dict[str, Any]:
    """Mean return time to the empty state within 3% of 1/π(∅)."""
    graph, arrivals = load_model_spec(os.path.join(MODELS_DIR, model)).build(parameter)
    expected = 1.0 / solve(graph, arrivals).pi_empty
    observed = simulate(graph, arrivals, config).get("mean_return_time").mean
    relative = abs(observed - expected) / expected
    if relative > 0.03:
        raise AssertionError(f"return time {observed:.6g} vs 1/π(∅) = {expected:.6g}")
    return {"model": model, "expected": expected, "observed": observed}


def main():
    """Run the simulation checks."""
    parser = argparse.ArgumentParser(description="Simulation versus analytic checks")
    parser.add_argument("--quick", action="store_true", help="10^5 slots with looser tolerances")
    parser.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    parser.add_argument("--seed", type=int, default=20240101)
    args = parser.parse_args()

    slots = 100_000 if args.quick else 1_000_000
    looseness = 3.0 if args.quick else 1.0
    config = SimulationConfig(
        seed=args.seed,
        warmup_slots=slots,
        measured_slots=slots,
        replications=20,
        workers=args.workers
    )
    logger.info(f"Starting simulation checks with {slots} slots per replication")

    checks = [
        (f"Class metrics at rho={rho}", lambda rho=rho: check_class_metrics(rho, config, looseness))
        for rho in (0.3, 0.5, 0.7)
    ]
    checks += [
        ("Return time on the N-graph", lambda: check_return_time("n_graph.json", None, config)),
        ("Return time on the path model at rho=0.5", lambda: check_return_time("path_4x5.json", 0.5, config)),
    ]

    # Run tests and collect results
    results = []
    for test_name, test_func in checks:
        result = run_test(test_name, test_func)
        results.append(result)

        if result.passed:
            logger.info(f"✅ {test_name}: PASSED")
            if result.debug_info:
                logger.info(f"Debug Info: {json.dumps(result.debug_info, indent=2)}")
        else:
            logger.error(f"❌ {test_name}: FAILED - {result.error}")

    # Print summary
    total = len(results)
    passed = sum(1 for r in results if r.passed)
    failed = total - passed

    logger.info("\nTest Summary:")
    logger.info(f"Total Tests: {total}")
    logger.info(f"Passed: {passed}")
    logger.info(f"Failed: {failed}")

    if failed > 0:
        logger.info("\nFailed Tests:")
        for result in results:
            if not result.passed:
                logger.info(f"- {result.name}: {result.error}")
        sys.exit(1)

    logger.info("\n✨ All checks passed successfully!")


if __name__ == "__main__":
    main()

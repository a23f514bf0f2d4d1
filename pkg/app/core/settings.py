# app/core/settings.py

import os
import logging

# -------------------------------------------------------------------------
# App Metadata
# -------------------------------------------------------------------------
APP_NAME = "FCFM Matching"
APP_VERSION = "0.1.0"

# -------------------------------------------------------------------------
# Logging Defaults
# -------------------------------------------------------------------------
DEFAULT_LOG_LEVEL = logging.INFO

# -------------------------------------------------------------------------
# Model Limits
# -------------------------------------------------------------------------
# Customer and server masks must fit one 64-bit word together.
MAX_CLASS_COUNT = 64

# Tolerance when validating that arrival probabilities sum to one.
PROBABILITY_SUM_TOLERANCE = 1e-12

# Upper bound on |Ind ∪ {∅}| before exact solving is refused.
DEFAULT_MAX_INDEPENDENT_SETS = 2 ** 22

# Brute-force stability checks walk every subset of one side.
MAX_BRUTE_FORCE_SIDE = 24

# -------------------------------------------------------------------------
# Solver Defaults
# -------------------------------------------------------------------------
# Metrics scale as 1/Δ, so a tiny margin loses relative precision.
NEAR_INSTABILITY_THRESHOLD = 1e-9

# Unnormalized totals are rescaled when they leave this range.
RESCALE_UPPER = 1e300
RESCALE_LOWER = 1e-300

# -------------------------------------------------------------------------
# Simulation Defaults
# -------------------------------------------------------------------------
DEFAULT_SEED = 20240101
DEFAULT_WARMUP_SLOTS = 1_000_000
DEFAULT_MEASURED_SLOTS = 1_000_000
DEFAULT_REPLICATIONS = 20

# Class draws are generated in blocks to bound memory.
RANDOM_BLOCK_SIZE = 65_536

# Final queue length above this multiple of the early median flags instability.
INSTABILITY_MEDIAN_FACTOR = 10

# The early median is taken over this leading fraction of all simulated slots.
INSTABILITY_EARLY_FRACTION = 0.1

# -------------------------------------------------------------------------
# Oracle Defaults
# -------------------------------------------------------------------------
DEFAULT_ORACLE_MAX_LENGTH = 30
MAX_ORACLE_CLASS_COUNT = 12

# -------------------------------------------------------------------------
# Output Defaults
# -------------------------------------------------------------------------
DEFAULT_OUTPUT_DIR = "results"
SIGNIFICANT_DIGITS = 12

# |z| above this fails `compare`.
COMPARE_Z_THRESHOLD = 4.0

# -------------------------------------------------------------------------
# Environment Handling
# -------------------------------------------------------------------------
ENV_PREFIX = "MATCH_"
ENV = os.getenv("MATCH_ENV", "development").lower()
IS_PRODUCTION = ENV == "production"

if IS_PRODUCTION:
    DEFAULT_LOG_LEVEL = logging.WARNING


def log_current_settings():
    """
    Log a brief summary of important settings for debugging purposes.
    """
    logging.info(f"{APP_NAME} v{APP_VERSION}, ENV={ENV}, Production={IS_PRODUCTION}")
    logging.info(
        f"Simulation defaults: warmup={DEFAULT_WARMUP_SLOTS}, "
        f"measured={DEFAULT_MEASURED_SLOTS}, replications={DEFAULT_REPLICATIONS}"
    )
    logging.info(f"Independent-set cap: {DEFAULT_MAX_INDEPENDENT_SETS}")

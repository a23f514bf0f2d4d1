#!/usr/bin/env python3
"""
Create the results archive tables.

Usage: scripts/init_db.py [URL] [--force]
The URL defaults to database.url from the configuration or MATCH_DATABASE_URL.
"""

import sys
import os
import logging

# Add the app directory to the Python path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.config.loader import load_config, ConfigError
from app.database.base import configure_database, get_database_url, init_db

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


def main():
    args = [a for a in sys.argv[1:] if not a.startswith("--")]
    force = "--force" in sys.argv[1:]

    try:
        config = load_config()
    except ConfigError as e:
        logger.error(f"Failed to load configuration: {e}")
        sys.exit(2)

    url = get_database_url(args[0] if args else config["database"]["url"])
    if url is None:
        logger.error("No archive URL given; pass one or set database.url / MATCH_DATABASE_URL")
        sys.exit(2)

    configure_database(url)
    init_db(force=force)
    logger.info(f"Archive ready at {url}")


if __name__ == "__main__":
    main()

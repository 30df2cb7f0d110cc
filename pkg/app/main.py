"""Main entry point for the evoreserve command line."""

import logging
import sys

import logfire

from app.cli.router import dispatch
from app.config import Config

__all__ = ["configure_logging", "dispatch", "main"]


def configure_logging() -> None:
    """Configure Logfire, with standard logging as a stdout fallback."""
    logfire.configure(
        service_name=Config.LOGFIRE_SERVICE_NAME,
        environment=Config.ENVIRONMENT,
        token=Config.LOGFIRE_TOKEN or None,
        send_to_logfire="if-token-present",
        console=logfire.ConsoleOptions(min_log_level=Config.LOG_LEVEL.lower()),
    )

    logging.basicConfig(
        level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler(sys.stdout)],
    )


def main() -> None:
    """Run the command line."""
    configure_logging()
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()

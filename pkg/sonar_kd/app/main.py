"""Command-line entry point."""

import logging
import sys
from typing import Optional, Sequence

from sonar_kd.app.commands import COMMAND_HANDLERS
from sonar_kd.core.config import parse_args
from sonar_kd.errors import SonarKDError
from sonar_kd.ui.display import configure_logging, create_rich_display, write_error

logger = logging.getLogger(__name__)


def main(argv: Optional[Sequence[str]] = None) -> None:
    """Parse arguments, run one subcommand and map errors to exit codes."""
    try:
        args = parse_args(argv)
        configure_logging(args.verbose)
        handler = COMMAND_HANDLERS[args.command]
        handler(args, create_rich_display())
    except SonarKDError as exc:
        logger.debug("%s failed", exc.code, exc_info=True)
        write_error(exc.to_envelope())  # type: ignore[arg-type]
        sys.exit(exc.exit_code)
    except KeyboardInterrupt:
        write_error({"code": "interrupted", "message": "interrupted", "context": {}})
        sys.exit(130)

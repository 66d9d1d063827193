"""
Error handling utilities for the estimation CLI.
Every command reports failures as a JSON document on stderr and exits with
a code per error family.
"""
import functools
import json
import logging
from typing import Any, Callable, Dict

import click

from config import config
from services.exceptions import ConfigError, DataError, EstimationError, SolverError

# Configure logging
logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)


class ExitCodes:
    """Process exit codes for the estimation CLI."""
    SUCCESS = 0
    INTERNAL_ERROR = 1
    CONFIG_ERROR = 2
    DATA_ERROR = 3
    SOLVER_ERROR = 4


def _echo_error(code: str, message: str, details: Any = None) -> Dict[str, Any]:
    payload = {"error": {"code": code, "message": message, "details": details}}
    click.echo(json.dumps(payload, default=str), err=True)
    return payload


def handle_config_error(error: ConfigError) -> int:
    """
    Handle configuration errors (unreadable files, invalid JSON, schema violations).

    Args:
        error: The exception raised.

    Returns:
        The process exit code.
    """
    logger.error(f"Configuration error: {error}")
    _echo_error(error.code, error.message, error.details)
    return ExitCodes.CONFIG_ERROR


def handle_data_error(error: DataError) -> int:
    """
    Handle dataset and measurement errors.

    Args:
        error: The exception raised.

    Returns:
        The process exit code.
    """
    logger.error(f"Data error: {error}")
    _echo_error(error.code, error.message, error.details)
    return ExitCodes.DATA_ERROR


def handle_solver_error(error: SolverError) -> int:
    logger.error(f"Solver error: {error}")
    _echo_error(error.code, error.message, error.details)
    return ExitCodes.SOLVER_ERROR


def handle_internal_error(error: Exception) -> int:
    """Contract violations and anything unexpected."""
    logger.error(f"Internal error: {error}")
    code = error.code if isinstance(error, EstimationError) else "INTERNAL_ERROR"
    _echo_error(code, str(error), getattr(error, "details", None))
    return ExitCodes.INTERNAL_ERROR


def register_error_handlers(command: Callable) -> Callable:
    """
    Wrap a command so toolkit errors become JSON diagnostics and exit codes.

    Args:
        command: The click command callback.
    """
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except ConfigError as e:
            code = handle_config_error(e)
        except DataError as e:
            code = handle_data_error(e)
        except SolverError as e:
            code = handle_solver_error(e)
        except EstimationError as e:
            code = handle_internal_error(e)
        click.get_current_context().exit(code)

    return wrapper

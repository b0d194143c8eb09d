"""
Logging configuration using Loguru.
"""
import os
import sys
from typing import Optional

from loguru import logger

from config.settings import settings


def setup_logging(
    level: Optional[str] = None,
    fmt: Optional[str] = None,
    log_dir: Optional[str] = None,
):
    """Configure structured logging.

    Args:
        level: Log level, defaults to settings.log_level
        fmt: "json" or "text", defaults to settings.log_format
        log_dir: Directory for the rotating file sink; None disables it
            unless settings.log_dir is set

    Returns:
        The configured loguru logger
    """
    level = level or settings.log_level
    fmt = fmt or settings.log_format
    log_dir = log_dir if log_dir is not None else settings.log_dir

    # Remove default handler
    logger.remove()

    if fmt == "json":
        logger.add(
            sys.stderr,
            format="{time} | {level} | {message}",
            level=level,
            serialize=True,
            backtrace=True,
            diagnose=False,
        )
    else:
        format_string = (
            "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | "
            "<cyan>{name}</cyan>:<cyan>{function}</cyan> - <level>{message}</level>"
        )
        logger.add(
            sys.stderr,
            format=format_string,
            level=level,
            colorize=True,
            backtrace=True,
            diagnose=False,
        )

    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        logger.add(
            os.path.join(log_dir, "zdsynth_{time}.log"),
            rotation="1 day",
            retention="30 days",
            compression="zip",
            level=level,
            serialize=(fmt == "json"),
        )

    logger.debug("Logging configured")
    return logger

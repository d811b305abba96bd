"""
Logging helpers for the entry points
"""
import logging
import os
from typing import Optional, Union

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def resolve_level(level: Optional[Union[int, str]] = None) -> int:
    """Numeric log level from an explicit value or the LOG_LEVEL environment variable"""
    if level is None:
        level = os.environ.get("LOG_LEVEL", "INFO")
    if isinstance(level, int):
        return level
    resolved = logging.getLevelName(level.upper())
    return resolved if isinstance(resolved, int) else logging.INFO


def setup_logging(name: str, level: Optional[Union[int, str]] = None) -> logging.Logger:
    """
    Set up logging for an entry point

    Configures the root handler once and returns the named logger.
    """
    level = resolve_level(level)
    logging.basicConfig(level=level, format=LOG_FORMAT)
    logging.getLogger().setLevel(level)
    logger = logging.getLogger(name)
    logger.setLevel(level)
    return logger

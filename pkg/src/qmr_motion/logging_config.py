import logging
import os
import sys
from typing import Optional

from dotenv import load_dotenv

LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "warning": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


def resolve_level(level: Optional[str] = None) -> int:
    """Explicit level first, then QMR_LOG_LEVEL (from the environment or a .env file), then info."""
    load_dotenv()
    name = (level or os.getenv("QMR_LOG_LEVEL") or "info").strip().lower()
    if name not in LEVELS:
        raise ValueError(f"Unknown log level '{name}'. Expected one of: error, warn, info, debug.")
    return LEVELS[name]


def setup_logging(level: Optional[str] = None, log_file: Optional[str] = None):
    logger = logging.getLogger()
    stream_level = resolve_level(level)
    logger.setLevel(logging.DEBUG if log_file else stream_level)

    # Remove any existing handlers
    for handler in logger.handlers[:]:
        handler.close()
        logger.removeHandler(handler)

    # stdout carries JSON/CSV reports, so human-readable logs go to stderr
    stream_handler = logging.StreamHandler(sys.stderr)
    stream_handler.setLevel(stream_level)
    stream_handler.setFormatter(logging.Formatter('%(levelname)s %(name)s: %(message)s'))
    logger.addHandler(stream_handler)

    if log_file:
        file_handler = logging.FileHandler(log_file, mode='w')
        file_handler.setLevel(logging.DEBUG)
        file_formatter = logging.Formatter('%(asctime)s - %(levelname)s - %(filename)s:%(lineno)d - %(message)s')
        file_handler.setFormatter(file_formatter)
        logger.addHandler(file_handler)

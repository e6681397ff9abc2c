#!/usr/bin/env python3
"""
Logger utility for the situation recognizer
"""

import logging
import sys
import traceback
from pathlib import Path
from typing import Optional

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
ROOT_LOGGER = "lib"


def get_logger(name: str = None) -> logging.Logger:
    """Get a logger; handlers live on the package root set up by setup_logging"""
    if name is None:
        name = ROOT_LOGGER
    return logging.getLogger(name)


def setup_logging(log_dir: Optional[Path] = None, debug: bool = False) -> logging.Logger:
    """Attach file and console handlers to the package root logger"""
    logger = logging.getLogger(ROOT_LOGGER)
    logger.setLevel(logging.DEBUG)

    # Re-running in one process (tests, sweeps) must not stack handlers
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    formatter = logging.Formatter(LOG_FORMAT)

    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_dir / "situformer.log")
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(logging.DEBUG if debug else logging.INFO)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)
    logger.propagate = False

    return logger


def log_exception(exception: Exception, context: str = "", logger_name: str = None):
    """Log an exception with full traceback"""
    logger = get_logger(logger_name)

    error_msg = f"{context}: {str(exception)}" if context else str(exception)
    logger.error(error_msg)
    logger.debug(traceback.format_exc())


if __name__ == "__main__":
    logger = setup_logging(debug=True)
    logger.info("Logger test successful")

    try:
        raise ValueError("Test exception")
    except Exception as e:
        log_exception(e, "Testing exception logging")

#!/usr/bin/env python3
"""
CochainFEM - Unified Logging Configuration
==========================================
Configures the package logger with file rotation and coloured console output.
"""

import logging
import logging.handlers
import sys
from pathlib import Path
from typing import Optional

import colorlog

PACKAGE_LOGGER = "cochainfem"


def setup_logging(name: str = PACKAGE_LOGGER, log_dir: str = "logs", level: str = "INFO") -> logging.Logger:
    """
    Configure logging with file rotation and console output.

    Module loggers created with logging.getLogger(__name__) inside the
    package are children of the package logger and share its handlers.

    Args:
        name: Logger name
        log_dir: Directory for log files
        level: Console level name

    Returns:
        Configured logger instance
    """
    Path(log_dir).mkdir(parents=True, exist_ok=True)

    logger = logging.getLogger(name)
    logger.setLevel(logging.DEBUG)

    # Prevent duplicate handlers
    if logger.handlers:
        return logger

    # File handler with rotation (10MB max, 5 backups)
    file_handler = logging.handlers.RotatingFileHandler(
        Path(log_dir) / "cochainfem.log",
        maxBytes=10 * 1024 * 1024,
        backupCount=5,
        encoding="utf-8",
    )
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(logging.Formatter(
        "%(asctime)s - %(name)s - %(levelname)s - [%(filename)s:%(lineno)d] - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    ))

    console_handler = colorlog.StreamHandler(sys.stdout)
    console_handler.setLevel(getattr(logging, level.upper(), logging.INFO))
    console_handler.setFormatter(colorlog.ColoredFormatter(
        "%(log_color)s%(asctime)s | %(levelname)-8s | %(name)s | %(message)s",
        log_colors={
            "DEBUG": "cyan",
            "INFO": "green",
            "WARNING": "yellow",
            "ERROR": "red",
            "CRITICAL": "bold_red",
        },
    ))

    logger.addHandler(file_handler)
    logger.addHandler(console_handler)
    logger.propagate = False
    return logger


def get_logger(name: Optional[str] = None) -> logging.Logger:
    """Get a child of the package logger."""
    base_logger = logging.getLogger(PACKAGE_LOGGER)
    if name:
        return base_logger.getChild(name)
    return base_logger

#!/usr/bin/env python3
"""
Centralized logging for the layerpath pipeline.

Usage:
    from logger import get_logger, init_script_logging

    logger, log_file = init_script_logging('search', verbose=True)
    logger.info("[SEARCH] 400 instances queued")

Log files land in logs/ at the project root, never inside a run directory,
so run directories stay byte-identical across reruns.
"""

import logging
import sys
from datetime import datetime
from pathlib import Path

LOGS_DIR = Path(__file__).parent.parent / 'logs'

FILE_FORMAT = '%(asctime)s | %(levelname)-8s | %(name)s:%(lineno)d | %(message)s'
CONSOLE_FORMAT = '[%(levelname)s] %(message)s'

_configured = False


class ColoredFormatter(logging.Formatter):
    """Console formatter that tints the level name when attached to a TTY."""

    COLORS = {
        'DEBUG': '\033[36m',
        'INFO': '\033[32m',
        'WARNING': '\033[33m',
        'ERROR': '\033[31m',
        'CRITICAL': '\033[35m',
    }
    RESET = '\033[0m'

    def format(self, record):
        if not (hasattr(sys.stdout, 'isatty') and sys.stdout.isatty()):
            return super().format(record)
        plain = record.levelname
        color = self.COLORS.get(plain)
        if color:
            record.levelname = f"{color}{plain}{self.RESET}"
        try:
            return super().format(record)
        finally:
            record.levelname = plain


def _console_level(verbose, console_level):
    if console_level:
        level = getattr(logging, console_level.upper(), None)
        if not isinstance(level, int):
            raise ValueError(f"Unknown console level: {console_level}")
        return level
    return logging.DEBUG if verbose else logging.INFO


def setup_logging(log_file=None, verbose=False, console_level=None):
    """
    Configure the root logger once per process.

    Args:
        log_file: Path to the log file (relative to the project root or absolute).
            Defaults to logs/layerpath_<timestamp>.log
        verbose: If True, the console shows DEBUG records
        console_level: Explicit console level name, overrides verbose

    Returns:
        Path of the log file, or None when logging was already configured
    """
    global _configured

    if _configured:
        return None

    if log_file is None:
        stamp = datetime.now().strftime('%Y%m%d_%H%M%S')
        log_file = LOGS_DIR / f'layerpath_{stamp}.log'
    log_file = Path(log_file)
    if not log_file.is_absolute():
        log_file = Path(__file__).parent.parent / log_file
    log_file.parent.mkdir(parents=True, exist_ok=True)

    root = logging.getLogger()
    root.setLevel(logging.DEBUG)
    root.handlers.clear()

    file_handler = logging.FileHandler(log_file, encoding='utf-8')
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(logging.Formatter(FILE_FORMAT, datefmt='%Y-%m-%d %H:%M:%S'))
    root.addHandler(file_handler)

    console = logging.StreamHandler(sys.stdout)
    console.setLevel(_console_level(verbose, console_level))
    console.setFormatter(ColoredFormatter(CONSOLE_FORMAT))
    root.addHandler(console)

    # matplotlib chatters at DEBUG about font discovery
    logging.getLogger('matplotlib').setLevel(logging.WARNING)

    _configured = True
    logging.getLogger(__name__).debug(f"Logging to {log_file}")
    return log_file


def get_logger(name):
    """Return the named logger (usually called with __name__)."""
    return logging.getLogger(name)


def init_script_logging(script_name, verbose=False):
    """
    Initialize logging for one CLI subcommand.

    Args:
        script_name: Subcommand name, used in the log file name
        verbose: Enable DEBUG output on the console

    Returns:
        (logger, log file path)
    """
    stamp = datetime.now().strftime('%Y%m%d_%H%M%S')
    log_file = setup_logging(LOGS_DIR / f'layerpath_{script_name}_{stamp}.log', verbose=verbose)
    return get_logger(script_name), log_file

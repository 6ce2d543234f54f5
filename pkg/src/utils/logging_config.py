"""
Logging setup for the inspection CLI and services.

One rotating file per day under the log directory receives everything at
the requested level; the console only shows warnings so CLI output (reports,
progress bars) stays readable. Modules never configure logging themselves,
they call get_logger(__name__) and leave setup to the entry point.
"""

import logging
import logging.handlers
from datetime import datetime
from pathlib import Path
from typing import Union

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'
LOG_FILE_BYTES = 10 * 1024 * 1024
LOG_FILE_BACKUPS = 5

# Third-party loggers that flood DEBUG output during training and I/O
QUIET_LOGGERS = ("PIL", "matplotlib", "urllib3", "torch")


def parse_level(level: Union[str, int]) -> int:
    """Accept a level name ("DEBUG") or number; unknown names raise ValueError."""
    if isinstance(level, int):
        return level
    value = logging.getLevelName(str(level).upper())
    if not isinstance(value, int):
        raise ValueError(f"Unknown log level: {level}")
    return value


def setup_logging(log_level: Union[str, int] = logging.INFO, log_to_file: bool = True,
                  log_dir: Union[str, Path] = "logs") -> logging.Logger:
    """
    Configure the root logger for a CLI run.

    Args:
        log_level: Minimum level for the log file (name or number)
        log_to_file: Also write the rotating daily log file
        log_dir: Directory receiving the log files

    Returns:
        logging.Logger: The configured root logger
    """
    level = parse_level(log_level)
    formatter = logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)

    root_logger = logging.getLogger()
    root_logger.setLevel(level)
    root_logger.handlers.clear()

    console_handler = logging.StreamHandler()
    console_handler.setLevel(max(level, logging.WARNING))
    console_handler.setFormatter(formatter)
    root_logger.addHandler(console_handler)

    log_file = None
    if log_to_file:
        log_path = Path(log_dir)
        log_path.mkdir(parents=True, exist_ok=True)
        log_file = log_path / f"nameplate_inspection_{datetime.now().strftime('%Y%m%d')}.log"
        file_handler = logging.handlers.RotatingFileHandler(
            log_file, maxBytes=LOG_FILE_BYTES, backupCount=LOG_FILE_BACKUPS, encoding="utf-8")
        file_handler.setLevel(level)
        file_handler.setFormatter(formatter)
        root_logger.addHandler(file_handler)

    for name in QUIET_LOGGERS:
        logging.getLogger(name).setLevel(max(level, logging.WARNING))

    logger = logging.getLogger("nameplate_inspection")
    logger.info(f"Logging initialized at {logging.getLevelName(level)}"
                + (f", writing {log_file}" if log_file else ", console only"))
    return root_logger


def get_logger(name):
    """Logger for a module; pass __name__."""
    return logging.getLogger(name)

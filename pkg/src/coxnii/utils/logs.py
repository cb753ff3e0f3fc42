import logging
import sys
from pathlib import Path
from typing import Optional

ROOT_LOGGER_NAME = 'coxnii'


def check_level(level: int | str) -> int:
    """Check if the logging level is valid and return the corresponding integer value."""
    if isinstance(level, str):
        if hasattr(logging, 'getLevelNamesMapping'):
            level_map = logging.getLevelNamesMapping()
        else:  # Python < 3.11; same as the stdlib implementation
            level_map = logging._nameToLevel.copy()
        try:
            level = level_map[level.upper()]
        except KeyError:
            raise ValueError(f"Invalid logging level '{level}', must be one of {list(level_map.keys())}")
    if isinstance(level, bool) or not isinstance(level, int):
        raise TypeError(f"Logging level must be an int or str, got {type(level)}")
    return level


def get_log_format(asctime=True, name=True, levelname=True) -> str:
    """Get the default log format string."""
    parts = []
    if asctime:
        parts.append("%(asctime)s")
    if name:
        parts.append("%(name)s")
    if levelname:
        parts.append("%(levelname)s")
    prefix = " - ".join(parts)
    return f"[{prefix}] %(message)s" if prefix else "%(message)s"


def _qualified(name: Optional[str]) -> str:
    if not name:
        return ROOT_LOGGER_NAME
    if name == ROOT_LOGGER_NAME or name.startswith(ROOT_LOGGER_NAME + '.'):
        return name
    return f'{ROOT_LOGGER_NAME}.{name}'


def get_logger(
        name: Optional[str] = None,
        level: Optional[int | str] = None,
        fmt: Optional[str] = None,
        path: Optional[str | Path] = None,
        stdout: Optional[bool] = None,
) -> logging.Logger:
    """Get a logger under the package root, optionally attaching a file and/or stdout handler.

    Module loggers are created without a level so they inherit from the package root, whose level is
    controlled by ``coxnii.config.configure(log_level=...)``.
    """
    logger = logging.getLogger(_qualified(name))
    if level is not None:
        logger.setLevel(check_level(level))
    formatter = logging.Formatter(fmt or get_log_format())
    if path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(path)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)
    if stdout:
        stdout_handler = logging.StreamHandler(sys.stdout)
        stdout_handler.setFormatter(formatter)
        logger.addHandler(stdout_handler)
    return logger


def set_root_level(level: int | str) -> int:
    level = check_level(level)
    root = logging.getLogger(ROOT_LOGGER_NAME)
    if not root.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(get_log_format()))
        root.addHandler(handler)
    root.setLevel(level)
    return level

"""Log formatting for the command line."""

import logging
import sys


FORMAT = '[%(name)s] %(message)s'


class ComponentFormatter(logging.Formatter):
    """Format records as `[Component] message`.

    The component is the last part of the logger name, so records from
    `voxeltrack.tracker` are shown as `[Tracker] ...`.
    """

    def format(self, record: logging.LogRecord) -> str:
        component = record.name.rsplit('.', 1)[-1].replace('_', ' ').title().replace(' ', '')
        message = record.getMessage()
        if record.levelno >= logging.WARNING:
            message = f'{record.levelname.title()}: {message}'
        text = f'[{component}] {message}'
        if record.exc_info:
            text = f'{text}\n{self.formatException(record.exc_info)}'
        return text


def verbosity_level(verbosity: int) -> int:
    """Map a `-v`/`-q` count to a logging level.

    >>> verbosity_level(0) == logging.INFO
    True
    >>> verbosity_level(1) == logging.DEBUG
    True
    >>> verbosity_level(-1) == logging.WARNING
    True
    """
    if verbosity > 0:
        return logging.DEBUG
    if verbosity < 0:
        return logging.WARNING
    return logging.INFO


def configure(verbosity: int = 0) -> None:
    """Install the stderr handler on the package logger."""
    logger = logging.getLogger('voxeltrack')
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(ComponentFormatter(FORMAT))
    logger.addHandler(handler)
    logger.setLevel(verbosity_level(verbosity))

"""
Logging setup
Coloured stderr logging shared by every module.
"""

import logging
import sys
from typing import Optional

import colorlog

from allsmiles import settings

_FORMAT = '%(log_color)s%(asctime)s %(levelname)-7s%(reset)s %(name)s: %(message)s'
_handler: Optional[colorlog.StreamHandler] = None


def setup_logging(level: Optional[str] = None) -> None:
    """Install a colorlog handler on the package logger (idempotent)"""
    global _handler
    root = logging.getLogger('allsmiles')
    root.setLevel(level or settings.log_level())
    if _handler is not None:
        # sys.stderr may have been swapped since the first call
        _handler.stream = sys.stderr
        return

    _handler = colorlog.StreamHandler(sys.stderr)
    _handler.setFormatter(colorlog.ColoredFormatter(
        _FORMAT,
        datefmt='%H:%M:%S',
        log_colors={
            'DEBUG': 'cyan',
            'INFO': 'green',
            'WARNING': 'yellow',
            'ERROR': 'red',
            'CRITICAL': 'bold_red',
        },
    ))
    root.addHandler(_handler)
    root.propagate = False


def get_logger(name: str) -> logging.Logger:
    if not name.startswith('allsmiles'):
        name = f'allsmiles.{name}'
    return logging.getLogger(name)

#!/usr/bin/env python3
"""
WAE-RNF - Shared Utilities
Error types, logging setup and small filesystem helpers used by every module.
"""

import logging
import os
import sys
from typing import Optional

from tqdm import tqdm


class RnfError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(RnfError, ValueError):
    """Operand shapes do not conform to the operation."""


class DomainError(RnfError, ValueError):
    """Input outside the mathematical domain of the operation (log/sqrt of non-positive)."""


class ContractError(RnfError, ValueError):
    """A documented precondition was violated by the caller."""


class NonFiniteError(RnfError, ArithmeticError):
    """A tensor would hold NaN or Inf."""


class SingularityError(RnfError, ArithmeticError):
    """A planar flow is locally non-invertible (|1 + û·φ·w| below tolerance)."""


class DegenerateDirectionError(RnfError, ValueError):
    """Flow direction w has (numerically) zero norm."""


class VocabularyError(RnfError, KeyError):
    """Token id outside the vocabulary."""


class ConfigError(RnfError):
    """Invalid or incomplete run configuration."""


class NumericalAbort(RnfError):
    """Training produced a non-finite loss; the last good checkpoint is kept."""


# Third-party loggers that flood DEBUG output (font lookups, PNG chunks)
NOISY_LOGGERS = ('matplotlib', 'PIL')

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def ensure_output_dir(output_dir: str, *subdirs: str) -> str:
    """
    Create a run directory and any named subdirectories (``logs``, ``plots``).

    Returns:
        Absolute path of the run directory itself
    """
    abs_path = os.path.abspath(output_dir)
    os.makedirs(abs_path, exist_ok=True)
    for sub in subdirs:
        os.makedirs(os.path.join(abs_path, sub), exist_ok=True)
    return abs_path


class TqdmLoggingHandler(logging.Handler):
    """Console handler that prints above active tqdm progress bars."""

    def emit(self, record: logging.LogRecord) -> None:
        try:
            tqdm.write(self.format(record), file=sys.stdout)
        except Exception:
            self.handleError(record)


def setup_logging(level: int = logging.INFO,
                  log_file: Optional[str] = None,
                  console: bool = True) -> logging.Logger:
    """
    Route package logs to the console (through tqdm) and optionally a run log file.

    Re-running replaces the handlers of a previous call, so several CLI
    invocations in one process do not stack up output.
    """
    root = logging.getLogger()
    root.setLevel(level)
    for handler in list(root.handlers):
        if isinstance(handler, (TqdmLoggingHandler, logging.FileHandler)):
            root.removeHandler(handler)
            handler.close()

    formatter = logging.Formatter(LOG_FORMAT, datefmt='%Y-%m-%d %H:%M:%S')
    if console:
        console_handler = TqdmLoggingHandler(level)
        console_handler.setFormatter(formatter)
        root.addHandler(console_handler)

    if log_file:
        ensure_output_dir(os.path.dirname(log_file) or '.')
        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setLevel(level)
        file_handler.setFormatter(formatter)
        root.addHandler(file_handler)

    for name in NOISY_LOGGERS:
        logging.getLogger(name).setLevel(max(level, logging.WARNING))
    return root

"""
Module containing the exception types and the functions for reporting errors and warnings
"""

import logging
import sys

import KDFollowConstants

LOG = logging.getLogger(__name__)


class KDFollowError(Exception):
    exit_code = 1


class ConfigError(KDFollowError):
    exit_code = KDFollowConstants.EXIT_CONFIG


class DataError(KDFollowError):
    exit_code = KDFollowConstants.EXIT_DATA


class ShapeError(DataError):
    pass


class StaleCacheError(KDFollowError):
    pass


class DivergenceError(KDFollowError):
    exit_code = KDFollowConstants.EXIT_DIVERGENCE

    def __init__(self, message: str, epoch: int = None, batch: int = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


def report_critical(title: str, message: str) -> None:
    """
    Show critical error message
    """
    LOG.error("%s: %s", title, message)
    print("{}: {}".format(title, message), file=sys.stderr)


def report_warning(title: str, message: str) -> None:
    """
    Show warning message
    """
    LOG.warning("%s: %s", title, message)


def report_error(error: KDFollowError) -> int:
    """
    report a raised error and return the exit code associated with it
    """
    report_critical(type(error).__name__, str(error))
    return error.exit_code

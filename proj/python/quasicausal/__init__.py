"""Quasi-experimental estimators for historical vaccination microdata.

Configs and reports are plain dicts; the native core exchanges them as JSON.
"""

import json

from . import _core
from ._core import ConfigError, DataError, Error, EstimationError, cox, e_value, indirect_least_squares, ols

__all__ = [
    "ConfigError",
    "DataError",
    "Error",
    "EstimationError",
    "cox",
    "default_dgp_params",
    "e_value",
    "estimate",
    "indirect_least_squares",
    "mediate",
    "ols",
    "report",
    "simulate",
]


def default_dgp_params():
    return json.loads(_core.default_dgp_params())


def simulate(config, output_dir=""):
    """Writes individuals.csv, panel.csv and truth.json; returns the summary."""
    return json.loads(_core.simulate(json.dumps(config), output_dir))


def estimate(config, output_dir=""):
    """Runs the estimation grid and returns the report written to report.json."""
    return json.loads(_core.estimate(json.dumps(config), output_dir))


def mediate(config, output_dir=""):
    """Runs the mediation grid and returns the merged report."""
    return json.loads(_core.mediate(json.dumps(config), output_dir))


def report(output_dir):
    """Writes report.csv and returns the text summary."""
    return _core.report(output_dir)

"""Metrics, experiment sweeps, plot-data reports and the command-line interface."""

from .experiment import ExperimentSpec, ResultRow, SpecError, parse_spec, read_results, report, run
from .metrics import eval_adversarial, eval_clean

__all__ = ["ExperimentSpec", "ResultRow", "SpecError", "eval_adversarial", "eval_clean",
           "parse_spec", "read_results", "report", "run"]

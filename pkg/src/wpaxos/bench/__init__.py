"""Experiments, metrics and offline checkers."""
from .check import CheckReport, check_run, check_trace_file
from .experiments import quorum_latency_experiment, run_experiment
from .metrics import Summary, summarize

__all__ = ["CheckReport", "check_run", "check_trace_file", "quorum_latency_experiment",
           "run_experiment", "Summary", "summarize"]

"""Acceptance suite: reference oracles, experiment configs and the criteria."""

from .criteria import CRITERIA, CriterionResult, format_line, run_criterion, run_suite

__all__ = ["CRITERIA", "CriterionResult", "format_line", "run_criterion", "run_suite"]

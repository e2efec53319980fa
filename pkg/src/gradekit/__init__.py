"""Rubric-based short-answer grading with LLM and human graders, evaluation and preference analysis."""

from .rubric import Criterion, Rubric, RubricError, evaluate, parse_expression, parse_rubric, validate
from .prompts import PromptVariant, crosscheck_tally, parse_response, render
from .sampler import sample
from .study import GraderSpec, assign, export_student_view, request_regrade, run_grading
from .evaluation import bootstrap_ci, classification_accuracy, grading_difference

__version__ = "0.1.0"

__all__ = [
    "Criterion",
    "PromptVariant",
    "Rubric",
    "RubricError",
    "GraderSpec",
    "assign",
    "bootstrap_ci",
    "classification_accuracy",
    "crosscheck_tally",
    "evaluate",
    "export_student_view",
    "grading_difference",
    "parse_expression",
    "parse_response",
    "parse_rubric",
    "render",
    "request_regrade",
    "run_grading",
    "sample",
    "validate",
]

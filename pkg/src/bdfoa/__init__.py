"""Directional first-order analysis of bilevel programs with box-constrained
lower levels."""

from .expr import EvalPoint, parse
from .problems import BilevelProblem, BoxSet, builtin, load_problem, solve_y0

__version__ = "0.1.0"

__all__ = [
    "EvalPoint",
    "parse",
    "BilevelProblem",
    "BoxSet",
    "builtin",
    "load_problem",
    "solve_y0",
    "__version__",
]

"""Constraint-respecting tracking controller synthesis for input-affine systems.

Pipeline: symbolic expressions -> Lie derivative chains and numerical relative
degrees -> slack-variable constraint capture with integral wrapping -> feedback
linearisation with pole placement and switching predicates -> closed-loop
simulation with event detection.
"""

from .symbolic import (
    Expr,
    EvalError,
    ParseError,
    parse_expr,
    to_str,
    simplify,
    diff,
    substitute,
    evaluate,
    free_variables,
    is_identically_zero,
)
from .system import InputAffineSystem, NrdResult, lie_f, lie_g_lie_f, relative_degree, eps_nrd

__all__ = [
    "Expr",
    "EvalError",
    "ParseError",
    "parse_expr",
    "to_str",
    "simplify",
    "diff",
    "substitute",
    "evaluate",
    "free_variables",
    "is_identically_zero",
    "InputAffineSystem",
    "NrdResult",
    "lie_f",
    "lie_g_lie_f",
    "relative_degree",
    "eps_nrd",
]

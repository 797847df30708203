"""Embedded LP/MIP solver: bounded-variable simplex with best-bound branch-and-bound."""

from .bnb import BnbNode, relative_gap, solve_lp, solve_mip
from .config import SolverConfig

__all__ = ["BnbNode", "SolverConfig", "relative_gap", "solve_lp", "solve_mip"]

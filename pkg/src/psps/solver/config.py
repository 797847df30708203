from __future__ import annotations

import math
from dataclasses import dataclass, fields


@dataclass(frozen=True)
class SolverConfig:
    """Tolerances and limits for the embedded LP/MIP solver."""

    feas_tol: float = 1e-6
    opt_tol: float = 1e-7
    int_tol: float = 1e-6
    rel_mip_gap: float = 1e-6
    max_simplex_iters: int = 200_000
    max_bnb_nodes: int = 200_000
    time_limit_s: float = math.inf
    refactor_every: int = 50
    # pivots without objective progress before switching to Bland's rule
    stall_limit: int = 60

    def __post_init__(self) -> None:
        for name in ("feas_tol", "opt_tol", "int_tol", "rel_mip_gap"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_simplex_iters <= 0 or self.max_bnb_nodes <= 0:
            raise ValueError("iteration and node limits must be positive")
        if not self.time_limit_s > 0:
            raise ValueError("time_limit_s must be positive")
        if self.refactor_every <= 0 or self.stall_limit <= 0:
            raise ValueError("refactor_every and stall_limit must be positive")

    @classmethod
    def from_mapping(cls, data: dict) -> "SolverConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown solver option(s): {sorted(unknown)}")
        return cls(**data)

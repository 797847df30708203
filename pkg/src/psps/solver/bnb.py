"""Best-bound branch-and-bound over binary variables."""

from __future__ import annotations

import heapq
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, TextIO

import numpy as np

from ..milp import LpArrays, MilpModel, MilpSolution, Status
from .config import SolverConfig
from .simplex import AT_HI, AT_LO, BoundedSimplex, LpResult

log = logging.getLogger(__name__)


@dataclass
class BnbNode:
    """Open node: local binary bounds, the parent's LP bound, and a basis to warm-start from."""

    bin_lower: np.ndarray
    bin_upper: np.ndarray
    bound: float
    depth: int
    branch_col: int
    basis: np.ndarray | None = None
    var_status: np.ndarray | None = None
    reduced_costs: np.ndarray | None = None  # binary columns only


def relative_gap(incumbent: float, bound: float) -> float:
    if not math.isfinite(incumbent):
        return math.inf
    if not math.isfinite(bound):
        return math.inf
    return max(incumbent - bound, 0.0) / max(abs(incumbent), 1.0)


def _expand(arrays: LpArrays, x_cols: np.ndarray, num_vars: int) -> np.ndarray:
    values = np.full(num_vars, np.nan)
    values[arrays.var_ids] = x_cols
    return values


def _row_duals(arrays: LpArrays, res: LpResult) -> np.ndarray:
    return res.duals.copy()


def solve_lp(model: MilpModel, config: SolverConfig | None = None) -> MilpSolution:
    """Solve the LP relaxation (binaries relaxed to their [lower, upper] box)."""
    cfg = config or SolverConfig()
    arrays = model.to_arrays()
    deadline = time.monotonic() + cfg.time_limit_s
    engine = BoundedSimplex(arrays.c, arrays.A, arrays.row_lower, arrays.row_upper, cfg)
    res = engine.solve(arrays.lower, arrays.upper, deadline=deadline)
    if res.status == "infeasible":
        return MilpSolution(Status.INFEASIBLE, iterations=res.iterations)
    if res.status == "unbounded":
        return MilpSolution(Status.UNBOUNDED, objective=-math.inf, iterations=res.iterations)
    if res.status == "iteration_limit":
        return MilpSolution(Status.ITERATION_LIMIT, iterations=res.iterations)
    values = _expand(arrays, res.x, model.num_variables)
    obj = res.objective + arrays.c0
    relaxed = _relaxed_violations(model, values, cfg.feas_tol)
    if relaxed:
        # numerical drift: re-solve cold once before giving up
        res = engine.solve(arrays.lower, arrays.upper, deadline=deadline)
        values = _expand(arrays, res.x, model.num_variables)
        obj = res.objective + arrays.c0
        if res.status != "optimal" or _relaxed_violations(model, values, cfg.feas_tol):
            log.warning("LP solution failed the feasibility re-check: %s", relaxed[:3])
            return MilpSolution(Status.ITERATION_LIMIT, iterations=res.iterations)
    return MilpSolution(
        Status.OPTIMAL,
        objective=obj,
        values=values,
        mip_gap=0.0,
        bound=obj,
        nodes=0,
        iterations=res.iterations,
        duals=_row_duals(arrays, res),
    )


def _relaxed_violations(model: MilpModel, values: np.ndarray, tol: float) -> list[str]:
    return [v for v in model.check_feasibility(values, tol, int_tol=math.inf)]


class _Search:
    def __init__(self, model: MilpModel, cfg: SolverConfig, stream: TextIO | None,
                 on_log: Callable[[str], None] | None) -> None:
        self.model = model
        self.cfg = cfg
        self.arrays = model.to_arrays()
        a = self.arrays
        self.engine = BoundedSimplex(a.c, a.A, a.row_lower, a.row_upper, cfg)
        self.bin_cols = np.flatnonzero(a.binary)
        self.deadline = time.monotonic() + cfg.time_limit_s
        self.incumbent = math.inf
        self.inc_x: np.ndarray | None = None
        self.heap: list[tuple[float, int, BnbNode]] = []
        self.seq = 0
        self.nodes = 0
        self.iterations = 0
        self.stream = stream
        self.on_log = on_log
        self.global_bound = -math.inf
        # smallest parent bound among children whose LP stopped at the iteration limit
        self.lost_bound = math.inf

    def _emit(self, bound: float) -> None:
        if self.stream is None and self.on_log is None and not log.isEnabledFor(logging.DEBUG):
            return
        line = (f"node={self.nodes} bound={bound:.6f} incumbent={self.incumbent:.6f} "
                f"gap={relative_gap(self.incumbent, bound):.6f}")
        if self.stream is not None:
            self.stream.write(line + "\n")
        if self.on_log is not None:
            self.on_log(line)
        log.debug(line)

    def _bounds(self, bl: np.ndarray, bu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lo = self.arrays.lower.copy()
        hi = self.arrays.upper.copy()
        lo[self.bin_cols] = bl
        hi[self.bin_cols] = bu
        return lo, hi

    def evaluate(self, bl: np.ndarray, bu: np.ndarray, depth: int,
                 basis: np.ndarray | None, status: np.ndarray | None) -> str:
        """Solve one node LP; push it, record an incumbent, or prune.  Returns the LP status."""
        lo, hi = self._bounds(bl, bu)
        res = self.engine.solve(lo, hi, basis, status, deadline=self.deadline)
        if res.status == "iteration_limit" and basis is not None:
            res = self.engine.solve(lo, hi, deadline=self.deadline)
        self.nodes += 1
        self.iterations += res.iterations
        if res.status != "optimal":
            return res.status
        obj = res.objective + self.arrays.c0
        if obj >= self.incumbent - 1e-9 * max(1.0, abs(self.incumbent)):
            return "pruned"
        xb = res.x[self.bin_cols]
        dist = np.minimum(xb - np.floor(xb), np.ceil(xb) - xb)
        frac = dist > self.cfg.int_tol
        if not frac.any():
            self._try_incumbent(res.x, obj)
            return "integral"
        j = int(np.argmax(np.where(frac, dist, -1.0)))
        rc = res.reduced_costs[self.bin_cols] if res.reduced_costs is not None else None
        node = BnbNode(bl, bu, obj, depth, j, res.basis, res.var_status, rc)
        heapq.heappush(self.heap, (obj, self.seq, node))
        self.seq += 1
        return "branched"

    def _reduced_cost_fixing(self, node: BnbNode) -> tuple[np.ndarray, np.ndarray]:
        """Fix binaries whose reduced cost alone would push the node past the incumbent."""
        bl, bu = node.bin_lower, node.bin_upper
        if node.reduced_costs is None or not math.isfinite(self.incumbent):
            return bl, bu
        slack = self.incumbent - node.bound + 1e-9 * max(1.0, abs(self.incumbent))
        st = node.var_status[self.bin_cols]
        rc = node.reduced_costs
        free = bl < bu
        to_lo = free & (st == AT_LO) & (rc > slack)
        to_hi = free & (st == AT_HI) & (-rc > slack)
        if not (to_lo.any() or to_hi.any()):
            return bl, bu
        bl, bu = bl.copy(), bu.copy()
        bu[to_lo] = bl[to_lo]
        bl[to_hi] = bu[to_hi]
        return bl, bu

    def _try_incumbent(self, x: np.ndarray, obj: float) -> None:
        x = x.copy()
        x[self.bin_cols] = np.round(x[self.bin_cols])
        if obj < self.incumbent:
            self.incumbent = obj
            self.inc_x = x

    def run(self) -> MilpSolution:
        cfg = self.cfg
        bl = np.round(self.arrays.lower[self.bin_cols]).astype(float)
        bu = np.round(self.arrays.upper[self.bin_cols]).astype(float)
        root = self.evaluate(bl, bu, 0, None, None)
        if root == "infeasible":
            return MilpSolution(Status.INFEASIBLE, nodes=self.nodes, iterations=self.iterations)
        if root == "unbounded":
            return MilpSolution(Status.UNBOUNDED, objective=-math.inf, nodes=self.nodes,
                                iterations=self.iterations)
        if root == "iteration_limit":
            return MilpSolution(Status.ITERATION_LIMIT, nodes=self.nodes, iterations=self.iterations)
        limit_hit = False
        self.global_bound = self.heap[0][0] if self.heap else self.incumbent
        self._emit(self.global_bound)
        while self.heap:
            bound, _, node = self.heap[0]
            self.global_bound = max(self.global_bound, min(bound, self.incumbent))
            if relative_gap(self.incumbent, bound) <= cfg.rel_mip_gap or bound >= self.incumbent:
                break
            if self.nodes >= cfg.max_bnb_nodes or time.monotonic() > self.deadline:
                limit_hit = True
                break
            heapq.heappop(self.heap)
            j = node.branch_col
            pl, pu = self._reduced_cost_fixing(node)
            for value in (0.0, 1.0):
                cl, cu = pl.copy(), pu.copy()
                cl[j] = cu[j] = value
                if self.evaluate(cl, cu, node.depth + 1, node.basis, node.var_status) == "iteration_limit":
                    self.lost_bound = min(self.lost_bound, node.bound)
                    limit_hit = True
            self._emit(self.heap[0][0] if self.heap else self.incumbent)
        if self.heap:
            final_bound = min(self.heap[0][0], self.incumbent, self.lost_bound)
        else:
            final_bound = min(self.incumbent, self.lost_bound)
        self.global_bound = max(self.global_bound, final_bound) if math.isfinite(final_bound) else self.global_bound
        self.global_bound = min(self.global_bound, self.lost_bound)
        if self.inc_x is None:
            if limit_hit:
                return MilpSolution(Status.GAP_LIMIT, bound=self.global_bound, nodes=self.nodes,
                                    iterations=self.iterations)
            return MilpSolution(Status.INFEASIBLE, nodes=self.nodes, iterations=self.iterations)
        return self._finish(limit_hit)

    def _finish(self, limit_hit: bool) -> MilpSolution:
        """Polish the incumbent with binaries fixed (also yields duals) and re-check it."""
        cfg = self.cfg
        a = self.arrays
        lo, hi = a.lower.copy(), a.upper.copy()
        fixed = np.round(self.inc_x[self.bin_cols])
        lo[self.bin_cols] = fixed
        hi[self.bin_cols] = fixed
        res = self.engine.solve(lo, hi, deadline=math.inf)
        self.iterations += res.iterations
        x, obj, duals = self.inc_x, self.incumbent, None
        if res.status == "optimal" and res.objective + a.c0 <= self.incumbent + 1e-7 * max(1.0, abs(self.incumbent)):
            x = res.x.copy()
            x[self.bin_cols] = fixed
            obj = res.objective + a.c0
            duals = res.duals.copy()
        values = _expand(a, x, self.model.num_variables)
        bad = self.model.check_feasibility(values, cfg.feas_tol, cfg.int_tol)
        bound = min(self.global_bound, obj)
        gap = relative_gap(obj, bound)
        status = Status.GAP_LIMIT if limit_hit and gap > cfg.rel_mip_gap else Status.OPTIMAL
        if bad:
            log.warning("incumbent failed the feasibility re-check: %s", bad[:3])
            status = Status.GAP_LIMIT
        return MilpSolution(status, objective=obj, values=values, mip_gap=gap, bound=bound,
                            nodes=self.nodes, iterations=self.iterations, duals=duals)


def solve_mip(
    model: MilpModel,
    config: SolverConfig | None = None,
    log_stream: TextIO | None = None,
    on_log: Callable[[str], None] | None = None,
) -> MilpSolution:
    """Branch-and-bound over the model's binaries.  Without binaries this is a single LP."""
    cfg = config or SolverConfig()
    if not model.binary_ids():
        return solve_lp(model, cfg)
    return _Search(model, cfg, log_stream, on_log).run()

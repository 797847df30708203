"""Bounded-variable simplex on the logical form ``A x - s = 0``.

Every row gets a logical variable ``s`` carrying the row bounds, so the
constraint matrix is ``K = [A, -I]`` with zero right-hand side and all
bound information lives in ``lo``/``hi``.  Nonbasic variables sit at a
finite bound (or at zero when free).  Phase 1 minimizes the sum of bound
violations of the basic variables (composite cost recomputed each pass).
A dual simplex pass is available for re-optimizing after bound changes,
which is how branch-and-bound children warm-start from the parent basis.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lu_factor, lu_solve
from scipy.sparse.linalg import splu

from .config import SolverConfig

AT_LO, AT_HI, AT_ZERO, BASIC = 0, 1, 2, 3

_PIVOT_TOL = 1e-9
# largest relative cost shift the dual pass may apply to keep a warm basis dual feasible
_SHIFT_TOL = 1e-3
# above this many rows the basis is kept as a sparse LU instead of an explicit inverse
_DENSE_MAX_ROWS = 600


class SingularBasis(RuntimeError):
    pass


class _Factor:
    """Basis factorization.  Small bases keep an explicit inverse (computed from an
    LU factorization) updated in product form; large ones keep a sparse LU plus an eta file."""

    def __init__(self, K: sp.csc_matrix, basis: np.ndarray) -> None:
        B = K[:, basis]
        m = basis.size
        self.sparse = m > _DENSE_MAX_ROWS
        self.etas: list[tuple[int, np.ndarray]] = []
        self._updates = 0
        if m == 0:
            self._lu = None
            self._inv = np.zeros((0, 0))
        elif self.sparse:
            try:
                self._lu = splu(B.tocsc(), permc_spec="COLAMD")
            except RuntimeError as exc:
                raise SingularBasis(str(exc)) from None
            if np.abs(self._lu.U.diagonal()).min() < 1e-11:
                raise SingularBasis("near-singular basis")
        else:
            lu, piv = lu_factor(B.toarray(), check_finite=False)
            if np.abs(np.diag(lu)).min() < 1e-11:
                raise SingularBasis("near-singular basis")
            self._inv = lu_solve((lu, piv), np.eye(m), check_finite=False)

    def ftran(self, a: np.ndarray) -> np.ndarray:
        if not self.sparse:
            return self._inv @ a
        y = self._lu.solve(a)
        for r, alpha in self.etas:
            t = y[r] / alpha[r]
            y -= alpha * t
            y[r] = t
        return y

    def btran(self, u: np.ndarray) -> np.ndarray:
        if not self.sparse:
            return u @ self._inv
        u = np.array(u, dtype=float, copy=True)
        for r, alpha in reversed(self.etas):
            s = float(u @ alpha)
            u[r] = (u[r] - (s - u[r] * alpha[r])) / alpha[r]
        return self._lu.solve(u, trans="T")

    def update(self, r: int, alpha: np.ndarray) -> None:
        self._updates += 1
        if not self.sparse:
            row = self._inv[r] / alpha[r]
            self._inv -= np.outer(alpha, row)
            self._inv[r] = row
        else:
            self.etas.append((r, alpha.copy()))

    @property
    def num_updates(self) -> int:
        return self._updates


@dataclass
class LpResult:
    status: str  # optimal | infeasible | unbounded | iteration_limit
    objective: float
    x: np.ndarray  # structural values
    duals: np.ndarray  # row duals (d obj / d row bound)
    basis: np.ndarray
    var_status: np.ndarray
    iterations: int
    reduced_costs: np.ndarray | None = None  # structural columns, optimal results only


class BoundedSimplex:
    """Reusable LP engine: matrix and cost fixed, structural bounds may change between solves."""

    def __init__(
        self,
        c: np.ndarray,
        A: sp.spmatrix,
        row_lower: np.ndarray,
        row_upper: np.ndarray,
        config: SolverConfig | None = None,
    ) -> None:
        self.cfg = config or SolverConfig()
        A = sp.csr_matrix(A, dtype=float)
        self.m, self.n = A.shape
        m, n = self.m, self.n
        self.K = sp.hstack([A, -sp.identity(m, format="csr")], format="csc")
        self.KT = self.K.T.tocsr()
        self.AT = self.KT[: self.n]
        self.cost = np.concatenate([np.asarray(c, dtype=float), np.zeros(m)])
        self.lo = np.concatenate([np.zeros(n), np.asarray(row_lower, dtype=float)])
        self.hi = np.concatenate([np.zeros(n), np.asarray(row_upper, dtype=float)])
        self.x = np.zeros(n + m)
        self.basis = np.arange(n, n + m)
        self.status = np.full(n + m, AT_LO, dtype=np.int8)
        self.factor: _Factor | None = None
        self.iters = 0
        self._deadline = math.inf

    # -- setup -------------------------------------------------------------
    def _column(self, j: int) -> np.ndarray:
        col = np.zeros(self.m)
        start, end = self.K.indptr[j], self.K.indptr[j + 1]
        col[self.K.indices[start:end]] = self.K.data[start:end]
        return col

    @staticmethod
    def _default_status(lo: float, hi: float) -> int:
        if lo > -math.inf:
            return AT_LO
        if hi < math.inf:
            return AT_HI
        return AT_ZERO

    def _place_nonbasic(self) -> None:
        nb = self.status != BASIC
        st, lo, hi = self.status, self.lo, self.hi
        # repair statuses that point at an infinite bound
        bad_lo = nb & (st == AT_LO) & ~np.isfinite(lo)
        bad_hi = nb & (st == AT_HI) & ~np.isfinite(hi)
        bad_zero = nb & (st == AT_ZERO) & (np.isfinite(lo) | np.isfinite(hi))
        for j in np.flatnonzero(bad_lo | bad_hi | bad_zero):
            st[j] = self._default_status(lo[j], hi[j])
        self.x[nb & (st == AT_LO)] = lo[nb & (st == AT_LO)]
        self.x[nb & (st == AT_HI)] = hi[nb & (st == AT_HI)]
        self.x[nb & (st == AT_ZERO)] = 0.0

    def _recompute_basics(self) -> None:
        nb = self.status != BASIC
        xn = np.where(nb, self.x, 0.0)
        rhs = -(self.K @ xn)
        self.x[self.basis] = self.factor.ftran(rhs)

    def _refactor(self) -> None:
        try:
            self.factor = _Factor(self.K, self.basis)
        except SingularBasis:
            self._slack_basis()
            self.factor = _Factor(self.K, self.basis)
        self._recompute_basics()

    def _slack_basis(self) -> None:
        n, m = self.n, self.m
        self.basis = np.arange(n, n + m)
        self.status = np.empty(n + m, dtype=np.int8)
        for j in range(n):
            self.status[j] = self._default_status(self.lo[j], self.hi[j])
        self.status[n:] = BASIC
        self._place_nonbasic()

    # -- public ------------------------------------------------------------
    def solve(
        self,
        lower: np.ndarray,
        upper: np.ndarray,
        basis: np.ndarray | None = None,
        var_status: np.ndarray | None = None,
        deadline: float = math.inf,
        max_iters: int | None = None,
    ) -> LpResult:
        n = self.n
        self.lo[:n] = lower
        self.hi[:n] = upper
        self.iters = 0
        self._deadline = deadline
        self._max_iters = max_iters or self.cfg.max_simplex_iters
        warm = basis is not None and var_status is not None
        if np.any(self.lo > self.hi):
            return self._result("infeasible")
        if warm:
            self.basis = np.array(basis, dtype=int)
            self.status = np.array(var_status, dtype=np.int8)
            self._place_nonbasic()
        else:
            self._slack_basis()
        self._refactor()
        if warm:
            exact = self.cost
            self.cost = self._perturbed_cost()
            try:
                outcome = self._dual()
            finally:
                self.cost = exact
            if outcome in ("infeasible", "iteration_limit"):
                return self._result(outcome)
        outcome = self._primal()
        return self._result(outcome)

    def _perturbed_cost(self) -> np.ndarray:
        """Costs nudged away from dual degeneracy, in the direction each nonbasic column's
        bound status already favours.  The primal pass that follows uses the exact costs."""
        j = np.arange(self.n + self.m)
        size = 1e-7 * (1.0 + np.abs(self.cost)) * (1.0 + (j * 0.6180339887498949) % 1.0)
        movable = self.hi > self.lo
        sign = np.where(self.status == AT_LO, 1.0, np.where(self.status == AT_HI, -1.0, 0.0))
        return self.cost + np.where(movable, sign * size, 0.0)

    def _result(self, status: str) -> LpResult:
        n = self.n
        x = self.x[:n].copy()
        duals = np.zeros(self.m)
        rc = None
        if status == "optimal":
            if self.m:
                duals = self.factor.btran(self.cost[self.basis])
            rc = self.cost[:n] - self.AT @ duals
            rc[self.status[:n] == BASIC] = 0.0
        obj = float(self.cost[:n] @ x) if status == "optimal" else math.nan
        return LpResult(status, obj, x, duals, self.basis.copy(), self.status.copy(), self.iters, rc)

    def _out_of_budget(self) -> bool:
        return self.iters >= self._max_iters or time.monotonic() > self._deadline

    # -- primal simplex ----------------------------------------------------
    def _primal(self) -> str:
        cfg = self.cfg
        ftol, otol = cfg.feas_tol, cfg.opt_tol
        best = math.inf
        since_progress = 0
        bland = False
        last_phase = None
        trouble = 0
        while True:
            if self._out_of_budget():
                return "iteration_limit"
            if self.factor.num_updates >= cfg.refactor_every:
                self._refactor()
            basis = self.basis
            xB = self.x[basis]
            loB, hiB = self.lo[basis], self.hi[basis]
            below = xB < loB - ftol
            above = xB > hiB + ftol
            phase1 = bool(below.any() or above.any())
            if phase1:
                cB = above.astype(float) - below.astype(float)
                obj = float(np.sum((loB - xB)[below]) + np.sum((xB - hiB)[above]))
            else:
                cB = self.cost[basis]
                obj = float(self.cost @ self.x)
            if phase1 != last_phase:
                best, since_progress, bland, last_phase = math.inf, 0, False, phase1
            if obj < best - 1e-9 * (1.0 + abs(best if math.isfinite(best) else 0.0)):
                best = obj
                since_progress = 0
                bland = False
            else:
                since_progress += 1
                if since_progress > cfg.stall_limit:
                    bland = True

            y = self.factor.btran(cB) if self.m else np.zeros(0)
            d = -(self.KT @ y)
            if not phase1:
                d += self.cost
            st = self.status
            movable = (st != BASIC) & (self.hi > self.lo)
            inc = movable & (st != AT_HI) & (d < -otol)
            dec = movable & (st != AT_LO) & (d > otol)
            cand = inc | dec
            if not cand.any():
                if phase1:
                    # confirm with a fresh factorization before declaring infeasible
                    if self.factor.num_updates:
                        self._refactor()
                        continue
                    return "infeasible"
                return "optimal"
            if bland:
                q = int(np.flatnonzero(cand)[0])
            else:
                q = int(np.argmax(np.where(cand, np.abs(d), -1.0)))
            sigma = 1.0 if d[q] < 0 else -1.0
            alpha = self.factor.ftran(self._column(q))
            rate = -sigma * alpha

            dec_b = rate < -_PIVOT_TOL
            inc_b = rate > _PIVOT_TOL
            bound = np.full(self.m, np.nan)
            bound[dec_b] = np.where(above, hiB, np.where(below, -math.inf, loB))[dec_b]
            bound[inc_b] = np.where(below, loB, np.where(above, math.inf, hiB))[inc_b]
            blk = (dec_b | inc_b) & np.isfinite(bound)
            idx = np.flatnonzero(blk)
            t_flip = self.hi[q] - self.lo[q]
            if idx.size:
                signed = np.where(rate[idx] < 0, xB[idx] - bound[idx], bound[idx] - xB[idx])
                rates = np.abs(rate[idx])
                exact = signed / rates
                if bland:
                    tmin = exact.min()
                    ties = idx[exact <= tmin + 1e-12]
                    r = int(ties[np.argmin(basis[ties])])
                    t = max(float(tmin), 0.0)
                else:
                    relaxed = (signed + ftol) / rates
                    tmax = relaxed.min()
                    ok = exact <= tmax
                    pick = np.flatnonzero(ok)
                    r_local = pick[np.argmax(rates[pick])]
                    r = int(idx[r_local])
                    t = max(float(exact[r_local]), 0.0)
            else:
                r, t = -1, math.inf

            if r < 0 and not math.isfinite(t_flip):
                if phase1:
                    trouble += 1
                    if trouble > 3:
                        return "infeasible"
                    self._refactor()
                    continue
                return "unbounded"
            self.iters += 1
            if t_flip <= t:
                # entering variable runs into its own opposite bound
                self.x[q] = self.hi[q] if sigma > 0 else self.lo[q]
                st[q] = AT_HI if sigma > 0 else AT_LO
                self.x[basis] += rate * t_flip
                continue
            leaving = int(basis[r])
            self.x[q] += sigma * t
            self.x[basis] += rate * t
            self.x[leaving] = bound[r]
            if bound[r] == self.lo[leaving]:
                st[leaving] = AT_LO
            else:
                st[leaving] = AT_HI
            basis[r] = q
            st[q] = BASIC
            self.factor.update(r, alpha)

    # -- dual simplex ------------------------------------------------------
    def _dual(self) -> str:
        """Re-optimize from a dual-feasible basis; returns "fallback" when the
        basis is not dual feasible or progress stalls (primal takes over)."""
        cfg = self.cfg
        ftol, otol = cfg.feas_tol, cfg.opt_tol
        stall_budget = 50 * (self.m + 1)
        steps = 0
        d = None
        while True:
            if self._out_of_budget():
                return "iteration_limit"
            if steps > stall_budget:
                return "fallback"
            if self.factor.num_updates >= cfg.refactor_every:
                self._refactor()
                d = None
            basis, st = self.basis, self.status
            if d is None:
                # reduced costs are recomputed after each refactor and updated per pivot otherwise
                y = self.factor.btran(self.cost[basis]) if self.m else np.zeros(0)
                d = self.cost - self.KT @ y
            nb = st != BASIC
            boxed = np.isfinite(self.lo) & np.isfinite(self.hi)
            wrong_lo = nb & (st == AT_LO) & (d < -otol) & (self.hi > self.lo)
            wrong_hi = nb & (st == AT_HI) & (d > otol) & (self.hi > self.lo)
            wrong_zero = nb & (st == AT_ZERO) & (np.abs(d) > otol)
            hard = ((wrong_lo | wrong_hi) & ~boxed) | wrong_zero
            if hard.any():
                # drift from tolerances and incremental updates is absorbed by shifting the
                # (already perturbed) cost; the primal pass that follows re-prices exactly
                tiny = hard & (np.abs(d) <= _SHIFT_TOL * (1.0 + np.abs(self.cost)))
                self.cost[tiny] -= d[tiny]
                d[tiny] = 0.0
                if (hard & ~tiny).any():
                    return "fallback"
                wrong_lo &= ~tiny
                wrong_hi &= ~tiny
            flips = (wrong_lo | wrong_hi) & boxed
            if flips.any():
                fl = np.flatnonzero(flips)
                st[fl] = np.where(st[fl] == AT_LO, AT_HI, AT_LO)
                self.x[fl] = np.where(st[fl] == AT_LO, self.lo[fl], self.hi[fl])
                self._recompute_basics()
            xB = self.x[basis]
            loB, hiB = self.lo[basis], self.hi[basis]
            viol = np.maximum(loB - xB, xB - hiB)
            if viol.max(initial=0.0) <= ftol:
                return "optimal"
            r = int(np.argmax(viol))
            increase = xB[r] < loB[r]
            target = loB[r] if increase else hiB[r]
            s = 1.0 if increase else -1.0
            e = np.zeros(self.m)
            e[r] = 1.0
            rho = self.factor.btran(e)
            arow = self.KT @ rho
            arow[np.abs(arow) <= _PIVOT_TOL] = 0.0
            g = -s * arow
            movable = nb & (self.hi > self.lo)
            can_inc = movable & (st != AT_HI) & (g > _PIVOT_TOL)
            can_dec = movable & (st != AT_LO) & (g < -_PIVOT_TOL)
            cand = np.flatnonzero(can_inc | can_dec)
            if cand.size == 0:
                if self.factor.num_updates:
                    self._refactor()
                    d = None
                    steps += 1
                    continue
                return "infeasible"
            # bound-flipping ratio test: boxed candidates whose breakpoint is passed
            # while the leaving row stays infeasible flip bounds instead of pivoting
            # dual slack of each candidate; tolerated wrong-signed values count as zero
            slack = np.maximum(np.where(st[cand] == AT_HI, -d[cand], d[cand]), 0.0)
            slack[st[cand] == AT_ZERO] = 0.0
            ratio = slack / np.abs(arow[cand])
            order = cand[np.argsort(ratio, kind="stable")]
            span = self.hi[order] - self.lo[order]
            capacity = np.where(np.isfinite(span), np.abs(arow[order]) * span, math.inf)
            passed = int(np.searchsorted(np.cumsum(capacity), abs(xB[r] - target) - ftol, side="left"))
            passed = min(passed, order.size - 1)
            flips, rest = order[:passed], order[passed:]
            a = np.abs(arow[rest])
            dj = slack[np.searchsorted(cand, rest)]
            tmax = ((dj + otol) / a).min()
            ok = rest[(dj / a) <= tmax]
            q = int(ok[np.argmax(np.abs(arow[ok]))])
            alpha = self.factor.ftran(self._column(q))
            if abs(alpha[r]) < _PIVOT_TOL or abs(alpha[r] - arow[q]) > 1e-6 * (1.0 + abs(alpha[r])):
                if self.factor.num_updates:
                    self._refactor()
                    d = None
                    steps += 1
                    continue
                return "fallback"
            theta_d = d[q] / arow[q]
            if theta_d * s > 0:
                # q's reduced cost sits on the wrong side within tolerance: shift it to zero
                theta_d = 0.0
            d -= theta_d * arow
            d[q] = 0.0
            if flips.size:
                to_hi = st[flips] == AT_LO
                new_x = np.where(to_hi, self.hi[flips], self.lo[flips])
                step = new_x - self.x[flips]
                self.x[flips] = new_x
                st[flips] = np.where(to_hi, AT_HI, AT_LO)
                self.x[basis] -= self.factor.ftran(self.K[:, flips] @ step)
                xB = self.x[basis]
            delta = (xB[r] - target) / alpha[r]
            leaving = int(basis[r])
            self.x[q] += delta
            self.x[basis] -= alpha * delta
            self.x[leaving] = target
            st[leaving] = AT_LO if increase else AT_HI
            if self.lo[leaving] == self.hi[leaving]:
                st[leaving] = AT_LO
            basis[r] = q
            st[q] = BASIC
            self.factor.update(r, alpha)
            self.iters += 1
            steps += 1

"""Mixed-integer linear program container shared by the formulation builders and the solver.

Variables and constraints are appended to a :class:`MilpModel` and never
renumbered; a removed variable leaves a tombstone so ids stay stable.  Names
follow the ``symbol[i,j,...]`` convention so that plans can be recovered from
a solution by name alone (see :func:`format_name` / :func:`parse_name`).
"""

from __future__ import annotations

import io
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence, TextIO, Union

import numpy as np
import scipy.sparse as sp

INF = math.inf

Terms = Union[Mapping[int, float], Iterable[tuple[int, float]]]


class ModelError(ValueError):
    """Raised on malformed builder calls (duplicate names, unknown ids, frozen model)."""


class VarKind(str, Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"


class Sense(str, Enum):
    LE = "<="
    EQ = "=="
    GE = ">="


class Status(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    GAP_LIMIT = "gap_limit"
    ITERATION_LIMIT = "iteration_limit"


@dataclass(frozen=True)
class Variable:
    id: int
    name: str
    kind: VarKind
    lower: float
    upper: float

    @property
    def is_binary(self) -> bool:
        return self.kind is VarKind.BINARY


@dataclass(frozen=True)
class LinearConstraint:
    id: int
    name: str
    terms: tuple[tuple[int, float], ...]
    sense: Sense
    rhs: float


@dataclass
class MilpSolution:
    """Result of an LP or MIP solve.

    ``values`` is indexed by variable id.  ``bound`` is the best proven lower
    bound (equal to ``objective`` for an LP optimum).  ``duals`` holds the row
    duals of the LP solved last at the incumbent (binaries fixed).
    """

    status: Status
    objective: float = math.nan
    values: np.ndarray | None = None
    mip_gap: float = math.nan
    bound: float = -INF
    nodes: int = 0
    iterations: int = 0
    duals: np.ndarray | None = None

    @property
    def has_values(self) -> bool:
        return self.values is not None

    def __getitem__(self, var_id: int) -> float:
        if self.values is None:
            raise KeyError("solution carries no values")
        return float(self.values[var_id])


_NAME_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_^.]*)(?:\[(-?\d+(?:,-?\d+)*)\])?$")


def format_name(symbol: str, *indices: int) -> str:
    """``format_name("z_g", 2, 16) -> "z_g[2,16]"``."""
    if not indices:
        return symbol
    return f"{symbol}[{','.join(str(int(i)) for i in indices)}]"


def parse_name(name: str) -> tuple[str, tuple[int, ...]]:
    """Inverse of :func:`format_name`."""
    match = _NAME_RE.match(name)
    if match is None:
        raise ValueError(f"not a structured variable name: {name!r}")
    symbol, idx = match.groups()
    if idx is None:
        return symbol, ()
    return symbol, tuple(int(v) for v in idx.split(","))


@dataclass
class LpArrays:
    """Dense/sparse array view of a model: rows are ``row_lower <= A x <= row_upper``."""

    c: np.ndarray
    c0: float
    A: sp.csr_matrix
    row_lower: np.ndarray
    row_upper: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    binary: np.ndarray
    var_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


class MilpModel:
    """Append-only MILP builder (minimization)."""

    def __init__(self, name: str = "model") -> None:
        self.name = name
        self._vars: list[Variable] = []
        self._removed: set[int] = set()
        self._by_name: dict[str, int] = {}
        self._cons: list[LinearConstraint] = []
        self._con_names: set[str] = set()
        self._objective: dict[int, float] = {}
        self.objective_constant = 0.0
        self._frozen = False
        # free-form annotations written by the formulation builders
        self.meta: dict = {}

    # -- builder -----------------------------------------------------------
    def _check_open(self) -> None:
        if self._frozen:
            raise ModelError(f"model {self.name!r} is frozen")

    def add_variable(
        self,
        name: str,
        lower: float = 0.0,
        upper: float = INF,
        kind: VarKind | str = VarKind.CONTINUOUS,
    ) -> int:
        self._check_open()
        kind = VarKind(kind)
        if name in self._by_name:
            raise ModelError(f"duplicate variable name {name!r}")
        lower, upper = float(lower), float(upper)
        if kind is VarKind.BINARY:
            lower, upper = max(lower, 0.0), min(upper, 1.0)
        if lower > upper:
            raise ModelError(f"variable {name!r}: lower bound {lower} > upper bound {upper}")
        vid = len(self._vars)
        self._vars.append(Variable(vid, name, kind, lower, upper))
        self._by_name[name] = vid
        return vid

    def add_binary(self, name: str) -> int:
        return self.add_variable(name, 0.0, 1.0, VarKind.BINARY)

    def set_bounds(self, var_id: int, lower: float, upper: float) -> None:
        """Tighten or reset the bounds of an existing variable (used to fix binaries)."""
        self._check_open()
        var = self.variable(var_id)
        lower, upper = float(lower), float(upper)
        if var.is_binary and (lower < 0.0 or upper > 1.0):
            raise ModelError(f"binary {var.name!r} bounds must lie in [0, 1]")
        if lower > upper:
            raise ModelError(f"variable {var.name!r}: lower bound {lower} > upper bound {upper}")
        self._vars[var_id] = Variable(var_id, var.name, var.kind, lower, upper)

    def fix(self, var_id: int, value: float) -> None:
        self.set_bounds(var_id, value, value)

    def remove_variable(self, var_id: int) -> None:
        """Tombstone a variable; its id is never reused.  References to it are
        reported by :meth:`validate` rather than silently rewritten."""
        self._check_open()
        self.variable(var_id)
        self._removed.add(var_id)
        self._objective.pop(var_id, None)

    def _collect(self, terms: Terms) -> tuple[tuple[int, float], ...]:
        items = terms.items() if isinstance(terms, Mapping) else terms
        agg: dict[int, float] = {}
        for vid, coef in items:
            vid = int(vid)
            if vid < 0 or vid >= len(self._vars) or vid in self._removed:
                raise ModelError(f"unknown variable id {vid}")
            agg[vid] = agg.get(vid, 0.0) + float(coef)
        return tuple(sorted((v, c) for v, c in agg.items() if c != 0.0))

    def add_constraint(self, terms: Terms, sense: Sense | str, rhs: float, name: str | None = None) -> int:
        self._check_open()
        cid = len(self._cons)
        if name is None:
            name = f"c{cid}"
        if name in self._con_names:
            raise ModelError(f"duplicate constraint name {name!r}")
        con = LinearConstraint(cid, name, self._collect(terms), Sense(sense), float(rhs))
        self._cons.append(con)
        self._con_names.add(name)
        return cid

    def set_objective(self, terms: Terms, constant: float = 0.0) -> None:
        self._check_open()
        self._objective = dict(self._collect(terms))
        self.objective_constant = float(constant)

    def freeze(self) -> "MilpModel":
        self._frozen = True
        return self

    @property
    def frozen(self) -> bool:
        return self._frozen

    def copy(self, name: str | None = None) -> "MilpModel":
        """Unfrozen copy sharing no mutable state."""
        other = MilpModel(name or self.name)
        other._vars = list(self._vars)
        other._removed = set(self._removed)
        other._by_name = dict(self._by_name)
        other._cons = list(self._cons)
        other._con_names = set(self._con_names)
        other._objective = dict(self._objective)
        other.objective_constant = self.objective_constant
        other.meta = dict(self.meta)
        return other

    # -- queries -----------------------------------------------------------
    @property
    def num_variables(self) -> int:
        return len(self._vars)

    @property
    def num_constraints(self) -> int:
        return len(self._cons)

    @property
    def variables(self) -> Sequence[Variable]:
        return tuple(self._vars)

    @property
    def constraints(self) -> Sequence[LinearConstraint]:
        return tuple(self._cons)

    @property
    def objective(self) -> dict[int, float]:
        return dict(self._objective)

    def variable(self, var_id: int) -> Variable:
        if var_id < 0 or var_id >= len(self._vars):
            raise ModelError(f"unknown variable id {var_id}")
        return self._vars[var_id]

    def var_id(self, name: str) -> int:
        try:
            return self._by_name[name]
        except KeyError:
            raise ModelError(f"unknown variable name {name!r}") from None

    def has_variable(self, name: str) -> bool:
        return name in self._by_name

    def is_removed(self, var_id: int) -> bool:
        return var_id in self._removed

    def binary_ids(self) -> list[int]:
        return [v.id for v in self._vars if v.is_binary and v.id not in self._removed]

    def value(self, solution: MilpSolution, name: str) -> float:
        return solution[self.var_id(name)]

    # -- diagnostics -------------------------------------------------------
    def validate(self) -> list[str]:
        """Return human-readable diagnostics; empty iff the model is well formed."""
        out: list[str] = []
        for v in self._vars:
            if v.id in self._removed:
                continue
            if math.isnan(v.lower) or math.isnan(v.upper):
                out.append(f"variable {v.name}: NaN bound")
            elif v.lower > v.upper:
                out.append(f"variable {v.name}: lower > upper")
            if v.is_binary and (v.lower < 0.0 or v.upper > 1.0):
                out.append(f"variable {v.name}: binary bounds outside [0, 1]")
        for con in self._cons:
            if not con.terms:
                out.append(f"constraint {con.name}: no terms")
            dangling = [vid for vid, _ in con.terms if vid in self._removed]
            if dangling:
                out.append(f"constraint {con.name}: references removed variable(s) {dangling}")
            if any(not math.isfinite(c) for _, c in con.terms):
                out.append(f"constraint {con.name}: non-finite coefficient")
            if math.isnan(con.rhs):
                out.append(f"constraint {con.name}: NaN rhs")
        for vid, coef in self._objective.items():
            if not math.isfinite(coef):
                out.append(f"objective: non-finite coefficient on {self._vars[vid].name}")
        if not math.isfinite(self.objective_constant):
            out.append("objective: non-finite constant")
        return out

    # -- numeric views -----------------------------------------------------
    def to_arrays(self) -> LpArrays:
        """Array form over the live (non-removed) variables, in id order."""
        live = np.array([v.id for v in self._vars if v.id not in self._removed], dtype=int)
        col_of = -np.ones(len(self._vars), dtype=int)
        col_of[live] = np.arange(live.size)
        n, m = live.size, len(self._cons)
        c = np.zeros(n)
        for vid, coef in self._objective.items():
            c[col_of[vid]] = coef
        rows, cols, vals = [], [], []
        row_lo = np.empty(m)
        row_hi = np.empty(m)
        for i, con in enumerate(self._cons):
            for vid, coef in con.terms:
                if col_of[vid] < 0:
                    raise ModelError(f"constraint {con.name} references removed variable {vid}")
                rows.append(i)
                cols.append(col_of[vid])
                vals.append(coef)
            if con.sense is Sense.LE:
                row_lo[i], row_hi[i] = -INF, con.rhs
            elif con.sense is Sense.GE:
                row_lo[i], row_hi[i] = con.rhs, INF
            else:
                row_lo[i] = row_hi[i] = con.rhs
        A = sp.csr_matrix((vals, (rows, cols)), shape=(m, n))
        lower = np.array([self._vars[v].lower for v in live], dtype=float)
        upper = np.array([self._vars[v].upper for v in live], dtype=float)
        binary = np.array([self._vars[v].is_binary for v in live], dtype=bool)
        return LpArrays(c, self.objective_constant, A, row_lo, row_hi, lower, upper, binary, live)

    def evaluate_objective(self, values: np.ndarray) -> float:
        return self.objective_constant + sum(coef * float(values[vid]) for vid, coef in self._objective.items())

    def check_feasibility(self, values: np.ndarray, tol: float = 1e-6, int_tol: float = 1e-6) -> list[str]:
        """Independent re-check of a candidate point against bounds, rows and integrality."""
        bad: list[str] = []
        for v in self._vars:
            if v.id in self._removed:
                continue
            x = float(values[v.id])
            if not math.isfinite(x):
                bad.append(f"{v.name} = {x}")
                continue
            if x < v.lower - tol or x > v.upper + tol:
                bad.append(f"{v.name} = {x} outside [{v.lower}, {v.upper}]")
            if v.is_binary and min(abs(x), abs(x - 1.0)) > int_tol:
                bad.append(f"{v.name} = {x} not integral")
        for con in self._cons:
            lhs = math.fsum(coef * float(values[vid]) for vid, coef in con.terms)
            if con.sense is Sense.LE:
                viol = lhs - con.rhs
            elif con.sense is Sense.GE:
                viol = con.rhs - lhs
            else:
                viol = abs(lhs - con.rhs)
            if viol > tol:
                bad.append(f"{con.name}: violation {viol:.3g}")
        return bad

    # -- export ------------------------------------------------------------
    def write_lp(self, target: str | TextIO) -> None:
        """Write the model in CPLEX LP format."""
        if isinstance(target, str):
            with open(target, "w", encoding="utf-8") as fh:
                self._write_lp(fh)
        else:
            self._write_lp(target)

    def to_lp_string(self) -> str:
        buf = io.StringIO()
        self._write_lp(buf)
        return buf.getvalue()

    def _write_lp(self, out: TextIO) -> None:
        def lp_name(vid: int) -> str:
            return self._vars[vid].name.replace("[", "(").replace("]", ")")

        def expr(terms: Iterable[tuple[int, float]]) -> str:
            parts = []
            for vid, coef in terms:
                sign = "-" if coef < 0 else "+"
                parts.append(f"{sign} {abs(coef):.17g} {lp_name(vid)}")
            text = " ".join(parts) if parts else "0"
            return text[2:] if text.startswith("+ ") else text

        out.write(f"\\ Problem: {self.name}\n")
        if self.objective_constant:
            out.write(f"\\ Objective constant: {self.objective_constant:.17g}\n")
        out.write("Minimize\n")
        out.write(f" obj: {expr(sorted(self._objective.items()))}\n")
        out.write("Subject To\n")
        ops = {Sense.LE: "<=", Sense.GE: ">=", Sense.EQ: "="}
        for con in self._cons:
            if not con.terms:
                continue
            out.write(f" {con.name.replace('[', '(').replace(']', ')')}: {expr(con.terms)} {ops[con.sense]} {con.rhs:.17g}\n")
        out.write("Bounds\n")
        live = [v for v in self._vars if v.id not in self._removed]
        for v in live:
            name = lp_name(v.id)
            if v.is_binary:
                if v.lower == v.upper:
                    out.write(f" {name} = {v.lower:.17g}\n")
                continue
            if v.lower == -INF and v.upper == INF:
                out.write(f" {name} free\n")
            elif v.lower == v.upper:
                out.write(f" {name} = {v.lower:.17g}\n")
            else:
                lo = "-inf" if v.lower == -INF else f"{v.lower:.17g}"
                hi = "+inf" if v.upper == INF else f"{v.upper:.17g}"
                out.write(f" {lo} <= {name} <= {hi}\n")
        binaries = [lp_name(v.id) for v in live if v.is_binary]
        if binaries:
            out.write("Binaries\n")
            for name in binaries:
                out.write(f" {name}\n")
        out.write("End\n")

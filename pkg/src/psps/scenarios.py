"""Discrete demand scenarios: backward reduction, normal quintile synthesis and CVaR tail weights."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm

from .grid import GridCase

log = logging.getLogger(__name__)

PROB_TOL = 1e-9


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    id: int
    probability: float
    demand: np.ndarray  # (num_demands, horizon), or (horizon,) for system-level profiles

    def __post_init__(self) -> None:
        if not (0.0 <= self.probability <= 1.0 + 1e-12):
            raise ScenarioError(f"scenario {self.id}: probability {self.probability} outside [0, 1]")
        arr = np.asarray(self.demand, dtype=float)
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ScenarioError(f"scenario {self.id}: demand must be finite and non-negative")
        arr.setflags(write=False)
        object.__setattr__(self, "demand", arr)


@dataclass(frozen=True)
class ScenarioSet:
    scenarios: tuple[Scenario, ...]
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        if not self.scenarios:
            raise ScenarioError("a scenario set needs at least one scenario")
        shapes = {s.demand.shape for s in self.scenarios}
        if len(shapes) != 1:
            raise ScenarioError("scenarios have inconsistent demand shapes")
        total = math.fsum(s.probability for s in self.scenarios)
        if abs(total - 1.0) > PROB_TOL:
            raise ScenarioError(f"probabilities sum to {total}, not 1")

    def __len__(self) -> int:
        return len(self.scenarios)

    def __iter__(self):
        return iter(self.scenarios)

    @property
    def horizon(self) -> int:
        return int(self.scenarios[0].demand.shape[-1])

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([s.probability for s in self.scenarios])

    def mean_demand(self) -> np.ndarray:
        """Probability-weighted mean demand."""
        return sum(s.probability * s.demand for s in self.scenarios)

    def mean_scenario(self) -> Scenario:
        return Scenario(0, 1.0, self.mean_demand())


def single_scenario(demand: np.ndarray) -> ScenarioSet:
    return ScenarioSet((Scenario(1, 1.0, np.asarray(demand, dtype=float)),))


def from_case(case: GridCase) -> ScenarioSet:
    """The case's baseline profiles as a point-mass scenario set."""
    return single_scenario(case.demand_matrix())


def check_against_case(scenarios: ScenarioSet, case: GridCase) -> None:
    shape = (len(case.demands), case.horizon)
    for s in scenarios:
        if s.demand.shape != shape:
            raise ScenarioError(f"scenario {s.id}: demand shape {s.demand.shape} does not match case {shape}")


def slice_scenarios(scenarios: ScenarioSet, first: int, last: int, first_hour: int = 1) -> ScenarioSet:
    """Keep absolute hours ``first..last`` of every scenario."""
    a, b = first - first_hour, last - first_hour + 1
    return ScenarioSet(
        tuple(Scenario(s.id, s.probability, s.demand[..., a:b]) for s in scenarios),
        scenarios.warnings,
    )


def distribute_system_profile(profile: np.ndarray, case: GridCase) -> np.ndarray:
    """Split a system-level hourly profile across the case's demands by their baseline share each hour."""
    base = case.demand_matrix()
    totals = base.sum(axis=0)
    shares = np.divide(base, totals, out=np.full_like(base, 1.0 / max(len(case.demands), 1)), where=totals > 0)
    return shares * np.asarray(profile, dtype=float)[None, :]


# -- backward reduction ---------------------------------------------------------

def reduce_scenarios(
    paths: Sequence[np.ndarray],
    k: int,
    probabilities: Sequence[float | Fraction] | None = None,
) -> ScenarioSet:
    """Backward reduction under the L1 distance down to ``k`` scenarios.

    Each round deletes the survivor whose probability times distance to its
    nearest other survivor is smallest (ties: lowest id) and moves its mass to
    that nearest survivor (ties: lowest id).  Probabilities are accumulated as
    fractions so the total stays exactly 1.
    """
    if k < 1:
        raise ScenarioError("k must be >= 1")
    if len(paths) < k:
        raise ScenarioError(f"need at least {k} profiles, got {len(paths)}")
    arrays = [np.asarray(p, dtype=float) for p in paths]
    if len({a.shape for a in arrays}) != 1:
        raise ScenarioError("profiles have different lengths")
    n = len(arrays)
    if probabilities is None:
        probs = [Fraction(1, n)] * n
    else:
        if len(probabilities) != n:
            raise ScenarioError("one probability per profile is required")
        probs = [p if isinstance(p, Fraction) else Fraction(p) for p in probabilities]
        total = sum(probs)
        probs = [p / total for p in probs]
    flat = np.stack([a.ravel() for a in arrays])
    dist = np.abs(flat[:, None, :] - flat[None, :, :]).sum(axis=2)
    alive = list(range(n))
    while len(alive) > k:
        best = None
        for i in alive:
            others = [j for j in alive if j != i]
            j = min(others, key=lambda o: (dist[i, o], o))
            cost = probs[i] * Fraction(float(dist[i, j]))
            if best is None or cost < best[0]:
                best = (cost, i, j)
        _, i, j = best
        probs[j] += probs[i]
        probs[i] = Fraction(0)
        alive.remove(i)
    total = sum(probs[i] for i in alive)
    assert total == 1
    scen = tuple(Scenario(rank + 1, float(probs[i]), arrays[i]) for rank, i in enumerate(alive))
    return ScenarioSet(scen)


def reduction_map(paths: Sequence[np.ndarray], reduced: ScenarioSet) -> list[int]:
    """Index of the reduced scenario each original profile is closest to (L1)."""
    out = []
    for p in paths:
        d = [float(np.abs(np.asarray(p, float) - s.demand).sum()) for s in reduced]
        out.append(int(np.argmin(d)))
    return out


# -- normal quintiles ------------------------------------------------------------

QUINTILE_OFFSETS = (-2.0, -1.0, 0.0, 1.0, 2.0)


def quintile_probabilities() -> tuple[float, ...]:
    """Normal interval masses with boundaries at -2, -1, 1, 2 standard deviations (low to high)."""
    cdf = norm.cdf
    lo2 = float(cdf(-2.0))
    lo1 = float(cdf(-1.0) - cdf(-2.0))
    mid = float(cdf(1.0) - cdf(-1.0))
    return (lo2, lo1, mid, lo1, lo2)


def normal_quintile_from_moments(mean: np.ndarray, sigma: np.ndarray, strict: bool = False) -> ScenarioSet:
    """Five scenarios at mean + {-2,-1,0,1,2} sigma, clamped at zero."""
    mean = np.asarray(mean, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if mean.shape != sigma.shape:
        raise ScenarioError("mean and sigma shapes differ")
    if np.any(sigma < 0) or not np.all(np.isfinite(sigma)):
        raise ScenarioError("sigma must be finite and non-negative")
    if strict and not np.any(sigma > 0):
        raise ScenarioError("zero variance: all five scenarios would coincide")
    probs = quintile_probabilities()
    warnings = []
    scenarios = []
    for idx, (off, p) in enumerate(zip(QUINTILE_OFFSETS, probs), start=1):
        dem = mean + off * sigma
        if np.any(dem < 0):
            count = int(np.sum(dem < 0))
            msg = f"scenario {idx}: {count} negative demand value(s) clamped to 0"
            warnings.append(msg)
            log.warning(msg)
            dem = np.maximum(dem, 0.0)
        scenarios.append(Scenario(idx, p, dem))
    # fix the last digit so the probabilities sum to one exactly in floating point
    total = math.fsum(probs)
    if total != 1.0:
        first = scenarios[2]
        scenarios[2] = Scenario(first.id, first.probability + (1.0 - total), first.demand)
    return ScenarioSet(tuple(scenarios), tuple(warnings))


def normal_quintile_set(base: ScenarioSet | np.ndarray, strict: bool = False) -> ScenarioSet:
    """Fit a per-hour mean and sample standard deviation to ``base`` and emit the five-point set.

    ``base`` is either a ScenarioSet with at least two scenarios or a stacked
    array of profiles (first axis indexes the samples).
    """
    if isinstance(base, ScenarioSet):
        stack = np.stack([s.demand for s in base])
    else:
        stack = np.asarray(base, dtype=float)
    if stack.shape[0] < 2:
        raise ScenarioError("at least two base profiles are needed to fit a standard deviation")
    mean = stack.mean(axis=0)
    sigma = stack.std(axis=0, ddof=1)
    return normal_quintile_from_moments(mean, sigma, strict=strict)


def quintile_from_case(case: GridCase, rel_sigma: float = 0.08, strict: bool = False) -> ScenarioSet:
    """Quintile set around the case's baseline profiles with sigma proportional to the mean."""
    mean = case.demand_matrix()
    return normal_quintile_from_moments(mean, rel_sigma * mean, strict=strict)


def synthetic_days(case: GridCase, days: int, rel_sigma: float, seed: int) -> np.ndarray:
    """Seeded day-to-day variation of the system demand, shape (days, horizon)."""
    rng = np.random.default_rng(seed)
    system = case.demand_matrix().sum(axis=0)
    factors = rng.normal(1.0, rel_sigma, size=(days, 1))
    noise = rng.normal(0.0, rel_sigma / 4, size=(days, system.size))
    return np.maximum(system[None, :] * (factors + noise), 0.0)


# -- CVaR -----------------------------------------------------------------------

def cvar_tail_weights(
    scenarios: ScenarioSet | Sequence[float],
    costs: Sequence[float],
    epsilon: float,
) -> np.ndarray:
    """Weights w with sum 1 such that w @ costs is the discrete CVaR at level ``epsilon``.

    Scenarios are filled from the most expensive down until the tail mass
    1 - epsilon is exhausted; the boundary scenario gets a fractional weight.
    """
    if not (0.0 <= epsilon < 1.0):
        raise ScenarioError("epsilon must lie in [0, 1)")
    probs = scenarios.probabilities if isinstance(scenarios, ScenarioSet) else np.asarray(scenarios, float)
    costs = np.asarray(costs, dtype=float)
    if probs.shape != costs.shape:
        raise ScenarioError("one cost per scenario is required")
    if not np.all(np.isfinite(costs)):
        raise ScenarioError("costs must be finite")
    probs = probs / probs.sum()
    tail = 1.0 - epsilon
    order = sorted(range(costs.size), key=lambda i: (-costs[i], i))
    weights = np.zeros(costs.size)
    remaining = tail
    for i in order:
        if remaining <= 0:
            break
        take = min(probs[i], remaining)
        weights[i] = take / tail
        remaining -= take
    return weights / weights.sum()


def cvar(probabilities: Sequence[float] | ScenarioSet, costs: Sequence[float], epsilon: float) -> float:
    w = cvar_tail_weights(probabilities, costs, epsilon)
    return float(w @ np.asarray(costs, dtype=float))


# -- CSV -------------------------------------------------------------------------

def read_historical_csv(path: str | Path) -> tuple[list[str], list[np.ndarray]]:
    """One row per hour, one column per day, header row with day labels."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ScenarioError(f"{path}: empty file")
    labels = [c.strip() for c in rows[0]]
    body = [r for r in rows[1:] if r]
    for n, r in enumerate(body, start=2):
        if len(r) != len(labels):
            raise ScenarioError(f"{path}: line {n} has {len(r)} fields, expected {len(labels)}")
    try:
        data = np.array([[float(v) for v in r] for r in body])
    except ValueError as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    if data.size and not np.all(np.isfinite(data)):
        raise ScenarioError(f"{path}: non-finite value")
    return labels, [data[:, j].copy() for j in range(len(labels))]


def write_historical_csv(path: str | Path, labels: Sequence[str], profiles: Sequence[np.ndarray]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(labels)
        for row in np.column_stack(profiles):
            w.writerow([repr(float(v)) for v in row])


def write_scenarios_csv(scenarios: ScenarioSet, path: str | Path, demand_ids: Sequence[int] | None = None,
                        first_hour: int = 1) -> None:
    """Long format: scenario_id, probability, hour, demand_id, mw."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario_id", "probability", "hour", "demand_id", "mw"])
        for s in scenarios:
            mat = s.demand if s.demand.ndim == 2 else s.demand[None, :]
            ids = list(demand_ids) if demand_ids is not None else list(range(1, mat.shape[0] + 1))
            for h in range(mat.shape[1]):
                for d, did in enumerate(ids):
                    w.writerow([s.id, repr(s.probability), h + first_hour, did, repr(float(mat[d, h]))])


def read_scenarios_csv(path: str | Path) -> ScenarioSet:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"scenario_id", "probability", "hour", "demand_id", "mw"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ScenarioError(f"{path}: expected columns {sorted(need)}")
        rows = list(reader)
    by_scen: dict[int, dict] = {}
    for r in rows:
        sid = int(r["scenario_id"])
        entry = by_scen.setdefault(sid, {"p": float(r["probability"]), "cells": {}})
        entry["cells"][(int(r["demand_id"]), int(r["hour"]))] = float(r["mw"])
    scenarios = []
    for sid in sorted(by_scen):
        cells = by_scen[sid]["cells"]
        dids = sorted({d for d, _ in cells})
        hours = sorted({h for _, h in cells})
        mat = np.zeros((len(dids), len(hours)))
        for (d, h), v in cells.items():
            mat[dids.index(d), hours.index(h)] = v
        scenarios.append(Scenario(sid, by_scen[sid]["p"], mat))
    return ScenarioSet(tuple(scenarios))


def as_scenario_set(items: Iterable[tuple[float, np.ndarray]]) -> ScenarioSet:
    """Build a set from (probability, demand) pairs, ids starting at 1."""
    return ScenarioSet(tuple(Scenario(i, float(p), np.asarray(d, float)) for i, (p, d) in enumerate(items, start=1)))

"""Grid data model, JSON case ingestion and the bundled IEEE 14-bus case."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

MAX_WFPI = 150.0
DEFAULT_THETA_BOUND = 0.6
BUNDLED_CASE = "ieee14.json"


class CaseError(ValueError):
    """Malformed or invalid case data; the message names the offending field."""


@dataclass(frozen=True)
class Bus:
    id: int
    name: str


@dataclass(frozen=True)
class Line:
    id: int
    from_bus: int
    to_bus: int
    susceptance: float  # per unit on a 100 MVA base
    flow_min: float
    flow_max: float
    wfpi: float
    ignition_prob: float | None = None

    @property
    def label(self) -> str:
        return f"{self.from_bus}-{self.to_bus}"


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    p_min: float
    p_max: float
    ramp_min: float
    ramp_max: float
    min_up: int
    min_down: int
    marginal_cost: float
    startup_cost: float
    shutdown_cost: float
    initial_on: bool = False


@dataclass(frozen=True)
class Demand:
    id: int
    bus: int
    voll: float
    profile: tuple[float, ...]


@dataclass(frozen=True)
class Storage:
    id: int
    bus: int
    charge_max: float
    discharge_max: float
    capacity: float
    eff_charge: float = 1.0
    eff_discharge: float = 1.0


@dataclass(frozen=True)
class GridCase:
    name: str
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...]
    demands: tuple[Demand, ...]
    storages: tuple[Storage, ...] = ()
    horizon: int = 24
    theta_bound: float = DEFAULT_THETA_BOUND
    # absolute hour number of the first modeled hour (1 unless the case was sliced)
    first_hour: int = 1
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def hours(self) -> range:
        return range(self.first_hour, self.first_hour + self.horizon)

    def line(self, line_id: int) -> Line:
        for ln in self.lines:
            if ln.id == line_id:
                return ln
        raise KeyError(f"unknown line id {line_id}")

    def line_by_label(self, label: str) -> Line:
        a, b = (int(v) for v in label.split("-"))
        for ln in self.lines:
            if {ln.from_bus, ln.to_bus} == {a, b}:
                return ln
        raise KeyError(f"no line between buses {a} and {b}")

    def demand_matrix(self) -> np.ndarray:
        """Baseline demand, shape (num_demands, horizon)."""
        return np.array([d.profile for d in self.demands], dtype=float).reshape(len(self.demands), self.horizon)

    @property
    def generation_capacity(self) -> float:
        return sum(g.p_max for g in self.generators)


# -- parsing -----------------------------------------------------------------

def _reject_constant(token: str) -> float:
    raise CaseError(f"non-finite number {token} is not allowed")


def _num(obj: dict, key: str, where: str, default: Any = None) -> float:
    if key not in obj:
        if default is None:
            raise CaseError(f"{where}: missing field '{key}'")
        return float(default)
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise CaseError(f"{where}.{key}: expected a number, got {val!r}")
    if not math.isfinite(val):
        raise CaseError(f"{where}.{key}: non-finite number")
    return float(val)


def _int(obj: dict, key: str, where: str) -> int:
    val = _num(obj, key, where)
    if val != int(val):
        raise CaseError(f"{where}.{key}: expected an integer, got {val}")
    return int(val)


def parse_case(data: dict) -> GridCase:
    """Build and validate a GridCase from the decoded JSON document."""
    if not isinstance(data, dict):
        raise CaseError("case document must be a JSON object")
    meta = data.get("meta", {})
    if not isinstance(meta, dict):
        raise CaseError("meta: expected an object")
    horizon = _int(meta, "horizon_hours", "meta") if "horizon_hours" in meta else None
    theta = _num(meta, "theta_bound_rad", "meta", DEFAULT_THETA_BOUND)
    first_hour = _int(meta, "first_hour", "meta") if "first_hour" in meta else 1

    def section(key: str, required: bool = True) -> list:
        items = data.get(key)
        if items is None:
            if required:
                raise CaseError(f"missing section '{key}'")
            return []
        if not isinstance(items, list):
            raise CaseError(f"{key}: expected a list")
        return items

    buses = tuple(
        Bus(_int(b, "id", f"buses[{i}]"), str(b.get("name", f"Bus {b.get('id')}")))
        for i, b in enumerate(section("buses"))
    )
    lines = []
    for i, ln in enumerate(section("lines")):
        w = f"lines[{i}]"
        fmax = _num(ln, "flow_max", w)
        prob = ln.get("ignition_prob")
        lines.append(Line(
            id=_int(ln, "id", w),
            from_bus=_int(ln, "from", w),
            to_bus=_int(ln, "to", w),
            susceptance=_num(ln, "susceptance", w),
            flow_min=_num(ln, "flow_min", w, -fmax) if "flow_min" in ln else -fmax,
            flow_max=fmax,
            wfpi=_num(ln, "wfpi", w),
            ignition_prob=None if prob is None else _num(ln, "ignition_prob", w),
        ))
    gens = []
    for i, g in enumerate(section("generators")):
        w = f"generators[{i}]"
        rmax = _num(g, "ramp_max", w)
        gens.append(Generator(
            id=_int(g, "id", w),
            bus=_int(g, "bus", w),
            p_min=_num(g, "p_min", w),
            p_max=_num(g, "p_max", w),
            ramp_min=_num(g, "ramp_min", w) if "ramp_min" in g else -rmax,
            ramp_max=rmax,
            min_up=_int(g, "min_up", w),
            min_down=_int(g, "min_down", w),
            marginal_cost=_num(g, "marginal_cost", w),
            startup_cost=_num(g, "startup_cost", w),
            shutdown_cost=_num(g, "shutdown_cost", w),
            initial_on=bool(g.get("initial_on", False)),
        ))
    demands = []
    for i, d in enumerate(section("demands")):
        w = f"demands[{i}]"
        prof = d.get("profile")
        if not isinstance(prof, list) or not prof:
            raise CaseError(f"{w}.profile: expected a non-empty list of numbers")
        values = []
        for h, v in enumerate(prof):
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise CaseError(f"{w}.profile[{h}]: expected a finite number, got {v!r}")
            values.append(float(v))
        demands.append(Demand(_int(d, "id", w), _int(d, "bus", w), _num(d, "voll", w), tuple(values)))
    storages = []
    for i, s in enumerate(section("storages", required=False)):
        w = f"storages[{i}]"
        storages.append(Storage(
            id=_int(s, "id", w),
            bus=_int(s, "bus", w),
            charge_max=_num(s, "charge_max", w),
            discharge_max=_num(s, "discharge_max", w),
            capacity=_num(s, "capacity", w),
            eff_charge=_num(s, "eff_charge", w, 1.0),
            eff_discharge=_num(s, "eff_discharge", w, 1.0),
        ))
    if horizon is None:
        horizon = len(demands[0].profile) if demands else 1
    case = GridCase(
        name=str(meta.get("name", "case")),
        buses=buses,
        lines=tuple(lines),
        generators=tuple(gens),
        demands=tuple(demands),
        storages=tuple(storages),
        horizon=horizon,
        theta_bound=theta,
        first_hour=first_hour,
    )
    validate_case(case)
    return case


def validate_case(case: GridCase) -> None:
    """Raise CaseError naming the first violated invariant."""
    if case.horizon < 1:
        raise CaseError("meta.horizon_hours: must be >= 1")
    if not case.theta_bound > 0:
        raise CaseError("meta.theta_bound_rad: must be > 0")
    if case.first_hour < 1:
        raise CaseError("meta.first_hour: must be >= 1")
    ids = [b.id for b in case.buses]
    if not ids:
        raise CaseError("buses: at least one bus is required")
    if sorted(ids) != list(range(1, len(ids) + 1)) or len(set(ids)) != len(ids):
        raise CaseError("buses: ids must be unique and contiguous from 1")
    bus_set = set(ids)

    def unique(items: Iterable, what: str) -> None:
        seen = [x.id for x in items]
        if len(seen) != len(set(seen)):
            raise CaseError(f"{what}: duplicate id")

    for items, what in ((case.lines, "lines"), (case.generators, "generators"),
                        (case.demands, "demands"), (case.storages, "storages")):
        unique(items, what)
    for ln in case.lines:
        w = f"line {ln.id}"
        if ln.from_bus not in bus_set or ln.to_bus not in bus_set:
            raise CaseError(f"{w}: references a nonexistent bus")
        if ln.from_bus == ln.to_bus:
            raise CaseError(f"{w}: from and to bus coincide")
        if not (ln.flow_min <= 0.0 <= ln.flow_max):
            raise CaseError(f"{w}: requires flow_min <= 0 <= flow_max")
        if not (0.0 <= ln.wfpi <= MAX_WFPI):
            raise CaseError(f"{w}: wfpi must lie in [0, {MAX_WFPI:g}]")
        if ln.susceptance <= 0:
            raise CaseError(f"{w}: susceptance must be positive")
        if ln.ignition_prob is not None and not (0.0 <= ln.ignition_prob < 1.0):
            raise CaseError(f"{w}: ignition_prob must lie in [0, 1)")
    for g in case.generators:
        w = f"generator {g.id}"
        if g.bus not in bus_set:
            raise CaseError(f"{w}: references nonexistent bus {g.bus}")
        if not (0.0 <= g.p_min <= g.p_max):
            raise CaseError(f"{w}: requires 0 <= p_min <= p_max")
        if not (g.ramp_min <= 0.0 <= g.ramp_max):
            raise CaseError(f"{w}: requires ramp_min <= 0 <= ramp_max")
        if g.min_up < 1 or g.min_down < 1:
            raise CaseError(f"{w}: min_up and min_down must be >= 1")
        if min(g.marginal_cost, g.startup_cost, g.shutdown_cost) < 0:
            raise CaseError(f"{w}: costs must be non-negative")
    for d in case.demands:
        w = f"demand {d.id}"
        if d.bus not in bus_set:
            raise CaseError(f"{w}: references nonexistent bus {d.bus}")
        if len(d.profile) != case.horizon:
            raise CaseError(f"{w}: profile length {len(d.profile)} != horizon {case.horizon}")
        if any(v < 0 for v in d.profile):
            raise CaseError(f"{w}: profile values must be non-negative")
        if d.voll < 0:
            raise CaseError(f"{w}: voll must be non-negative")
    for s in case.storages:
        w = f"storage {s.id}"
        if s.bus not in bus_set:
            raise CaseError(f"{w}: references nonexistent bus {s.bus}")
        if s.capacity <= 0:
            raise CaseError(f"{w}: capacity must be positive")
        if not (0 < s.eff_charge <= 1 and 0 < s.eff_discharge <= 1):
            raise CaseError(f"{w}: efficiencies must lie in (0, 1]")
        if s.charge_max < 0 or s.discharge_max < 0:
            raise CaseError(f"{w}: power limits must be non-negative")


def loads_case_text(text: str) -> GridCase:
    try:
        data = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise CaseError(f"JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return parse_case(data)


def load_case(path: str | Path) -> GridCase:
    """Read and validate a JSON case file.  ``"ieee14"`` or the bundled file name loads the bundled case."""
    p = Path(path)
    if not p.exists() and p.name in (BUNDLED_CASE, "ieee14"):
        return load_bundled_case()
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise CaseError(f"cannot read case file {path}: {exc}") from None
    return loads_case_text(text)


def bundled_case_path() -> Path:
    return Path(str(resources.files("psps").joinpath("data", BUNDLED_CASE)))


def load_bundled_case() -> GridCase:
    return loads_case_text(bundled_case_path().read_text(encoding="utf-8"))


# -- serialization -------------------------------------------------------------

def case_to_dict(case: GridCase) -> dict:
    meta: dict[str, Any] = {"name": case.name, "horizon_hours": case.horizon, "theta_bound_rad": case.theta_bound}
    if case.first_hour != 1:
        meta["first_hour"] = case.first_hour
    lines = []
    for ln in case.lines:
        entry: dict[str, Any] = {
            "id": ln.id, "from": ln.from_bus, "to": ln.to_bus, "susceptance": ln.susceptance,
            "flow_max": ln.flow_max, "wfpi": ln.wfpi,
        }
        if ln.flow_min != -ln.flow_max:
            entry["flow_min"] = ln.flow_min
        if ln.ignition_prob is not None:
            entry["ignition_prob"] = ln.ignition_prob
        lines.append(entry)
    gens = []
    for g in case.generators:
        entry = {
            "id": g.id, "bus": g.bus, "p_min": g.p_min, "p_max": g.p_max, "ramp_max": g.ramp_max,
            "min_up": g.min_up, "min_down": g.min_down, "marginal_cost": g.marginal_cost,
            "startup_cost": g.startup_cost, "shutdown_cost": g.shutdown_cost, "initial_on": g.initial_on,
        }
        if g.ramp_min != -g.ramp_max:
            entry["ramp_min"] = g.ramp_min
        gens.append(entry)
    out = {
        "meta": meta,
        "buses": [{"id": b.id, "name": b.name} for b in case.buses],
        "lines": lines,
        "generators": gens,
        "demands": [{"id": d.id, "bus": d.bus, "voll": d.voll, "profile": list(d.profile)} for d in case.demands],
    }
    if case.storages:
        out["storages"] = [
            {"id": s.id, "bus": s.bus, "charge_max": s.charge_max, "discharge_max": s.discharge_max,
             "capacity": s.capacity, "eff_charge": s.eff_charge, "eff_discharge": s.eff_discharge}
            for s in case.storages
        ]
    return out


def dumps_case(case: GridCase) -> str:
    return json.dumps(case_to_dict(case), indent=2, allow_nan=False) + "\n"


def save_case(case: GridCase, path: str | Path) -> None:
    Path(path).write_text(dumps_case(case), encoding="utf-8")


# -- derived views ---------------------------------------------------------------

def total_wfpi(case: GridCase, energized: Iterable[int]) -> float:
    """Sum of line WFPI over the energized line ids."""
    by_id = {ln.id: ln.wfpi for ln in case.lines}
    total = 0.0
    for lid in set(energized):
        if lid not in by_id:
            raise KeyError(f"unknown line id {lid}")
        total += by_id[lid]
    return total


def islands(case: GridCase, energized: Iterable[int]) -> list[list[int]]:
    """Connected components of the energized subgraph, each sorted, ordered by smallest bus id."""
    on = set(energized)
    n = len(case.buses)
    rows, cols = [], []
    for ln in case.lines:
        if ln.id in on:
            rows.append(ln.from_bus - 1)
            cols.append(ln.to_bus - 1)
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    groups: dict[int, list[int]] = {}
    for bus, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(bus + 1)
    return sorted(groups.values(), key=lambda comp: comp[0])


def lines_by_wfpi(case: GridCase) -> list[Line]:
    """Lines in ascending WFPI order, ties broken by lowest line id."""
    return sorted(case.lines, key=lambda ln: (ln.wfpi, ln.id))


def wfpi_prefix_levels(case: GridCase) -> list[float]:
    """Risk tolerance for each active-line budget k = 0..|L|: the cumulative WFPI of the k lowest-risk lines."""
    levels = [0.0]
    for ln in lines_by_wfpi(case):
        levels.append(levels[-1] + ln.wfpi)
    return levels


def slice_hours(case: GridCase, first: int, last: int | None = None) -> GridCase:
    """Restrict the case to absolute hours ``first..last`` (inclusive)."""
    last = first if last is None else last
    start = first - case.first_hour
    stop = last - case.first_hour + 1
    if start < 0 or stop > case.horizon or stop <= start:
        raise CaseError(f"hours {first}..{last} outside the case horizon {case.hours.start}..{case.hours.stop - 1}")
    demands = tuple(replace(d, profile=d.profile[start:stop]) for d in case.demands)
    return replace(case, demands=demands, horizon=stop - start, first_hour=first)


def with_voll(case: GridCase, voll: float) -> GridCase:
    if not (voll >= 0 and math.isfinite(voll)):
        raise CaseError("voll must be a finite non-negative number")
    return replace(case, demands=tuple(replace(d, voll=float(voll)) for d in case.demands))


def with_profiles(case: GridCase, demand: np.ndarray) -> GridCase:
    """Replace the demand profiles with the rows of ``demand`` (shape demands x horizon)."""
    demand = np.asarray(demand, dtype=float)
    if demand.shape != (len(case.demands), case.horizon):
        raise CaseError(f"demand matrix shape {demand.shape} does not match the case")
    return replace(case, demands=tuple(replace(d, profile=tuple(float(v) for v in row))
                                       for d, row in zip(case.demands, demand)))

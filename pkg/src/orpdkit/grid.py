"""Network data model: buses, pi-model branches, generators, loads, compensators.

All electrical quantities are stored in per-unit on the system MVA base.
Grids are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Mapping


class GridSchemaError(ValueError):
    """A grid document is structurally malformed (missing/mistyped field)."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class GridSemanticError(ValueError):
    """A structurally valid grid document violates a model invariant."""

    def __init__(self, issues: list["ValidationIssue"]):
        self.issues = issues
        lines = "; ".join(f"{i.path}: {i.message}" for i in issues)
        super().__init__(lines)


@dataclass(frozen=True)
class Bus:
    """A network node. Voltage magnitude bounds are per-unit."""

    id: int
    name: str
    vn_kv: float
    v_min_pu: float
    v_max_pu: float


@dataclass(frozen=True)
class Line:
    """Pi-model branch with an ideal transformer of ratio tap_ratio on the from side.

    The 1/tap_ratio**2 factor scales both the series and shunt terms on *both*
    line ends when flows are evaluated (see line_admittance_view).
    """

    from_bus: int
    to_bus: int
    y_series: complex
    y_shunt_from: complex
    y_shunt_to: complex
    tap_ratio: float
    s_max_pu: float
    angle_diff_min_rad: float
    angle_diff_max_rad: float


@dataclass(frozen=True)
class VoltGenerator:
    """Generator controlling its bus voltage magnitude via a setpoint."""

    bus: int
    q_min_pu: float
    q_max_pu: float
    is_slack: bool = False


@dataclass(frozen=True)
class StatGenerator:
    """Generator injecting a fixed (input-driven) complex power."""

    bus: int


@dataclass(frozen=True)
class Load:
    bus: int


@dataclass(frozen=True)
class Compensator:
    """Controllable reactive power injection with box limits."""

    bus: int
    q_min_pu: float
    q_max_pu: float


@dataclass(frozen=True, eq=False)
class Grid:
    """Full static network description. Immutable; hash is object identity."""

    base_mva: float
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    volt_gens: tuple[VoltGenerator, ...]
    stat_gens: tuple[StatGenerator, ...]
    loads: tuple[Load, ...]
    compensators: tuple[Compensator, ...]

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def slack_bus(self) -> int:
        for g in self.volt_gens:
            if g.is_slack:
                return g.bus
        raise GridSemanticError([ValidationIssue("volt_gens", "no slack generator")])

    def volt_gen_buses(self) -> list[int]:
        return [g.bus for g in self.volt_gens]

    def compensator_buses(self) -> list[int]:
        return [c.bus for c in self.compensators]

    def mw_to_pu(self, value_mw: float) -> float:
        return value_mw / self.base_mva

    def pu_to_mw(self, value_pu: float) -> float:
        return value_pu * self.base_mva


@dataclass(frozen=True)
class ValidationIssue:
    path: str
    message: str


@dataclass
class ValidationReport:
    issues: list[ValidationIssue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def add(self, path: str, message: str) -> None:
        self.issues.append(ValidationIssue(path, message))

    def __str__(self) -> str:
        if self.ok:
            return "valid"
        return "\n".join(f"{i.path}: {i.message}" for i in self.issues)


def _want(document: Mapping[str, Any], key: str, kind: type, path: str) -> Any:
    if key not in document:
        raise GridSchemaError(f"{path}.{key}", "missing field")
    value = document[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise GridSchemaError(f"{path}.{key}", f"expected {kind.__name__}, got {type(value).__name__}")
    return value


def _want_complex(document: Mapping[str, Any], key: str, path: str) -> complex:
    sub = _want(document, key, dict, path)
    g = _want(sub, "g", float, f"{path}.{key}")
    b = _want(sub, "b", float, f"{path}.{key}")
    return complex(g, b)


def _want_list(document: Mapping[str, Any], key: str, path: str) -> list:
    if key not in document:
        raise GridSchemaError(f"{path}.{key}", "missing field")
    value = document[key]
    if not isinstance(value, list):
        raise GridSchemaError(f"{path}.{key}", f"expected list, got {type(value).__name__}")
    return value


def parse_grid(document: Mapping[str, Any]) -> Grid:
    """Build a validated Grid from a nested key-value document.

    Raises GridSchemaError for structural problems and GridSemanticError
    (carrying every violation with its element path) for model violations.
    """
    base_mva = _want(document, "base_mva", float, "$")
    buses = tuple(
        Bus(
            id=_want(b, "id", int, f"buses[{k}]"),
            name=_want(b, "name", str, f"buses[{k}]"),
            vn_kv=_want(b, "vn_kv", float, f"buses[{k}]"),
            v_min_pu=_want(b, "v_min_pu", float, f"buses[{k}]"),
            v_max_pu=_want(b, "v_max_pu", float, f"buses[{k}]"),
        )
        for k, b in enumerate(_want_list(document, "buses", "$"))
    )
    lines = tuple(
        Line(
            from_bus=_want(ln, "from", int, f"lines[{k}]"),
            to_bus=_want(ln, "to", int, f"lines[{k}]"),
            y_series=_want_complex(ln, "y_series", f"lines[{k}]"),
            y_shunt_from=_want_complex(ln, "y_shunt_from", f"lines[{k}]"),
            y_shunt_to=_want_complex(ln, "y_shunt_to", f"lines[{k}]"),
            tap_ratio=_want(ln, "tap_ratio", float, f"lines[{k}]"),
            s_max_pu=_want(ln, "s_max_pu", float, f"lines[{k}]"),
            angle_diff_min_rad=_want(ln, "angle_diff_min_rad", float, f"lines[{k}]"),
            angle_diff_max_rad=_want(ln, "angle_diff_max_rad", float, f"lines[{k}]"),
        )
        for k, ln in enumerate(_want_list(document, "lines", "$"))
    )
    volt_gens = tuple(
        VoltGenerator(
            bus=_want(g, "bus", int, f"volt_gens[{k}]"),
            q_min_pu=_want(g, "q_min_pu", float, f"volt_gens[{k}]"),
            q_max_pu=_want(g, "q_max_pu", float, f"volt_gens[{k}]"),
            is_slack=_want(g, "is_slack", bool, f"volt_gens[{k}]"),
        )
        for k, g in enumerate(_want_list(document, "volt_gens", "$"))
    )
    stat_gens = tuple(
        StatGenerator(bus=_want(g, "bus", int, f"stat_gens[{k}]"))
        for k, g in enumerate(_want_list(document, "stat_gens", "$"))
    )
    loads = tuple(
        Load(bus=_want(l, "bus", int, f"loads[{k}]"))
        for k, l in enumerate(_want_list(document, "loads", "$"))
    )
    compensators = tuple(
        Compensator(
            bus=_want(c, "bus", int, f"compensators[{k}]"),
            q_min_pu=_want(c, "q_min_pu", float, f"compensators[{k}]"),
            q_max_pu=_want(c, "q_max_pu", float, f"compensators[{k}]"),
        )
        for k, c in enumerate(_want_list(document, "compensators", "$"))
    )
    grid = Grid(
        base_mva=base_mva,
        buses=buses,
        lines=lines,
        volt_gens=volt_gens,
        stat_gens=stat_gens,
        loads=loads,
        compensators=compensators,
    )
    report = validate(grid)
    if not report.ok:
        raise GridSemanticError(report.issues)
    return grid


def grid_to_document(grid: Grid) -> dict:
    """Inverse of parse_grid; parse(grid_to_document(g)) reproduces g field-by-field."""

    def cplx(z: complex) -> dict:
        return {"g": z.real, "b": z.imag}

    return {
        "base_mva": grid.base_mva,
        "buses": [
            {"id": b.id, "name": b.name, "vn_kv": b.vn_kv, "v_min_pu": b.v_min_pu, "v_max_pu": b.v_max_pu}
            for b in grid.buses
        ],
        "lines": [
            {
                "from": ln.from_bus,
                "to": ln.to_bus,
                "y_series": cplx(ln.y_series),
                "y_shunt_from": cplx(ln.y_shunt_from),
                "y_shunt_to": cplx(ln.y_shunt_to),
                "tap_ratio": ln.tap_ratio,
                "s_max_pu": ln.s_max_pu,
                "angle_diff_min_rad": ln.angle_diff_min_rad,
                "angle_diff_max_rad": ln.angle_diff_max_rad,
            }
            for ln in grid.lines
        ],
        "volt_gens": [
            {"bus": g.bus, "q_min_pu": g.q_min_pu, "q_max_pu": g.q_max_pu, "is_slack": g.is_slack}
            for g in grid.volt_gens
        ],
        "stat_gens": [{"bus": g.bus} for g in grid.stat_gens],
        "loads": [{"bus": l.bus} for l in grid.loads],
        "compensators": [
            {"bus": c.bus, "q_min_pu": c.q_min_pu, "q_max_pu": c.q_max_pu} for c in grid.compensators
        ],
    }


def load_grid(path) -> Grid:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_grid(json.load(fh))


def save_grid(grid: Grid, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(grid_to_document(grid), fh, indent=2, sort_keys=True)
        fh.write("\n")


def validate(grid: Grid) -> ValidationReport:
    """Check every model invariant; the report is empty iff the grid is valid."""
    report = ValidationReport()
    n = grid.n_buses

    if grid.base_mva <= 0:
        report.add("$.base_mva", "must be positive")

    ids = [b.id for b in grid.buses]
    if sorted(ids) != list(range(n)):
        report.add("$.buses", f"ids must be exactly 0..{n - 1}, got {sorted(ids)}")
    for k, b in enumerate(grid.buses):
        if not (0 < b.v_min_pu <= b.v_max_pu):
            report.add(f"buses[{k}]", f"bus {b.id}: requires 0 < v_min_pu <= v_max_pu")

    known = set(ids)
    for k, ln in enumerate(grid.lines):
        path = f"lines[{k}]"
        if ln.from_bus not in known or ln.to_bus not in known:
            report.add(path, f"references missing bus ({ln.from_bus} -> {ln.to_bus})")
            continue
        if ln.from_bus == ln.to_bus:
            report.add(path, "from and to bus coincide")
        if ln.tap_ratio <= 0:
            report.add(path, "tap_ratio must be positive")
        if ln.s_max_pu <= 0:
            report.add(path, "s_max_pu must be positive")
        if not (ln.angle_diff_min_rad <= 0 <= ln.angle_diff_max_rad):
            report.add(path, "angle bounds must bracket zero")

    gen_buses: dict[int, str] = {}
    for k, g in enumerate(grid.volt_gens):
        path = f"volt_gens[{k}]"
        if g.bus not in known:
            report.add(path, f"references missing bus {g.bus}")
        if g.q_min_pu > g.q_max_pu:
            report.add(path, "q_min_pu exceeds q_max_pu")
        if g.bus in gen_buses:
            report.add(path, f"bus {g.bus} already hosts a generator ({gen_buses[g.bus]})")
        gen_buses[g.bus] = path
    for k, g in enumerate(grid.stat_gens):
        path = f"stat_gens[{k}]"
        if g.bus not in known:
            report.add(path, f"references missing bus {g.bus}")
        if g.bus in gen_buses:
            report.add(path, f"bus {g.bus} already hosts a generator ({gen_buses[g.bus]})")
        gen_buses[g.bus] = path

    seen_load: set[int] = set()
    for k, l in enumerate(grid.loads):
        path = f"loads[{k}]"
        if l.bus not in known:
            report.add(path, f"references missing bus {l.bus}")
        if l.bus in seen_load:
            report.add(path, f"bus {l.bus} already hosts a load")
        seen_load.add(l.bus)

    seen_comp: set[int] = set()
    for k, c in enumerate(grid.compensators):
        path = f"compensators[{k}]"
        if c.bus not in known:
            report.add(path, f"references missing bus {c.bus}")
        if c.q_min_pu > c.q_max_pu:
            report.add(path, "q_min_pu exceeds q_max_pu")
        if c.bus in seen_comp:
            report.add(path, f"bus {c.bus} already hosts a compensator")
        seen_comp.add(c.bus)

    slack_count = sum(1 for g in grid.volt_gens if g.is_slack)
    if slack_count == 0:
        report.add("$.volt_gens", "no slack generator")
    elif slack_count > 1:
        report.add("$.volt_gens", f"multiple slack generators ({slack_count})")

    if n > 0 and sorted(ids) == list(range(n)):
        adjacency: list[list[int]] = [[] for _ in range(n)]
        for ln in grid.lines:
            if ln.from_bus in known and ln.to_bus in known:
                adjacency[ln.from_bus].append(ln.to_bus)
                adjacency[ln.to_bus].append(ln.from_bus)
        seen = {0}
        stack = [0]
        while stack:
            u = stack.pop()
            for v in adjacency[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        if len(seen) != n:
            missing = sorted(set(range(n)) - seen)
            report.add("$.lines", f"graph is disconnected; unreachable buses {missing}")

    return report


@dataclass(frozen=True)
class LineCoefficients:
    """Tap-scaled admittances entering the directed flow expressions of a line.

    s_from = |v_f|^2 * conj(shunt_from) + v_f * conj(v_f - v_t) * conj(series_from)
    s_to   = |v_t|^2 * conj(shunt_to)   + v_t * conj(v_t - v_f) * conj(series_to)

    The 1/tap^2 factor is applied to series and shunt terms on both ends.
    """

    series_from: complex
    shunt_from: complex
    series_to: complex
    shunt_to: complex


def line_admittance_view(grid: Grid) -> list[LineCoefficients]:
    """Per-line coefficient table used by flow evaluation and the nodal matrix."""
    view = []
    for ln in grid.lines:
        t2 = ln.tap_ratio * ln.tap_ratio
        view.append(
            LineCoefficients(
                series_from=ln.y_series / t2,
                shunt_from=ln.y_shunt_from / t2,
                series_to=ln.y_series / t2,
                shunt_to=ln.y_shunt_to / t2,
            )
        )
    return view

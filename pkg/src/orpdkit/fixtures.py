"""Deterministic network builders and demo data generators.

Every builder returns a plain grid document (the nested key-value form
accepted by parse_grid) so fixtures diff cleanly and round-trip through the
file format. The two bundled networks (small14, uruguay107) are also shipped
as JSON under fixtures_data/ and loadable via fixture_path / fixture_grid.
"""

from __future__ import annotations

import datetime
from importlib import resources

import numpy as np

from .grid import Grid, parse_grid
from .powerflow import COL_LOAD_P, COL_LOAD_Q, COL_STAT_P, COL_STAT_Q, COL_VGEN_P, InputVector

_BUNDLED = ("small14", "uruguay107")


def _cplx(z: complex) -> dict:
    return {"g": z.real, "b": z.imag}


def _line(f, t, r, x, b_total=0.0, tap=1.0, s_max=3.0, angle=0.5) -> dict:
    y = 1.0 / complex(r, x)
    sh = complex(0.0, b_total / 2.0)
    return {
        "from": f,
        "to": t,
        "y_series": _cplx(y),
        "y_shunt_from": _cplx(sh),
        "y_shunt_to": _cplx(sh),
        "tap_ratio": tap,
        "s_max_pu": s_max,
        "angle_diff_min_rad": -angle,
        "angle_diff_max_rad": angle,
    }


def _bus(i, name, vn_kv=150.0, v_min=0.94, v_max=1.06) -> dict:
    return {"id": i, "name": name, "vn_kv": vn_kv, "v_min_pu": v_min, "v_max_pu": v_max}


def two_bus_document(
    r: float = 0.0,
    x: float = 0.1,
    b_total: float = 0.0,
    slack_pinned: bool = False,
    with_compensator: bool = False,
    comp_q_min: float = -0.5,
    comp_q_max: float = 0.5,
) -> dict:
    """Single-line network: slack at bus 0, load (and optionally compensator) at bus 1."""
    v_min, v_max = (1.0, 1.0) if slack_pinned else (0.5, 1.5)
    doc = {
        "base_mva": 100.0,
        "buses": [
            _bus(0, "source", v_min=v_min, v_max=v_max),
            _bus(1, "sink", v_min=0.5, v_max=1.5),
        ],
        "lines": [_line(0, 1, r, x, b_total, s_max=10.0, angle=1.5)],
        "volt_gens": [{"bus": 0, "q_min_pu": -5.0, "q_max_pu": 5.0, "is_slack": True}],
        "stat_gens": [],
        "loads": [{"bus": 1}],
        "compensators": [],
    }
    if with_compensator:
        doc["compensators"] = [{"bus": 1, "q_min_pu": comp_q_min, "q_max_pu": comp_q_max}]
    return doc


def two_bus_inputs(grid: Grid, p_load: float, q_load: float = 0.0) -> InputVector:
    x = np.zeros((grid.n_buses, 5))
    x[1, COL_LOAD_P] = p_load
    x[1, COL_LOAD_Q] = q_load
    return InputVector(x)


def bf1_document() -> dict:
    """One effective control dimension: pinned slack, one compensator."""
    return two_bus_document(r=0.02, x=0.1, slack_pinned=True, with_compensator=True)


def bf2_document() -> dict:
    """Two control dimensions: slack and one additional voltage setpoint."""
    return {
        "base_mva": 100.0,
        "buses": [
            _bus(0, "a", v_min=0.95, v_max=1.05),
            _bus(1, "b", v_min=0.95, v_max=1.05),
            _bus(2, "c", v_min=0.90, v_max=1.10),
        ],
        "lines": [
            _line(0, 1, 0.02, 0.08, 0.04, s_max=5.0, angle=1.0),
            _line(1, 2, 0.03, 0.10, 0.04, s_max=5.0, angle=1.0),
        ],
        "volt_gens": [
            {"bus": 0, "q_min_pu": -3.0, "q_max_pu": 3.0, "is_slack": True},
            {"bus": 1, "q_min_pu": -2.0, "q_max_pu": 2.0, "is_slack": False},
        ],
        "stat_gens": [],
        "loads": [{"bus": 2}],
        "compensators": [],
    }


def bf2_inputs(grid: Grid) -> InputVector:
    x = np.zeros((grid.n_buses, 5))
    x[2, COL_LOAD_P] = 0.7
    x[2, COL_LOAD_Q] = 0.25
    x[1, COL_VGEN_P] = 0.4
    return InputVector(x)


def bf3_document() -> dict:
    """Three control dimensions: two voltage setpoints and one compensator."""
    return {
        "base_mva": 100.0,
        "buses": [
            _bus(0, "a", v_min=0.95, v_max=1.05),
            _bus(1, "b", v_min=0.95, v_max=1.05),
            _bus(2, "c", v_min=0.90, v_max=1.10),
        ],
        "lines": [
            _line(0, 1, 0.02, 0.09, 0.05, s_max=5.0, angle=1.0),
            _line(1, 2, 0.03, 0.12, 0.05, s_max=5.0, angle=1.0),
            _line(0, 2, 0.04, 0.14, 0.05, s_max=5.0, angle=1.0),
        ],
        "volt_gens": [
            {"bus": 0, "q_min_pu": -3.0, "q_max_pu": 3.0, "is_slack": True},
            {"bus": 1, "q_min_pu": -2.0, "q_max_pu": 2.0, "is_slack": False},
        ],
        "stat_gens": [],
        "loads": [{"bus": 2}],
        "compensators": [{"bus": 2, "q_min_pu": -0.3, "q_max_pu": 0.4}],
    }


def bf3_inputs(grid: Grid) -> InputVector:
    x = np.zeros((grid.n_buses, 5))
    x[2, COL_LOAD_P] = 0.8
    x[2, COL_LOAD_Q] = 0.3
    x[1, COL_VGEN_P] = 0.5
    return InputVector(x)


_SMALL14_EDGES = [
    # (from, to, r, x, b_total)
    (0, 1, 0.015, 0.060, 0.10),
    (0, 4, 0.022, 0.090, 0.12),
    (1, 2, 0.030, 0.110, 0.10),
    (1, 3, 0.028, 0.100, 0.10),
    (2, 3, 0.032, 0.120, 0.08),
    (3, 4, 0.018, 0.070, 0.08),
    (1, 4, 0.025, 0.095, 0.10),
    (4, 5, 0.020, 0.080, 0.10),
    (5, 6, 0.026, 0.100, 0.08),
    (6, 7, 0.030, 0.115, 0.08),
    (7, 8, 0.028, 0.105, 0.08),
    (8, 9, 0.024, 0.090, 0.08),
    (9, 10, 0.030, 0.110, 0.06),
    (10, 11, 0.026, 0.100, 0.06),
    (11, 12, 0.028, 0.105, 0.06),
    (12, 13, 0.030, 0.115, 0.06),
    (5, 13, 0.034, 0.130, 0.08),
    (6, 9, 0.030, 0.115, 0.08),
    (3, 8, 0.036, 0.135, 0.10),
    (2, 13, 0.038, 0.140, 0.10),
]


def small14_document() -> dict:
    """14-bus meshed network: 3 voltage-controlling generators, 2 compensators.

    Line charging and loading are sized so the loss-minimizing setpoints and
    compensator injections sit strictly inside their boxes across a +/-30%
    loading envelope (cable-heavy, lightly loaded regime).
    """
    return {
        "base_mva": 100.0,
        "buses": [_bus(i, f"B{i:02d}", v_min=0.88, v_max=1.14) for i in range(14)],
        "lines": [_line(f, t, r, x, b) for f, t, r, x, b in _SMALL14_EDGES],
        "volt_gens": [
            {"bus": 0, "q_min_pu": -1.5, "q_max_pu": 1.5, "is_slack": True},
            {"bus": 1, "q_min_pu": -0.8, "q_max_pu": 0.8, "is_slack": False},
            {"bus": 5, "q_min_pu": -0.8, "q_max_pu": 0.8, "is_slack": False},
        ],
        "stat_gens": [{"bus": 2}, {"bus": 9}, {"bus": 12}],
        "loads": [{"bus": b} for b in (1, 3, 4, 6, 8, 10, 12, 13)],
        "compensators": [
            {"bus": 7, "q_min_pu": -0.45, "q_max_pu": 0.15},
            {"bus": 11, "q_min_pu": -0.45, "q_max_pu": 0.15},
        ],
    }


# Nominal per-unit injections for the small14 network: (bus, column) -> value.
_SMALL14_NOMINAL = {
    (1, COL_LOAD_P): 0.125,
    (1, COL_LOAD_Q): 0.040,
    (3, COL_LOAD_P): 0.225,
    (3, COL_LOAD_Q): 0.070,
    (4, COL_LOAD_P): 0.175,
    (4, COL_LOAD_Q): 0.055,
    (6, COL_LOAD_P): 0.150,
    (6, COL_LOAD_Q): 0.050,
    (8, COL_LOAD_P): 0.175,
    (8, COL_LOAD_Q): 0.060,
    (10, COL_LOAD_P): 0.125,
    (10, COL_LOAD_Q): 0.040,
    (12, COL_LOAD_P): 0.100,
    (12, COL_LOAD_Q): 0.030,
    (13, COL_LOAD_P): 0.150,
    (13, COL_LOAD_Q): 0.050,
    (2, COL_STAT_P): 0.275,
    (2, COL_STAT_Q): 0.025,
    (9, COL_STAT_P): 0.175,
    (9, COL_STAT_Q): 0.000,
    (12, COL_STAT_P): 0.225,
    (12, COL_STAT_Q): 0.050,
    (1, COL_VGEN_P): 0.275,
    (5, COL_VGEN_P): 0.250,
}


def small14_nominal(grid: Grid) -> InputVector:
    x = np.zeros((grid.n_buses, 5))
    for (bus, col), value in _SMALL14_NOMINAL.items():
        x[bus, col] = value
    return InputVector(x)


def uruguay107_document() -> dict:
    """Network shaped like the Uruguayan system: 107 buses (95 at 150 kV and
    12 at 500 kV), 156 branches (130 at 150 kV, 14 at 500 kV, 12 transformers),
    15 voltage controllers, 27 static generators, 55 loads, 6 compensators.

    Electrical parameters are synthetic but plausible; topology and counts are
    the fixture's contract.
    """
    rng = np.random.default_rng(20210101)
    n150, n500 = 95, 12
    buses = [_bus(i, f"U{i:03d}_150", vn_kv=150.0) for i in range(n150)]
    buses += [_bus(n150 + i, f"U{n150 + i:03d}_500", vn_kv=500.0) for i in range(n500)]

    lines = []
    seen = set()

    def add_line(f, t, r, x, b):
        seen.add((min(f, t), max(f, t)))
        lines.append(_line(f, t, r, x, b, s_max=6.0, angle=0.6))

    def rand_rxb(scale):
        r = float(rng.uniform(0.004, 0.02)) * scale
        x = float(rng.uniform(0.03, 0.10)) * scale
        b = float(rng.uniform(0.02, 0.10))
        return r, x, b

    # 150 kV layer: spanning tree plus extra meshing, 130 branches total.
    order = rng.permutation(n150)
    for k in range(1, n150):
        f = int(order[k])
        t = int(order[int(rng.integers(0, k))])
        add_line(f, t, *rand_rxb(1.0))
    while sum(1 for a, b in seen if a < n150 and b < n150) < 130:
        f, t = (int(v) for v in rng.integers(0, n150, size=2))
        if f == t or (min(f, t), max(f, t)) in seen:
            continue
        add_line(f, t, *rand_rxb(1.0))

    # 500 kV layer: ring plus chords, 14 branches total.
    for k in range(n500):
        f = n150 + k
        t = n150 + (k + 1) % n500
        add_line(f, t, *rand_rxb(0.4))
    chords = 0
    while chords < 2:
        f, t = (int(n150 + v) for v in rng.integers(0, n500, size=2))
        if f == t or (min(f, t), max(f, t)) in seen:
            continue
        add_line(f, t, *rand_rxb(0.4))
        chords += 1

    # Transformers: each 500 kV bus couples to one 150 kV bus.
    partners = rng.choice(n150, size=n500, replace=False)
    for k in range(n500):
        f = n150 + k
        t = int(partners[k])
        r = float(rng.uniform(0.001, 0.004))
        x = float(rng.uniform(0.02, 0.06))
        tap = float(rng.choice([0.98, 1.0, 1.02]))
        lines.append(_line(f, t, r, x, 0.0, tap=tap, s_max=8.0, angle=0.6))

    # Element placement: generators on distinct buses, one per bus.
    gen_buses = rng.choice(107, size=42, replace=False)
    volt_buses = sorted(int(b) for b in gen_buses[:15])
    stat_buses = sorted(int(b) for b in gen_buses[15:])
    load_buses = sorted(int(b) for b in rng.choice(107, size=55, replace=False))
    comp_buses = sorted(int(b) for b in rng.choice(107, size=6, replace=False))

    return {
        "base_mva": 100.0,
        "buses": buses,
        "lines": lines,
        "volt_gens": [
            {"bus": b, "q_min_pu": -1.2, "q_max_pu": 1.2, "is_slack": b == volt_buses[0]}
            for b in volt_buses
        ],
        "stat_gens": [{"bus": b} for b in stat_buses],
        "loads": [{"bus": b} for b in load_buses],
        "compensators": [{"bus": b, "q_min_pu": -0.2, "q_max_pu": 0.3} for b in comp_buses],
    }


def uruguay107_nominal(grid: Grid, seed: int = 7) -> InputVector:
    """Plausible balanced injections for the Uruguay-shaped network."""
    rng = np.random.default_rng(seed)
    x = np.zeros((grid.n_buses, 5))
    total_load = 0.0
    for l in grid.loads:
        p = float(rng.uniform(0.05, 0.35))
        x[l.bus, COL_LOAD_P] = p
        x[l.bus, COL_LOAD_Q] = 0.3 * p
        total_load += p
    gen_buses = [g.bus for g in grid.stat_gens] + [g.bus for g in grid.volt_gens if not g.is_slack]
    share = 0.95 * total_load / len(gen_buses)
    for g in grid.stat_gens:
        x[g.bus, COL_STAT_P] = share * float(rng.uniform(0.6, 1.4))
        x[g.bus, COL_STAT_Q] = 0.0
    for g in grid.volt_gens:
        if not g.is_slack:
            x[g.bus, COL_VGEN_P] = share * float(rng.uniform(0.6, 1.4))
    return InputVector(x)


def random_grid(seed: int, n_buses: int = 6) -> tuple[Grid, InputVector]:
    """Small random connected network plus consistent injections (test helper)."""
    rng = np.random.default_rng(seed)
    n = n_buses
    doc = {
        "base_mva": 100.0,
        "buses": [_bus(i, f"R{i}", v_min=0.8, v_max=1.2) for i in range(n)],
        "lines": [],
        "volt_gens": [],
        "stat_gens": [],
        "loads": [],
        "compensators": [],
    }
    edges = set()
    for k in range(1, n):
        t = int(rng.integers(0, k))
        edges.add((t, k))
    extra = int(rng.integers(1, n))
    while len(edges) < n - 1 + extra:
        f, t = (int(v) for v in rng.integers(0, n, size=2))
        if f != t:
            edges.add((min(f, t), max(f, t)))
    for f, t in sorted(edges):
        r = float(rng.uniform(0.005, 0.05))
        xx = float(rng.uniform(0.03, 0.2))
        b = float(rng.uniform(0.0, 0.08))
        tap = float(rng.choice([1.0, 1.0, 0.97, 1.03]))
        doc["lines"].append(_line(f, t, r, xx, b, tap=tap, s_max=5.0, angle=1.0))

    n_pv = int(rng.integers(1, max(2, n // 2)))
    pv_buses = sorted(int(b) for b in rng.choice(n, size=n_pv, replace=False))
    doc["volt_gens"] = [
        {"bus": b, "q_min_pu": -3.0, "q_max_pu": 3.0, "is_slack": b == pv_buses[0]} for b in pv_buses
    ]
    load_buses = [b for b in range(n) if b not in pv_buses]
    doc["loads"] = [{"bus": b} for b in load_buses]
    grid = parse_grid(doc)

    x = np.zeros((n, 5))
    for b in load_buses:
        x[b, COL_LOAD_P] = float(rng.uniform(0.02, 0.3))
        x[b, COL_LOAD_Q] = float(rng.uniform(-0.05, 0.1))
    return grid, InputVector(x)


def fixture_document(name: str) -> dict:
    if name == "small14":
        return small14_document()
    if name == "uruguay107":
        return uruguay107_document()
    raise KeyError(f"unknown fixture {name!r}; bundled fixtures: {_BUNDLED}")


def fixture_path(name: str):
    """Filesystem path of a bundled fixture JSON inside the installed package."""
    if name not in _BUNDLED:
        raise KeyError(f"unknown fixture {name!r}; bundled fixtures: {_BUNDLED}")
    return resources.files("orpdkit.fixtures_data").joinpath(f"{name}.json")


def fixture_grid(name: str) -> Grid:
    import json

    with fixture_path(name).open("r", encoding="utf-8") as fh:
        return parse_grid(json.load(fh))


def synthetic_history(
    grid: Grid,
    nominal: InputVector,
    n_hours: int,
    seed: int,
    start: str = "2021-03-01T00:00:00",
) -> tuple[list[str], list[InputVector]]:
    """Hourly input series with renewable-like structure around a nominal point.

    Loads follow a diurnal/weekly cycle; static generators get, in grid order,
    hydro-like bimodal regime switching, solar-like daylight gating with a
    summer peak, and wind-like decaying draws. Not uniform by design: used to
    study how non-uniform, seasonal inputs degrade learned dispatch.
    """
    rng = np.random.default_rng(seed)
    t0 = datetime.datetime.fromisoformat(start)
    stamps = [(t0 + datetime.timedelta(hours=h)).isoformat() for h in range(n_hours)]

    base = nominal.values
    series = np.repeat(base[None, :, :], n_hours, axis=0)
    hours = np.array([(t0 + datetime.timedelta(hours=h)).hour for h in range(n_hours)])
    months = np.array([(t0 + datetime.timedelta(hours=h)).month for h in range(n_hours)])
    dow = np.array([(t0 + datetime.timedelta(hours=h)).weekday() for h in range(n_hours)])
    # Southern-hemisphere summer peaks around January.
    season_phase = np.cos(2.0 * np.pi * (months - 1) / 12.0)

    diurnal = 1.0 + 0.25 * np.sin(2.0 * np.pi * (hours - 9) / 24.0)
    weekly = np.where(dow >= 5, 0.9, 1.0)
    for l in grid.loads:
        noise = rng.normal(1.0, 0.05, size=n_hours)
        factor = diurnal * weekly * noise
        series[:, l.bus, COL_LOAD_P] = base[l.bus, COL_LOAD_P] * factor
        series[:, l.bus, COL_LOAD_Q] = base[l.bus, COL_LOAD_Q] * factor

    styles = ["hydro", "solar", "wind"]
    for gi, g in enumerate(grid.stat_gens):
        style = styles[gi % len(styles)]
        p0 = base[g.bus, COL_STAT_P]
        if style == "hydro":
            # Two-regime (wet/dry) switching with slow persistence.
            level = np.empty(n_hours)
            wet = bool(rng.uniform() < 0.5)
            for h in range(n_hours):
                if rng.uniform() < 1.0 / 72.0:
                    wet = not wet
                level[h] = 1.35 if wet else 0.45
            profile = level * (1.0 + 0.10 * season_phase) * rng.normal(1.0, 0.06, size=n_hours)
        elif style == "solar":
            gate = ((hours >= 8) & (hours <= 18)).astype(float)
            bell = np.maximum(0.0, np.sin(np.pi * (hours - 7) / 12.0))
            profile = gate * bell * (1.3 + 0.5 * season_phase) * rng.normal(1.0, 0.08, size=n_hours)
        else:
            # Decaying (exponential-like) marginal, clipped to plant capability.
            profile = np.minimum(rng.exponential(0.8, size=n_hours), 2.0)
        series[:, g.bus, COL_STAT_P] = np.maximum(0.0, p0 * profile)
        series[:, g.bus, COL_STAT_Q] = base[g.bus, COL_STAT_Q] * rng.normal(1.0, 0.1, size=n_hours)

    for g in grid.volt_gens:
        if base[g.bus, COL_VGEN_P] != 0.0:
            factor = (1.0 + 0.06 * season_phase) * rng.normal(1.0, 0.08, size=n_hours)
            series[:, g.bus, COL_VGEN_P] = np.maximum(0.0, base[g.bus, COL_VGEN_P] * factor)

    return stamps, [InputVector(series[h], timestamp=stamps[h]) for h in range(n_hours)]

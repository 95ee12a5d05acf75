"""Newton-Raphson AC power flow in polar coordinates, plus constraint checking.

Unknowns are the voltage angles at every non-slack bus and the voltage
magnitudes at buses without a voltage-controlling generator. Buses hosting a
VoltGenerator hold their magnitude at the commanded setpoint; the slack bus
additionally pins angle zero and absorbs the active-power balance.

solve_pf is a pure function of its arguments; per-grid index structures are
memoized on grid identity so repeated solves over one network are cheap.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .grid import Grid, line_admittance_view

# Column layout of the exogenous per-bus input matrix (N x 5).
X_COLUMNS = ("load_p", "load_q", "stat_p", "stat_q", "vgen_p")
COL_LOAD_P, COL_LOAD_Q, COL_STAT_P, COL_STAT_Q, COL_VGEN_P = range(5)

# Column layout of the per-bus control matrix (N x 2).
Y_COLUMNS = ("vset", "qr")
COL_VSET, COL_QR = range(2)


class PowerFlowSingularError(RuntimeError):
    """The Newton Jacobian became singular; reported distinctly from divergence."""


@dataclass
class InputVector:
    """Per-bus exogenous injections, per-unit; zero where the element is absent."""

    values: np.ndarray  # (N, 5) float64
    timestamp: Optional[str] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != 5:
            raise ValueError(f"input matrix must be (N, 5), got {self.values.shape}")


@dataclass
class ControlVector:
    """Per-bus decisions [vset, qr]; mask marks entries with a hosting element."""

    values: np.ndarray  # (N, 2) float64
    mask: np.ndarray  # (N, 2) bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape or self.values.ndim != 2 or self.values.shape[1] != 2:
            raise ValueError(f"control matrix must be (N, 2) with matching mask, got {self.values.shape}")


def input_mask(grid: Grid) -> np.ndarray:
    """Boolean (N, 5) matrix of defined input entries."""
    m = np.zeros((grid.n_buses, 5), dtype=bool)
    for l in grid.loads:
        m[l.bus, COL_LOAD_P] = m[l.bus, COL_LOAD_Q] = True
    for g in grid.stat_gens:
        m[g.bus, COL_STAT_P] = m[g.bus, COL_STAT_Q] = True
    for g in grid.volt_gens:
        m[g.bus, COL_VGEN_P] = True
    return m


def control_mask(grid: Grid) -> np.ndarray:
    """Boolean (N, 2) matrix: column 0 at volt-gen buses, column 1 at compensators."""
    m = np.zeros((grid.n_buses, 2), dtype=bool)
    for g in grid.volt_gens:
        m[g.bus, COL_VSET] = True
    for c in grid.compensators:
        m[c.bus, COL_QR] = True
    return m


def control_template(grid: Grid) -> ControlVector:
    """All-zero ControlVector carrying the grid's mask."""
    return ControlVector(np.zeros((grid.n_buses, 2)), control_mask(grid))


@dataclass
class PFOptions:
    tolerance: float = 1e-8
    max_iter: int = 30
    # Optional warm start (complex bus voltages); flat start when None.
    v0: Optional[np.ndarray] = None


@dataclass
class PFSolution:
    voltages: np.ndarray  # (N,) complex, slack angle 0
    flows: np.ndarray  # (L, 2) complex: [s_from, s_to] per line
    gen_q: np.ndarray  # reactive output per VoltGenerator, grid order
    slack_p: float
    p_loss: float
    converged: bool
    iterations: int
    residual_norm: float


@dataclass(frozen=True)
class _GridArrays:
    """Index structure and nodal admittance matrix compiled from a Grid."""

    n: int
    ybus: np.ndarray  # (N, N) complex
    slack: int
    pv: np.ndarray  # volt-gen bus ids, sorted
    pq: np.ndarray  # buses without volt gens, sorted
    non_slack: np.ndarray
    line_from: np.ndarray
    line_to: np.ndarray
    coef_series: np.ndarray  # tap-scaled series admittance per line
    coef_shunt_from: np.ndarray
    coef_shunt_to: np.ndarray
    vg_buses: np.ndarray  # volt-gen buses in grid order (not sorted)
    v_min: np.ndarray
    v_max: np.ndarray
    ang_min: np.ndarray
    ang_max: np.ndarray
    s_max: np.ndarray
    gen_q_min: np.ndarray
    gen_q_max: np.ndarray
    comp_buses: np.ndarray
    comp_q_min: np.ndarray
    comp_q_max: np.ndarray


_grid_cache: "weakref.WeakKeyDictionary[Grid, _GridArrays]" = weakref.WeakKeyDictionary()


def _arrays(grid: Grid) -> _GridArrays:
    cached = _grid_cache.get(grid)
    if cached is not None:
        return cached
    n = grid.n_buses
    view = line_admittance_view(grid)
    ybus = np.zeros((n, n), dtype=complex)
    lf = np.array([ln.from_bus for ln in grid.lines], dtype=int)
    lt = np.array([ln.to_bus for ln in grid.lines], dtype=int)
    cs = np.array([c.series_from for c in view], dtype=complex)
    cshf = np.array([c.shunt_from for c in view], dtype=complex)
    csht = np.array([c.shunt_to for c in view], dtype=complex)
    for k in range(len(grid.lines)):
        i, j = lf[k], lt[k]
        ybus[i, i] += cs[k] + cshf[k]
        ybus[j, j] += cs[k] + csht[k]
        ybus[i, j] -= cs[k]
        ybus[j, i] -= cs[k]
    pv = np.array(sorted(g.bus for g in grid.volt_gens), dtype=int)
    pq = np.array(sorted(set(range(n)) - set(pv.tolist())), dtype=int)
    slack = grid.slack_bus
    non_slack = np.array([i for i in range(n) if i != slack], dtype=int)
    arrays = _GridArrays(
        n=n,
        ybus=ybus,
        slack=slack,
        pv=pv,
        pq=pq,
        non_slack=non_slack,
        line_from=lf,
        line_to=lt,
        coef_series=cs,
        coef_shunt_from=cshf,
        coef_shunt_to=csht,
        vg_buses=np.array([g.bus for g in grid.volt_gens], dtype=int),
        v_min=np.array([b.v_min_pu for b in grid.buses]),
        v_max=np.array([b.v_max_pu for b in grid.buses]),
        ang_min=np.array([ln.angle_diff_min_rad for ln in grid.lines]),
        ang_max=np.array([ln.angle_diff_max_rad for ln in grid.lines]),
        s_max=np.array([ln.s_max_pu for ln in grid.lines]),
        gen_q_min=np.array([g.q_min_pu for g in grid.volt_gens]),
        gen_q_max=np.array([g.q_max_pu for g in grid.volt_gens]),
        comp_buses=np.array([c.bus for c in grid.compensators], dtype=int),
        comp_q_min=np.array([c.q_min_pu for c in grid.compensators]),
        comp_q_max=np.array([c.q_max_pu for c in grid.compensators]),
    )
    _grid_cache[grid] = arrays
    return arrays


def _specified_injections(grid: Grid, a: _GridArrays, x: np.ndarray, y: np.ndarray):
    """Net scheduled P at all buses and net scheduled Q at PQ buses (per-unit).

    P at the slack bus and Q at volt-gen buses are implicit and not scheduled.
    """
    p_spec = x[:, COL_VGEN_P] + x[:, COL_STAT_P] - x[:, COL_LOAD_P]
    q_spec = x[:, COL_STAT_Q] - x[:, COL_LOAD_Q] + y[:, COL_QR]
    return p_spec, q_spec


def _mismatch(a: _GridArrays, v: np.ndarray, p_spec: np.ndarray, q_spec: np.ndarray) -> np.ndarray:
    s_calc = v * np.conj(a.ybus @ v)
    fp = s_calc.real[a.non_slack] - p_spec[a.non_slack]
    fq = s_calc.imag[a.pq] - q_spec[a.pq]
    return np.concatenate([fp, fq])


def _jacobian(a: _GridArrays, v: np.ndarray) -> np.ndarray:
    """Analytic polar Jacobian d[P(non-slack); Q(pq)] / d[theta(non-slack); |v|(pq)]."""
    ibus = a.ybus @ v
    diag_v = np.diag(v)
    diag_i = np.diag(ibus)
    diag_vnorm = np.diag(v / np.abs(v))
    ds_dva = 1j * diag_v @ np.conj(diag_i - a.ybus @ diag_v)
    ds_dvm = diag_vnorm @ np.conj(diag_i) + diag_v @ np.conj(a.ybus @ diag_vnorm)
    j11 = ds_dva.real[np.ix_(a.non_slack, a.non_slack)]
    j12 = ds_dvm.real[np.ix_(a.non_slack, a.pq)]
    j21 = ds_dva.imag[np.ix_(a.pq, a.non_slack)]
    j22 = ds_dvm.imag[np.ix_(a.pq, a.pq)]
    return np.block([[j11, j12], [j21, j22]])


def solve_pf(grid: Grid, x: InputVector, y: ControlVector, options: PFOptions | None = None) -> PFSolution:
    """Solve the nodal balance equations for the given inputs and controls.

    Returns converged=False with the last iterate after max_iter; raises
    PowerFlowSingularError if the Newton system loses rank.
    """
    options = options or PFOptions()
    a = _arrays(grid)
    n = a.n
    xv = x.values
    yv = y.values
    if xv.shape[0] != n or yv.shape[0] != n:
        raise ValueError(f"input/control rows must match bus count {n}")

    p_spec, q_spec = _specified_injections(grid, a, xv, yv)

    vset = np.ones(n)
    vset[a.pv] = yv[a.pv, COL_VSET]
    if options.v0 is not None:
        v = np.asarray(options.v0, dtype=complex).copy()
        vm = np.abs(v)
        va = np.angle(v)
        va[a.slack] = 0.0
    else:
        vm = np.ones(n)
        va = np.zeros(n)
    vm[a.pv] = vset[a.pv]  # PV magnitudes are pinned, never iterated
    v = vm * np.exp(1j * va)

    n_va = len(a.non_slack)
    iterations = 0
    f = _mismatch(a, v, p_spec, q_spec)
    residual = float(np.max(np.abs(f))) if f.size else 0.0
    converged = residual <= options.tolerance
    while not converged and iterations < options.max_iter:
        jac = _jacobian(a, v)
        try:
            step = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowSingularError(f"singular Jacobian at iteration {iterations}") from exc
        va[a.non_slack] += step[:n_va]
        vm[a.pq] += step[n_va:]
        v = vm * np.exp(1j * va)
        iterations += 1
        f = _mismatch(a, v, p_spec, q_spec)
        residual = float(np.max(np.abs(f))) if f.size else 0.0
        converged = residual <= options.tolerance

    flows = line_flows(grid, v)
    p_loss = total_losses(flows)
    s_calc = v * np.conj(a.ybus @ v)
    # Solve the nodal balance for the implicit quantities.
    gen_q = np.array(
        [
            s_calc.imag[b] - xv[b, COL_STAT_Q] + xv[b, COL_LOAD_Q] - yv[b, COL_QR]
            for b in a.vg_buses
        ]
    )
    slack_p = float(s_calc.real[a.slack] - xv[a.slack, COL_STAT_P] + xv[a.slack, COL_LOAD_P])
    return PFSolution(
        voltages=v,
        flows=flows,
        gen_q=gen_q,
        slack_p=slack_p,
        p_loss=p_loss,
        converged=bool(converged),
        iterations=iterations,
        residual_norm=residual,
    )


def mismatch_residual(grid: Grid, x: InputVector, y: ControlVector, voltages: np.ndarray) -> float:
    """Infinity norm of the nodal balance residual at the given voltages."""
    a = _arrays(grid)
    p_spec, q_spec = _specified_injections(grid, a, x.values, y.values)
    f = _mismatch(a, np.asarray(voltages, dtype=complex), p_spec, q_spec)
    return float(np.max(np.abs(f))) if f.size else 0.0


def line_flows(grid: Grid, voltages: np.ndarray) -> np.ndarray:
    """Directed complex flows [s_from, s_to] per line at the given voltages."""
    a = _arrays(grid)
    v = np.asarray(voltages, dtype=complex)
    vf = v[a.line_from]
    vt = v[a.line_to]
    s_from = vf * np.conj(vf) * np.conj(a.coef_shunt_from) + vf * np.conj(vf - vt) * np.conj(a.coef_series)
    s_to = vt * np.conj(vt) * np.conj(a.coef_shunt_to) + vt * np.conj(vt - vf) * np.conj(a.coef_series)
    return np.stack([s_from, s_to], axis=1)


def total_losses(flows: np.ndarray) -> float:
    """Total active losses: sum over lines of Re(s_from + s_to)."""
    if len(flows) == 0:
        return 0.0
    return float(np.sum(flows[:, 0].real + flows[:, 1].real))


@dataclass
class ConstraintEntry:
    kind: str  # voltage | angle | setpoint | flow | gen_q | comp_q
    element: str
    value: float
    bound: tuple[float, float]  # relaxed (lower, upper) actually enforced
    violation: float  # positive means violated


@dataclass
class ConstraintReport:
    entries: list[ConstraintEntry] = field(default_factory=list)
    feasible: bool = True
    relaxation_used: float = 0.0
    atol: float = 0.0

    def worst(self) -> float:
        return max((e.violation for e in self.entries), default=0.0)

    def violations(self) -> list[ConstraintEntry]:
        return [e for e in self.entries if e.violation > self.atol]


def constraint_margins(grid: Grid, x: InputVector, y: ControlVector, sol: PFSolution) -> np.ndarray:
    """Signed constraint margins at zero relaxation (positive means violated).

    Vectorized counterpart of check_constraints for optimization inner loops;
    ordering matches the report: voltages, angles, setpoints, flows
    (from/to interleaved per line), volt-gen reactive, compensator reactive.
    """
    a = _arrays(grid)
    v = sol.voltages
    vm = np.abs(v)
    ang = np.angle(v[a.line_from] * np.conj(v[a.line_to]))
    vset = y.values[a.vg_buses, COL_VSET]
    vg_vm = vm[a.vg_buses]
    s_abs = np.abs(sol.flows)
    qr = y.values[a.comp_buses, COL_QR] if len(a.comp_buses) else np.zeros(0)
    return np.concatenate(
        [
            np.maximum(a.v_min - vm, vm - a.v_max),
            np.maximum(a.ang_min - ang, ang - a.ang_max),
            np.abs(vg_vm - vset),
            np.ravel(s_abs - a.s_max[:, None]),
            np.maximum(a.gen_q_min - sol.gen_q, sol.gen_q - a.gen_q_max),
            np.maximum(a.comp_q_min - qr, qr - a.comp_q_max),
        ]
    )


def _relax_interval(lo: float, hi: float, rho: float) -> tuple[float, float]:
    """Proportionally widen a two-sided bound, sign-corrected for negative limits."""
    hi_r = hi * (1.0 + rho) if hi >= 0 else hi * (1.0 - rho)
    lo_r = lo * (1.0 - rho) if lo >= 0 else lo * (1.0 + rho)
    return lo_r, hi_r


def check_constraints(
    grid: Grid,
    x: InputVector,
    y: ControlVector,
    sol: PFSolution,
    relaxation: float = 0.0,
    atol: float = 1e-9,
) -> ConstraintReport:
    """Evaluate every operating constraint at the solved state.

    Bounds are closed; atol absorbs floating-point roundoff only. Feasible iff
    no entry violates its (relaxation-widened) bounds by more than atol.
    """
    if not sol.converged:
        raise ValueError("constraint check requires a converged power-flow solution")
    if x.values.shape[0] != grid.n_buses:
        raise ValueError("input rows must match bus count")
    rho = float(relaxation)
    report = ConstraintReport(relaxation_used=rho, atol=atol)
    v = sol.voltages
    vm = np.abs(v)

    def push(kind: str, element: str, value: float, lo: float, hi: float):
        violation = max(lo - value, value - hi)
        report.entries.append(ConstraintEntry(kind, element, float(value), (lo, hi), float(violation)))

    for b in grid.buses:
        lo, hi = _relax_interval(b.v_min_pu, b.v_max_pu, rho)
        push("voltage", f"bus {b.id}", vm[b.id], lo, hi)

    for k, ln in enumerate(grid.lines):
        width = ln.angle_diff_max_rad - ln.angle_diff_min_rad
        lo = ln.angle_diff_min_rad - rho * width
        hi = ln.angle_diff_max_rad + rho * width
        diff = float(np.angle(v[ln.from_bus] * np.conj(v[ln.to_bus])))
        push("angle", f"line {k} ({ln.from_bus}->{ln.to_bus})", diff, lo, hi)

    for g in grid.volt_gens:
        vset = y.values[g.bus, COL_VSET]
        lo, hi = _relax_interval(vset, vset, rho)
        push("setpoint", f"bus {g.bus}", vm[g.bus], lo, hi)

    for k, ln in enumerate(grid.lines):
        hi = ln.s_max_pu * (1.0 + rho)
        push("flow", f"line {k} from-side", abs(sol.flows[k, 0]), 0.0, hi)
        push("flow", f"line {k} to-side", abs(sol.flows[k, 1]), 0.0, hi)

    for gi, g in enumerate(grid.volt_gens):
        lo, hi = _relax_interval(g.q_min_pu, g.q_max_pu, rho)
        push("gen_q", f"volt_gen at bus {g.bus}", sol.gen_q[gi], lo, hi)

    for c in grid.compensators:
        lo, hi = _relax_interval(c.q_min_pu, c.q_max_pu, rho)
        push("comp_q", f"compensator at bus {c.bus}", y.values[c.bus, COL_QR], lo, hi)

    report.feasible = all(e.violation <= atol for e in report.entries)
    return report

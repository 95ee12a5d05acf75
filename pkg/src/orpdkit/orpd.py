"""Loss-minimizing reactive dispatch: the labeling oracle.

Reduced-space formulation: the decision vector stacks the voltage setpoints of
every voltage-controlling generator (grid order) followed by the reactive
injection of every compensator (grid order). All other quantities are
eliminated by the inner power flow. An augmented-Lagrangian outer loop handles
the operating constraints; box bounds are kept by projection inside the
quasi-Newton inner solver; objective gradients use central finite differences.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .grid import Grid
from .powerflow import (
    COL_QR,
    COL_VSET,
    ControlVector,
    InputVector,
    PFOptions,
    check_constraints,
    constraint_margins,
    control_mask,
    solve_pf,
)

# Objective value standing in for a power-flow failure; steep enough that the
# line search retreats, finite so quasi-Newton bookkeeping stays sane.
_FAILED_EVAL = 1e6


@dataclass
class OrpdOptions:
    pf_tolerance: float = 1e-10
    pf_max_iter: int = 40
    fd_step: float = 1e-6
    penalty_init: float = 10.0
    penalty_growth: float = 10.0
    max_outer: int = 6
    inner_max_iter: int = 60
    stationarity_tol: float = 1e-6
    feasibility_tol: float = 1e-6
    restarts: int = 0
    seed: int = 0
    rho_probe: tuple[float, ...] = (0.0, 0.018, 0.05)


@dataclass
class OrpdSolution:
    y_star: ControlVector
    p_loss: float
    feasible_at: Optional[float]  # smallest probed relaxation that passes; None if none
    converged: bool
    iterations: int  # outer iterations (grid points for the brute-force scan)
    inner_pf_count: int
    kkt_stationarity: float


def control_boxes(grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    """Box bounds of the decision vector: bus voltage bounds, then compensator limits."""
    lo, hi = [], []
    for g in grid.volt_gens:
        bus = grid.buses[g.bus]
        lo.append(bus.v_min_pu)
        hi.append(bus.v_max_pu)
    for c in grid.compensators:
        lo.append(c.q_min_pu)
        hi.append(c.q_max_pu)
    return np.array(lo, dtype=float), np.array(hi, dtype=float)


def controls_from_vector(grid: Grid, u: np.ndarray) -> ControlVector:
    """Expand a decision vector into the masked per-bus control matrix."""
    values = np.zeros((grid.n_buses, 2))
    k = 0
    for g in grid.volt_gens:
        values[g.bus, COL_VSET] = u[k]
        k += 1
    for c in grid.compensators:
        values[c.bus, COL_QR] = u[k]
        k += 1
    return ControlVector(values, control_mask(grid))


def vector_from_controls(grid: Grid, y: ControlVector) -> np.ndarray:
    u = []
    for g in grid.volt_gens:
        u.append(y.values[g.bus, COL_VSET])
    for c in grid.compensators:
        u.append(y.values[c.bus, COL_QR])
    return np.array(u, dtype=float)


class _Evaluator:
    """Shared state for repeated objective evaluations on one instance.

    Keeps the last converged voltage profile as a warm start and counts inner
    power flows. Evaluation order is fixed, so warm starting stays deterministic.
    """

    def __init__(self, grid: Grid, x: InputVector, options: OrpdOptions):
        self.grid = grid
        self.x = x
        self.options = options
        self.warm: Optional[np.ndarray] = None
        self.pf_count = 0

    def __call__(self, u: np.ndarray):
        """Return (loss, constraint margins, PFSolution or None)."""
        y = controls_from_vector(self.grid, u)
        opts = PFOptions(
            tolerance=self.options.pf_tolerance,
            max_iter=self.options.pf_max_iter,
            v0=self.warm,
        )
        self.pf_count += 1
        sol = solve_pf(self.grid, self.x, y, opts)
        if not sol.converged and self.warm is not None:
            self.pf_count += 1
            sol = solve_pf(self.grid, self.x, y, PFOptions(self.options.pf_tolerance, self.options.pf_max_iter))
        if not sol.converged:
            return _FAILED_EVAL, None, None
        self.warm = sol.voltages
        margins = constraint_margins(self.grid, self.x, y, sol)
        return sol.p_loss, margins, sol


def _al_value(loss: float, margins: Optional[np.ndarray], lam: np.ndarray, mu: float) -> float:
    """Squared-hinge augmented Lagrangian for inequality margins g <= 0."""
    if margins is None:
        return _FAILED_EVAL
    t = np.maximum(lam + mu * margins, 0.0)
    return loss + (float(np.sum(t * t)) - float(np.sum(lam * lam))) / (2.0 * mu)


def _al_fun_and_grad(ev: _Evaluator, u: np.ndarray, lam: np.ndarray, mu: float, h: float):
    """Augmented-Lagrangian value and central-difference gradient at u."""
    loss, margins, _ = ev(u)
    value = _al_value(loss, margins, lam, mu)
    grad = np.zeros_like(u)
    for i in range(len(u)):  # fixed probe ordering keeps reductions deterministic
        up = u.copy()
        up[i] += h
        um = u.copy()
        um[i] -= h
        lp, gp, _ = ev(up)
        lm, gm, _ = ev(um)
        grad[i] = (_al_value(lp, gp, lam, mu) - _al_value(lm, gm, lam, mu)) / (2.0 * h)
    return value, grad


def _projected_gradient_norm(u, grad, lo, hi) -> float:
    return float(np.max(np.abs(u - np.clip(u - grad, lo, hi)), initial=0.0))


def _probe_feasibility(grid, x, y, sol, options) -> Optional[float]:
    for rho in options.rho_probe:
        rep = check_constraints(grid, x, y, sol, relaxation=rho, atol=options.feasibility_tol)
        if rep.feasible:
            return rho
    return None


def solve_orpd(grid: Grid, x: InputVector, options: OrpdOptions | None = None) -> OrpdSolution:
    """Minimize total active losses over setpoints and compensator injections.

    Converged means the projected gradient of the penalized objective and the
    worst constraint violation both fell below their tolerances. Instances
    whose initial power flow fails return converged=False for the caller
    (typically the dataset filter) to decide.
    """
    opts = options or OrpdOptions()
    lo, hi = control_boxes(grid)
    dim = len(lo)
    ev = _Evaluator(grid, x, opts)

    if dim == 0 or bool(np.all(hi - lo <= 1e-15)):
        # Degenerate decision space: the box is a single point.
        u = (lo + hi) / 2.0
        loss, margins, sol = ev(u)
        feasible = margins is not None and float(np.max(margins, initial=0.0)) <= opts.feasibility_tol
        return OrpdSolution(
            y_star=controls_from_vector(grid, u),
            p_loss=loss if sol is not None else float("nan"),
            feasible_at=_probe_feasibility(grid, x, controls_from_vector(grid, u), sol, opts) if sol else None,
            converged=bool(sol is not None and feasible),
            iterations=0,
            inner_pf_count=ev.pf_count,
            kkt_stationarity=0.0,
        )

    rng = np.random.default_rng(opts.seed)
    starts = [(lo + hi) / 2.0]
    for _ in range(opts.restarts):
        starts.append(lo + rng.uniform(size=dim) * (hi - lo))

    best: Optional[dict] = None
    for u0 in starts:
        cand = _solve_from(ev, u0, lo, hi, opts)
        if cand is None:
            continue
        if best is None or _better(cand, best):
            best = cand

    if best is None:
        # Power flow failed at every start point.
        u = starts[0]
        return OrpdSolution(
            y_star=controls_from_vector(grid, u),
            p_loss=float("nan"),
            feasible_at=None,
            converged=False,
            iterations=0,
            inner_pf_count=ev.pf_count,
            kkt_stationarity=float("inf"),
        )

    y_star = controls_from_vector(grid, best["u"])
    return OrpdSolution(
        y_star=y_star,
        p_loss=best["loss"],
        feasible_at=_probe_feasibility(grid, x, y_star, best["sol"], opts),
        converged=best["converged"],
        iterations=best["outer"],
        inner_pf_count=ev.pf_count,
        kkt_stationarity=best["pg"],
    )


def _better(a: dict, b: dict) -> bool:
    """Prefer feasible candidates, then lower loss, then lower violation."""
    a_feas = a["viol"] <= a["feas_tol"]
    b_feas = b["viol"] <= b["feas_tol"]
    if a_feas != b_feas:
        return a_feas
    if a_feas:
        return a["loss"] < b["loss"]
    return a["viol"] < b["viol"]


def _solve_from(ev: _Evaluator, u0: np.ndarray, lo: np.ndarray, hi: np.ndarray, opts: OrpdOptions):
    loss0, margins0, sol0 = ev(u0)
    if sol0 is None:
        return None

    bounds = list(zip(lo.tolist(), hi.tolist()))
    lam = np.zeros_like(margins0)
    mu = opts.penalty_init
    u = u0.copy()
    tracked: Optional[dict] = None
    converged = False
    outer_done = 0
    pg = float("inf")

    for outer in range(opts.max_outer):
        res = minimize(
            lambda uu: _al_fun_and_grad(ev, uu, lam, mu, opts.fd_step),
            u,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={
                "maxiter": opts.inner_max_iter,
                "ftol": 1e-16,
                "gtol": min(opts.stationarity_tol * 0.25, 1e-7),
            },
        )
        u = np.clip(res.x, lo, hi)
        outer_done = outer + 1
        loss, margins, sol = ev(u)
        if sol is None:
            break
        viol = float(np.max(margins, initial=0.0))
        pg = _projected_gradient_norm(u, np.asarray(res.jac), lo, hi)
        cand = {
            "u": u.copy(),
            "loss": loss,
            "viol": viol,
            "sol": sol,
            "pg": pg,
            "outer": outer_done,
            "converged": False,
            "feas_tol": opts.feasibility_tol,
        }
        if tracked is None or _better(cand, tracked):
            tracked = cand
        if viol <= opts.feasibility_tol and pg <= opts.stationarity_tol:
            converged = True
            tracked = cand
            break
        lam = np.maximum(0.0, lam + mu * margins)
        mu *= opts.penalty_growth

    if tracked is None:
        return None
    tracked["converged"] = converged
    tracked["outer"] = outer_done
    return tracked


def brute_force_orpd(
    grid: Grid,
    x: InputVector,
    resolution: int,
    options: OrpdOptions | None = None,
) -> OrpdSolution:
    """Exhaustive scan of the control box; test oracle for solve_orpd.

    Guards against combinatorial blowup above 4 control dimensions. Returns
    converged=False (not an exception) when no scanned point is feasible.
    """
    opts = options or OrpdOptions()
    lo, hi = control_boxes(grid)
    dim = len(lo)
    if dim > 4:
        raise ValueError(f"brute force limited to 4 control dimensions, grid has {dim}")
    axes = []
    for i in range(dim):
        if hi[i] - lo[i] <= 1e-15:
            axes.append(np.array([(lo[i] + hi[i]) / 2.0]))
        else:
            axes.append(np.linspace(lo[i], hi[i], resolution))
    if dim == 0:
        axes = []

    ev = _Evaluator(grid, x, opts)
    best_u = None
    best_loss = np.inf
    best_sol = None
    points = 0
    for combo in itertools.product(*axes) if dim else [()]:
        points += 1
        u = np.array(combo, dtype=float)
        loss, margins, sol = ev(u)
        if sol is None:
            continue
        if float(np.max(margins, initial=0.0)) > opts.feasibility_tol:
            continue
        if loss < best_loss:
            best_loss = loss
            best_u = u
            best_sol = sol

    if best_u is None:
        return OrpdSolution(
            y_star=controls_from_vector(grid, (lo + hi) / 2.0),
            p_loss=float("nan"),
            feasible_at=None,
            converged=False,
            iterations=points,
            inner_pf_count=ev.pf_count,
            kkt_stationarity=float("nan"),
        )
    y_star = controls_from_vector(grid, best_u)
    return OrpdSolution(
        y_star=y_star,
        p_loss=best_loss,
        feasible_at=_probe_feasibility(grid, x, y_star, best_sol, opts),
        converged=True,
        iterations=points,
        inner_pf_count=ev.pf_count,
        kkt_stationarity=float("nan"),
    )

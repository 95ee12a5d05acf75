import numpy as np
import pytest

from orpdkit import fixtures
from orpdkit.grid import parse_grid
from orpdkit.orpd import (
    OrpdOptions,
    brute_force_orpd,
    control_boxes,
    controls_from_vector,
    solve_orpd,
    vector_from_controls,
)
from orpdkit.powerflow import check_constraints, control_mask, solve_pf


def _bf1():
    grid = parse_grid(fixtures.bf1_document())
    return grid, fixtures.two_bus_inputs(grid, 0.6, 0.25)


def _bf2():
    grid = parse_grid(fixtures.bf2_document())
    return grid, fixtures.bf2_inputs(grid)


def _bf3():
    grid = parse_grid(fixtures.bf3_document())
    return grid, fixtures.bf3_inputs(grid)


def test_degenerate_single_point_box_converges_trivially():
    # Pinned slack and no compensator: the decision box is one point.
    grid = parse_grid(fixtures.two_bus_document(r=0.02, x=0.1, slack_pinned=True))
    x = fixtures.two_bus_inputs(grid, 0.4, 0.1)
    sol = solve_orpd(grid, x)
    assert sol.converged
    assert sol.iterations == 0
    assert sol.kkt_stationarity == 0.0
    pf = solve_pf(grid, x, sol.y_star)
    assert sol.p_loss == pytest.approx(pf.p_loss, abs=1e-12)


def test_mask_respected_and_boxes_held():
    grid, x = _bf3()
    sol = solve_orpd(grid, x)
    mask = control_mask(grid)
    assert np.all(sol.y_star.values[~mask] == 0.0)
    lo, hi = control_boxes(grid)
    u = vector_from_controls(grid, sol.y_star)
    assert np.all(u >= lo - 1e-12)
    assert np.all(u <= hi + 1e-12)


def test_converged_labels_pass_constraints_at_zero_relaxation():
    for grid, x in (_bf1(), _bf2(), _bf3()):
        sol = solve_orpd(grid, x)
        assert sol.converged
        pf = solve_pf(grid, x, sol.y_star)
        report = check_constraints(grid, x, sol.y_star, pf, relaxation=0.0, atol=1e-6)
        assert report.feasible
        assert sol.feasible_at == 0.0


def test_oracle_beats_brute_force_one_dimension():
    grid, x = _bf1()
    sol = solve_orpd(grid, x)
    bf = brute_force_orpd(grid, x, 1001)
    assert sol.converged and bf.converged
    assert sol.p_loss <= bf.p_loss * 1.005
    # Brute force brackets the optimum within one grid cell.
    lo, hi = control_boxes(grid)
    cell = (hi - lo) / 1000.0
    u_opt = vector_from_controls(grid, sol.y_star)
    u_bf = vector_from_controls(grid, bf.y_star)
    assert np.all(np.abs(u_opt - u_bf) <= cell + 1e-12)


def test_oracle_beats_brute_force_two_dimensions():
    grid, x = _bf2()
    sol = solve_orpd(grid, x)
    bf = brute_force_orpd(grid, x, 61)
    assert sol.converged and bf.converged
    assert sol.p_loss <= bf.p_loss * 1.005


def test_oracle_beats_brute_force_three_dimensions():
    grid, x = _bf3()
    sol = solve_orpd(grid, x)
    bf = brute_force_orpd(grid, x, 50)
    assert sol.converged and bf.converged
    assert sol.p_loss <= bf.p_loss * 1.005


def test_brute_force_dimension_guard():
    grid = parse_grid(fixtures.small14_document())
    x = fixtures.small14_nominal(grid)
    with pytest.raises(ValueError):
        brute_force_orpd(grid, x, 10)


def test_brute_force_reports_infeasible_scan():
    # Voltage window so tight no setpoint satisfies the sink-bus constraint.
    doc = fixtures.bf2_document()
    doc["buses"][2]["v_min_pu"] = 1.2
    doc["buses"][2]["v_max_pu"] = 1.3
    grid = parse_grid(doc)
    bf = brute_force_orpd(grid, fixtures.bf2_inputs(grid), 15)
    assert not bf.converged
    assert bf.feasible_at is None
    assert np.isnan(bf.p_loss)


def test_determinism_under_fixed_seed():
    grid, x = _bf3()
    opts = OrpdOptions(restarts=2, seed=11)
    a = solve_orpd(grid, x, opts)
    b = solve_orpd(grid, x, opts)
    assert np.array_equal(a.y_star.values, b.y_star.values)
    assert a.p_loss == b.p_loss
    assert a.inner_pf_count == b.inner_pf_count
    assert a.kkt_stationarity == b.kkt_stationarity


def test_restarts_do_not_worsen_result():
    grid, x = _bf3()
    plain = solve_orpd(grid, x)
    restarted = solve_orpd(grid, x, OrpdOptions(restarts=3, seed=5))
    assert restarted.p_loss <= plain.p_loss * 1.0 + 1e-9


def test_failed_initial_power_flow_reports_non_convergence():
    grid = parse_grid(fixtures.bf2_document())
    x = fixtures.bf2_inputs(grid)
    x.values[2, 0] = 25.0  # far beyond the deliverable power of these lines
    sol = solve_orpd(grid, x)
    assert not sol.converged


def test_controls_round_trip():
    grid, _ = _bf3()
    lo, hi = control_boxes(grid)
    rng = np.random.default_rng(0)
    u = lo + rng.uniform(size=len(lo)) * (hi - lo)
    y = controls_from_vector(grid, u)
    np.testing.assert_array_equal(vector_from_controls(grid, y), u)

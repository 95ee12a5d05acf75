import copy

import numpy as np
import pytest

from orpdkit import fixtures
from orpdkit.grid import (
    GridSchemaError,
    GridSemanticError,
    grid_to_document,
    line_admittance_view,
    parse_grid,
    validate,
)


def test_minimal_two_bus_parses():
    grid = parse_grid(fixtures.two_bus_document())
    assert grid.n_buses == 2
    assert len(grid.lines) == 1
    assert grid.slack_bus == 0


def test_dangling_line_reference_names_the_line():
    doc = fixtures.two_bus_document()
    doc["lines"][0]["to"] = 99
    with pytest.raises(GridSemanticError) as err:
        parse_grid(doc)
    assert "lines[0]" in str(err.value)


def test_bundled_uruguay_shaped_fixture_counts():
    grid = parse_grid(fixtures.uruguay107_document())
    assert grid.n_buses == 107
    assert len(grid.lines) == 156
    assert len(grid.volt_gens) == 15
    assert len(grid.stat_gens) == 27
    assert len(grid.loads) == 55
    assert len(grid.compensators) == 6
    assert sum(1 for b in grid.buses if b.vn_kv == 150.0) == 95
    assert sum(1 for b in grid.buses if b.vn_kv == 500.0) == 12
    assert validate(grid).ok


def test_schema_error_reports_path():
    doc = fixtures.two_bus_document()
    del doc["buses"][1]["vn_kv"]
    with pytest.raises(GridSchemaError) as err:
        parse_grid(doc)
    assert "buses[1].vn_kv" in str(err.value)

    doc = fixtures.two_bus_document()
    doc["lines"][0]["tap_ratio"] = "one"
    with pytest.raises(GridSchemaError) as err:
        parse_grid(doc)
    assert "lines[0].tap_ratio" in str(err.value)


def test_validate_empty_report_on_valid_grid():
    grid = parse_grid(fixtures.small14_document())
    report = validate(grid)
    assert report.ok
    assert report.issues == []


def test_validate_flags_multiple_slack():
    doc = fixtures.bf2_document()
    doc["volt_gens"][1]["is_slack"] = True
    grid_doc = copy.deepcopy(doc)
    with pytest.raises(GridSemanticError) as err:
        parse_grid(grid_doc)
    assert "multiple slack" in str(err.value)


def test_validate_names_bus_with_inverted_voltage_bounds():
    doc = fixtures.small14_document()
    doc["buses"][3]["v_min_pu"] = 1.2
    doc["buses"][3]["v_max_pu"] = 0.9
    with pytest.raises(GridSemanticError) as err:
        parse_grid(doc)
    assert "bus 3" in str(err.value)


def test_validate_flags_disconnected_graph():
    doc = fixtures.small14_document()
    doc["lines"] = [ln for ln in doc["lines"] if not (ln["from"] == 12 or ln["to"] == 12)]
    doc["lines"].append(
        {
            "from": 12,
            "to": 12,
            "y_series": {"g": 1.0, "b": -5.0},
            "y_shunt_from": {"g": 0.0, "b": 0.0},
            "y_shunt_to": {"g": 0.0, "b": 0.0},
            "tap_ratio": 1.0,
            "s_max_pu": 1.0,
            "angle_diff_min_rad": -0.5,
            "angle_diff_max_rad": 0.5,
        }
    )
    grid_doc = copy.deepcopy(doc)
    with pytest.raises(GridSemanticError) as err:
        parse_grid(grid_doc)
    message = str(err.value)
    assert "disconnected" in message or "coincide" in message


def test_parse_serialize_roundtrip_identity():
    for name in ("small14", "uruguay107"):
        doc = fixtures.fixture_document(name)
        grid = parse_grid(doc)
        doc2 = grid_to_document(grid)
        grid2 = parse_grid(doc2)
        assert grid_to_document(grid2) == doc2
        assert grid.buses == grid2.buses
        assert grid.lines == grid2.lines
        assert grid.volt_gens == grid2.volt_gens
        assert grid.stat_gens == grid2.stat_gens
        assert grid.loads == grid2.loads
        assert grid.compensators == grid2.compensators


def test_per_unit_conversion_roundtrip():
    grid = parse_grid(fixtures.two_bus_document())
    rng = np.random.default_rng(0)
    for value in rng.uniform(-500, 500, size=20):
        back = grid.pu_to_mw(grid.mw_to_pu(value))
        assert abs(back - value) <= 1e-12 * max(1.0, abs(value))


class TestLineAdmittanceView:
    def test_identity_tap(self):
        doc = fixtures.two_bus_document(r=0.0, x=0.1)
        grid = parse_grid(doc)
        view = line_admittance_view(grid)[0]
        assert view.series_from == pytest.approx(complex(0.0, -10.0))
        assert view.series_to == view.series_from
        assert view.shunt_from == 0.0
        assert view.shunt_to == 0.0

    def test_tap_scales_all_coefficients_by_t_squared(self):
        doc = fixtures.two_bus_document(r=0.0, x=0.1, b_total=0.1)
        base = line_admittance_view(parse_grid(doc))[0]
        doc["lines"][0]["tap_ratio"] = 2.0
        tapped = line_admittance_view(parse_grid(doc))[0]
        assert tapped.series_from == base.series_from / 4.0
        assert tapped.series_to == base.series_to / 4.0
        assert tapped.shunt_from == base.shunt_from / 4.0
        assert tapped.shunt_to == base.shunt_to / 4.0

    def test_shunts_pass_through_at_unit_tap(self):
        doc = fixtures.two_bus_document(r=0.0, x=0.1, b_total=0.1)
        view = line_admittance_view(parse_grid(doc))[0]
        assert view.shunt_from == complex(0.0, 0.05)
        assert view.shunt_to == complex(0.0, 0.05)

    def test_symmetry_under_endpoint_swap_at_unit_tap(self):
        doc = fixtures.two_bus_document(r=0.01, x=0.1, b_total=0.08)
        view = line_admittance_view(parse_grid(doc))[0]
        doc["lines"][0]["from"], doc["lines"][0]["to"] = (
            doc["lines"][0]["to"],
            doc["lines"][0]["from"],
        )
        swapped = line_admittance_view(parse_grid(doc))[0]
        assert view.series_from == swapped.series_to
        assert view.shunt_from == swapped.shunt_to
        assert view.series_to == swapped.series_from
        assert view.shunt_to == swapped.shunt_from

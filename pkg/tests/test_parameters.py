import numpy as np
import pytest

from circov.clients.data_files import DataFileClient
from circov.core.config import PriorConfig
from circov.core.errors import StructuralError, ValidationFailed
from circov.models.common import ShareRule
from circov.services.hazards import ProcessModel
from circov.services.parameters import (
    ParameterLayout,
    ShareField,
    build_share_field,
    initial_parameters,
    load_share_rules,
)
from circov.services.survey import EventCountCube


def test_layout_offsets_and_round_trip():
    layout = ParameterLayout([("a", "intercept", ()), ("b", "effect", (2, 3)), ("c", "log_sigma", ())])
    assert layout.size == 8
    assert [b.offset for b in layout.blocks] == [0, 1, 7]
    x = layout.pack({"a": 1.5, "b": np.arange(6).reshape(2, 3)})
    values = layout.unpack(x)
    assert float(values["a"]) == 1.5
    np.testing.assert_array_equal(values["b"], np.arange(6).reshape(2, 3))
    assert layout.block_of(7) == "c"


def test_layout_rejects_bad_input():
    layout = ParameterLayout([("a", "intercept", ()), ("b", "effect", (2,))])
    with pytest.raises(StructuralError):
        layout.pack({"b": np.zeros(3)})
    with pytest.raises(StructuralError):
        layout.unpack(np.zeros(4))
    with pytest.raises(StructuralError):
        layout["zz"]
    with pytest.raises(StructuralError):
        ParameterLayout([("a", "intercept", ()), ("a", "effect", (2,))])


def test_layout_hash_tracks_shapes():
    a = ParameterLayout([("a", "intercept", ()), ("b", "effect", (2,))])
    b = ParameterLayout([("a", "intercept", ()), ("b", "effect", (2,))])
    c = ParameterLayout([("a", "intercept", ()), ("b", "effect", (3,))])
    assert a.hash == b.hash != c.hash


def test_model_layout_covers_every_block(model, grid, structure):
    layout = model.layout
    assert layout["adult_space_time"].shape == (grid.n_region, grid.n_time)
    assert layout["adult_age_time"].shape == (structure.n_basis, grid.n_time)
    assert "logit_share" not in layout
    assert sum(1 for b in layout.blocks if b.kind == "logit_rho") == 10


def test_default_shares_are_zero(grid):
    share = build_share_field([], grid)
    assert share.n_free == 0
    np.testing.assert_array_equal(np.asarray(share.values(np.zeros(0))), 0.0)


def test_later_share_rules_override(grid):
    rules = [
        ShareRule(regions="*", year_from=2010, year_to=2012, mode="fixed_value", value=0.3),
        ShareRule(regions=["B"], year_from=2011, year_to=2012, mode="logit_normal", mu=0.5, sigma=0.2),
        ShareRule(regions=["B"], year_from=2012, year_to=2012, mode="fixed_zero"),
    ]
    share = build_share_field(rules, grid)
    t11, t12 = grid.time_index(2011), grid.time_index(2012)
    assert share.n_free == 1
    assert share.free_cells.tolist() == [[1, t11]]
    values = np.asarray(share.values(np.array([0.0])))
    assert values[1, t11] == pytest.approx(0.5)
    assert values[1, t12] == 0.0
    assert values[0, t12] == pytest.approx(0.3)
    assert values[0, 0] == 0.0


def test_share_rule_with_unknown_region(grid):
    with pytest.raises(ValidationFailed):
        build_share_field([ShareRule(regions=["Z"], year_from=2010, year_to=2012, mode="fixed_zero")], grid)


def test_share_rules_from_file(tmp_path, grid):
    path = tmp_path / "shares.csv"
    path.write_text(
        "regions,year_from,year_to,mode,value,mu,sigma\n*,2010,2012,fixed_value,0.2,,\nA; C,2012,2012,logit_normal,,0.0,1.0\n"
    )
    rules = load_share_rules(path, DataFileClient(cache_enabled=False))
    assert rules[0].regions == "*"
    assert rules[1].regions == ["A", "C"]
    assert build_share_field(rules, grid).n_free == 2


def test_free_shares_add_a_block(structure, grid):
    share = build_share_field([ShareRule(year_from=2010, year_to=2010, mode="logit_normal", mu=0.0, sigma=1.0)], grid)
    model = ProcessModel.build(structure, share)
    assert model.layout["logit_share"].shape == (grid.n_region,)


def test_initial_parameters_start_at_crude_rates(model, grid):
    cube = EventCountCube.empty(grid)
    x = initial_parameters(model.layout, cube.counts, grid, PriorConfig(), ShareField.zeros(grid))
    values = model.layout.unpack(x)
    assert np.all(np.isfinite(x))
    assert float(values["tmic_intercept"]) == pytest.approx(np.log(1e-4 / (1 - 1e-4)))
    assert float(values["logit_rho_adult_time"]) == pytest.approx(3.0)
    np.testing.assert_array_equal(values["adult_space"], 0.0)

import numpy as np
import pytest

from circov.core.errors import DomainError, StructuralError, ValidationFailed
from circov.services.structure import (
    AdjacencyGraph,
    CohortIndex,
    Grid,
    build_ar1_precision,
    build_icar_precision,
    build_interaction_precision,
    build_spline_basis,
)


def _zero_eigenvalues(m: np.ndarray) -> int:
    eig = np.linalg.eigvalsh(m)
    return int(np.sum(np.abs(eig) < 1e-9 * max(1.0, np.abs(eig).max())))


def _cox_de_boor(x: float, knots: np.ndarray, j: int, k: int) -> float:
    if k == 0:
        return 1.0 if knots[j] <= x < knots[j + 1] else 0.0
    out = 0.0
    if knots[j + k] > knots[j]:
        out += (x - knots[j]) / (knots[j + k] - knots[j]) * _cox_de_boor(x, knots, j, k - 1)
    if knots[j + k + 1] > knots[j + 1]:
        out += (knots[j + k + 1] - x) / (knots[j + k + 1] - knots[j + 1]) * _cox_de_boor(x, knots, j + 1, k - 1)
    return out


def test_icar_path3_is_laplacian():
    graph = AdjacencyGraph.from_pairs(("a", "b", "c"), [("a", "b"), ("c", "b")])
    q = build_icar_precision(graph)
    expected = np.array([[1, -1, 0], [-1, 2, -1], [0, -1, 1]], dtype=float)
    np.testing.assert_array_equal(q.dense(), expected)
    assert q.rank_deficiency == 1
    assert q.log_pdet() == pytest.approx(np.log(3.0))


def test_icar_two_disconnected_pairs():
    graph = AdjacencyGraph.from_pairs(("a", "b", "c", "d"), [("a", "b"), ("c", "d")])
    q = build_icar_precision(graph)
    assert q.rank_deficiency == 2
    assert _zero_eigenvalues(q.dense()) == 2
    np.testing.assert_allclose(q.dense() @ q.constraints.T, 0.0)


def test_icar_isolated_node_gets_unit_precision():
    graph = AdjacencyGraph.from_pairs(("a", "b", "c"), [("a", "b")])
    assert graph.isolated == (2,)
    q = build_icar_precision(graph)
    assert q.dense()[2, 2] == 1.0
    assert q.rank_deficiency == 1
    assert _zero_eigenvalues(q.dense()) == 1


def test_adjacency_rejects_self_loops_and_unknown_regions():
    with pytest.raises(ValidationFailed) as err:
        AdjacencyGraph.from_pairs(("a", "b"), [("a", "a"), ("a", "z")])
    assert [r["row"] for r in err.value.details["rows"]] == [1, 2]


def test_icar_symmetric_and_quad_nonnegative():
    rng = np.random.default_rng(3)
    regions = tuple(f"r{i}" for i in range(6))
    pairs = [(regions[i], regions[j]) for i in range(6) for j in range(i + 1, 6) if rng.random() < 0.5]
    q = build_icar_precision(AdjacencyGraph.from_pairs(regions, pairs))
    np.testing.assert_allclose(q.dense(), q.dense().T, rtol=1e-12)
    assert q.rank_deficiency == _zero_eigenvalues(q.dense())
    for _ in range(20):
        assert q.quad(rng.standard_normal(6)) >= -1e-12


@pytest.mark.parametrize("n", [1, 2, 3, 6])
@pytest.mark.parametrize("rho", [-0.7, 0.0, 0.5, 0.95])
def test_ar1_precision_inverts_correlation(n, rho):
    q = build_ar1_precision(n, rho).dense()
    lags = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    np.testing.assert_allclose(q @ rho**lags, np.eye(n), atol=1e-10)


def test_ar1_rho_zero_is_identity():
    np.testing.assert_allclose(build_ar1_precision(4, 0.0).dense(), np.eye(4))


def test_ar1_rejects_unit_correlation():
    with pytest.raises(DomainError):
        build_ar1_precision(3, 1.0)


def test_spline_degree_one_is_identity():
    basis = build_spline_basis(np.arange(11), knot_spacing=1, degree=1)
    np.testing.assert_allclose(basis.design, np.eye(11), atol=1e-12)


def test_spline_partition_of_unity():
    basis = build_spline_basis(np.arange(61), knot_spacing=5, degree=3)
    np.testing.assert_allclose(basis.design.sum(axis=1), 1.0, atol=1e-12)


def test_spline_basis_count_matches_recursion():
    ages = np.arange(61)
    basis = build_spline_basis(ages, knot_spacing=5, degree=3)
    knots = 5.0 * np.arange(-3, 16)
    n_funcs = len(knots) - 3 - 1
    design = np.array([[_cox_de_boor(float(a), knots, j, 3) for j in range(n_funcs)] for a in ages])
    used = [j for j in range(n_funcs) if np.any(design[:, j] > 0)]
    assert basis.n_basis == len(used) == 15
    np.testing.assert_allclose(basis.design, design[:, used], atol=1e-12)


def test_spline_rejects_short_range():
    with pytest.raises(StructuralError):
        build_spline_basis(np.arange(4), knot_spacing=5, degree=3)


def test_interaction_matches_dense_kronecker():
    icar = build_icar_precision(AdjacencyGraph.from_pairs(("a", "b", "c"), [("a", "b"), ("b", "c")]))
    ar1 = build_ar1_precision(2, 0.0)
    q = build_interaction_precision("space_time", [icar, ar1])
    np.testing.assert_allclose(q.dense(), np.kron(icar.dense(), ar1.dense()))
    assert q.rank_deficiency == 2 == _zero_eigenvalues(q.dense())


def test_interaction_of_two_deficient_operands():
    icar = build_icar_precision(AdjacencyGraph.from_pairs(("a", "b", "c"), [("a", "b"), ("b", "c")]))
    q = build_interaction_precision("age_space", [icar, icar])
    assert q.rank_deficiency == 5 == _zero_eigenvalues(q.dense())
    assert q.constraints.shape == (5, 9)
    np.testing.assert_allclose(q.dense() @ q.constraints.T, 0.0, atol=1e-12)


def test_interaction_with_spline_operand_is_projected():
    basis = build_spline_basis(np.arange(6), knot_spacing=1, degree=1)
    ar1 = build_ar1_precision(basis.n_basis, 0.4)
    time = build_ar1_precision(3, 0.2)
    q = build_interaction_precision("age_time", [(basis, ar1), time], dims=(6, 3))
    projected = basis.design @ ar1.dense() @ basis.design.T
    np.testing.assert_allclose(q.dense(), np.kron(projected, time.dense()), atol=1e-12)


def test_interaction_rejects_dimension_mismatch():
    with pytest.raises(StructuralError):
        build_interaction_precision("age_time", [build_ar1_precision(3, 0.1), build_ar1_precision(2, 0.1)], dims=(3, 3))


def test_grid_extends_history():
    g = Grid(regions=("a",), age_max=30, year_min=2005, year_max=2015)
    assert g.history_start == 1975
    assert g.n_time == 41
    assert g.internal_years[g.window][0] == 2005
    assert g.time_index(2010) == 35
    with pytest.raises(StructuralError):
        g.time_index(2016)


def test_grid_rejects_duplicates():
    with pytest.raises(StructuralError):
        Grid(regions=("a", "a"), age_max=30, year_min=2005, year_max=2015)


def test_cohort_index_round_trip():
    index = CohortIndex.for_shape(4, 6)
    for a in range(4):
        for t in range(6):
            c = index.cohort_of[a, t]
            assert index.valid[a, c]
            assert index.time_of[a, c] == t

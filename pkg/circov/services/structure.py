"""Estimation grid, adjacency graph, spline bases and structured precision matrices."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Literal, Sequence, Union

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from cachetools import LRUCache, cached
from scipy.interpolate import BSpline
from scipy.sparse.csgraph import connected_components

from circov.core.errors import DomainError, NumericalError, StructuralError, ValidationFailed
from circov.models.common import TERMINAL_AGE

log = logging.getLogger("circov.structure")

_LOGDET_CACHE: LRUCache = LRUCache(maxsize=256)
_NULL_EIG_TOL = 1e-9


@dataclass(frozen=True)
class Grid:
    regions: tuple[str, ...]
    age_max: int
    year_min: int
    year_max: int
    paediatric_cutoff: int = 10
    terminal_age: int = TERMINAL_AGE
    parents: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if len(self.regions) < 1:
            raise StructuralError("Grid needs at least one region")
        if len(set(self.regions)) != len(self.regions):
            dupes = sorted({r for r in self.regions if self.regions.count(r) > 1})
            raise StructuralError("Duplicate region identifiers in grid", {"regions": dupes})
        if self.age_max < self.paediatric_cutoff:
            raise StructuralError(
                "age_max below paediatric cutoff",
                {"age_max": self.age_max, "paediatric_cutoff": self.paediatric_cutoff},
            )
        if self.year_max < self.year_min:
            raise StructuralError("year_max before year_min", {"year_min": self.year_min, "year_max": self.year_max})
        if self.parents is not None and len(self.parents) != len(self.regions):
            raise StructuralError("parents must align with regions")

    @property
    def n_region(self) -> int:
        return len(self.regions)

    @property
    def n_age(self) -> int:
        return self.age_max + 1

    @property
    def ages(self) -> np.ndarray:
        return np.arange(self.n_age)

    @property
    def years(self) -> np.ndarray:
        """Reported years [t_min, t_max]."""
        return np.arange(self.year_min, self.year_max + 1)

    @property
    def history_start(self) -> int:
        # earliest birth year whose whole history fits on the internal grid
        return self.year_min - self.age_max

    @property
    def internal_years(self) -> np.ndarray:
        return np.arange(self.history_start, self.year_max + 1)

    @property
    def n_time(self) -> int:
        return self.year_max - self.history_start + 1

    @property
    def window(self) -> slice:
        """Internal time slice covering the reported years."""
        return slice(self.age_max, self.n_time)

    @cached_property
    def region_index(self) -> dict[str, int]:
        return {r: i for i, r in enumerate(self.regions)}

    def time_index(self, year: int) -> int:
        if not self.history_start <= year <= self.year_max:
            raise StructuralError(
                "Year outside the internal time grid",
                {"year": year, "first": self.history_start, "last": self.year_max},
            )
        return year - self.history_start

    def parent_groups(self) -> dict[str, list[str]]:
        if self.parents is None:
            return {}
        groups: dict[str, list[str]] = {}
        for region, parent in zip(self.regions, self.parents):
            if parent:
                groups.setdefault(parent, []).append(region)
        return groups


@dataclass(frozen=True)
class AdjacencyGraph:
    n: int
    edges: frozenset[tuple[int, int]]

    def __post_init__(self) -> None:
        if self.n < 1:
            raise StructuralError("Adjacency graph has no nodes")
        for i, j in self.edges:
            if i == j:
                raise StructuralError("Self-loop in adjacency graph", {"node": i})
            if not (0 <= i < j < self.n):
                raise StructuralError("Edge outside node range or not normalized", {"edge": [i, j]})

    @classmethod
    def from_pairs(cls, regions: Sequence[str], pairs: Iterable[tuple[str, str]]) -> AdjacencyGraph:
        index = {r: i for i, r in enumerate(regions)}
        edges: set[tuple[int, int]] = set()
        problems: list[dict] = []
        for row, (a, b) in enumerate(pairs, start=1):
            if a not in index or b not in index:
                problems.append({"row": row, "message": f"unknown region in edge {a}-{b}"})
                continue
            if a == b:
                problems.append({"row": row, "message": f"self-loop on {a}"})
                continue
            i, j = sorted((index[a], index[b]))
            edges.add((i, j))
        if problems:
            raise ValidationFailed("Invalid adjacency edges", {"rows": problems})
        graph = cls(n=len(regions), edges=frozenset(edges))
        if graph.isolated:
            log.warning("isolated_regions", extra={"regions": [regions[i] for i in graph.isolated]})
        return graph

    def adjacency(self) -> sp.csr_matrix:
        if not self.edges:
            return sp.csr_matrix((self.n, self.n), dtype=np.int64)
        ij = np.array(sorted(self.edges), dtype=np.int64)
        rows = np.concatenate([ij[:, 0], ij[:, 1]])
        cols = np.concatenate([ij[:, 1], ij[:, 0]])
        data = np.ones(rows.size, dtype=np.int64)
        return sp.csr_matrix((data, (rows, cols)), shape=(self.n, self.n))

    @property
    def neighbor_counts(self) -> np.ndarray:
        return np.asarray(self.adjacency().sum(axis=1)).ravel()

    @property
    def isolated(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.neighbor_counts == 0))

    def components(self) -> np.ndarray:
        _, labels = connected_components(self.adjacency(), directed=False)
        return labels


@dataclass(frozen=True, eq=False)
class PrecisionSpec:
    matrix: sp.csr_matrix
    rank_deficiency: int
    constraints: np.ndarray | None = None  # rows span the null space
    label: str = ""

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def quad(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ (self.matrix @ x))

    def log_pdet(self) -> float:
        """Generalized log-determinant: sum of logs of the nonzero eigenvalues."""
        return _log_pdet(self.matrix, self.rank_deficiency)

    def constrained(self, scale: float) -> sp.csr_matrix:
        """Q plus the soft sum-to-zero penalty, one term per null-space row."""
        if self.constraints is None or self.rank_deficiency == 0:
            return self.matrix.tocsr()
        extra = np.zeros((self.n, self.n))
        for row in self.constraints:
            sd = scale * max(np.count_nonzero(np.abs(row) > 0), 1)
            extra += np.outer(row, row) / sd**2
        return (self.matrix + sp.csr_matrix(extra)).tocsr()

    def log_det_constrained(self, scale: float) -> float:
        sign, logdet = np.linalg.slogdet(self.constrained(scale).toarray())
        if sign <= 0:
            raise NumericalError("Constrained precision is not positive definite", {"label": self.label})
        return float(logdet)


def _matrix_key(m: sp.spmatrix, deficiency: int) -> tuple[str, int]:
    csr = sp.csr_matrix(m, dtype=float, copy=True)
    csr.sort_indices()
    digest = hashlib.sha256()
    digest.update(np.asarray(csr.shape, dtype=np.int64).tobytes())
    digest.update(csr.indptr.astype(np.int64).tobytes())
    digest.update(csr.indices.astype(np.int64).tobytes())
    digest.update(csr.data.tobytes())
    return digest.hexdigest(), deficiency


@cached(_LOGDET_CACHE, key=_matrix_key)
def _log_pdet(m: sp.spmatrix, deficiency: int) -> float:
    eig = np.linalg.eigvalsh(m.toarray())
    scale = max(float(np.abs(eig).max()), 1.0)
    null, rest = eig[:deficiency], eig[deficiency:]
    if np.any(np.abs(null) > _NULL_EIG_TOL * scale) or np.any(rest <= _NULL_EIG_TOL * scale):
        raise NumericalError(
            "Eigenvalues inconsistent with declared rank deficiency",
            {"deficiency": deficiency, "smallest": eig[: deficiency + 1].tolist()},
        )
    return float(np.sum(np.log(rest)))


@dataclass(frozen=True, eq=False)
class SplineBasis:
    design: np.ndarray  # (n_age, n_basis)
    knots: np.ndarray
    degree: int
    knot_spacing: int

    @property
    def n_basis(self) -> int:
        return self.design.shape[1]


def build_icar_precision(graph: AdjacencyGraph) -> PrecisionSpec:
    """Graph Laplacian D - A; isolated nodes get an independent unit-precision entry."""
    adjacency = graph.adjacency()
    degree = graph.neighbor_counts
    diag = np.where(degree == 0, 1, degree).astype(np.int64)
    q_int = (sp.diags(diag, format="csr", dtype=np.int64) - adjacency).tocsr()

    labels = graph.components()
    rows = []
    for comp in np.unique(labels):
        members = labels == comp
        if members.sum() >= 2:
            rows.append(members.astype(float))
    constraints = np.vstack(rows) if rows else None
    return PrecisionSpec(
        matrix=q_int.astype(float),
        rank_deficiency=len(rows),
        constraints=constraints,
        label="icar",
    )


def build_ar1_precision(n: int, rho: float) -> PrecisionSpec:
    """Stationary AR1 precision with unit marginal variance."""
    if n < 1:
        raise StructuralError("AR1 length must be at least 1", {"n": n})
    if not -1.0 < rho < 1.0:
        raise DomainError("AR1 correlation must lie in (-1, 1)", {"rho": rho})
    if n == 1:
        return PrecisionSpec(matrix=sp.csr_matrix(np.ones((1, 1))), rank_deficiency=0, label="ar1")
    main = np.full(n, 1.0 + rho * rho)
    main[0] = main[-1] = 1.0
    off = np.full(n - 1, -rho)
    q = sp.diags([off, main, off], [-1, 0, 1], format="csr") / (1.0 - rho * rho)
    return PrecisionSpec(matrix=q.tocsr(), rank_deficiency=0, label="ar1")


def build_spline_basis(ages: Sequence[int] | np.ndarray, knot_spacing: int, degree: int) -> SplineBasis:
    """B-spline design with equally spaced knots every `knot_spacing` years, padded by `degree`."""
    if knot_spacing < 1 or degree < 1:
        raise StructuralError("knot_spacing and degree must be at least 1", {"knot_spacing": knot_spacing, "degree": degree})
    x = np.asarray(ages, dtype=float)
    lo, hi = float(x.min()), float(x.max())
    if hi - lo < knot_spacing:
        raise StructuralError("Age range shorter than one knot interval", {"range": hi - lo, "knot_spacing": knot_spacing})
    n_intervals = math.ceil((hi - lo) / knot_spacing)
    knots = lo + knot_spacing * np.arange(-degree, n_intervals + degree + 1, dtype=float)
    design = BSpline.design_matrix(x, knots, degree).toarray()
    return SplineBasis(design=design, knots=knots, degree=degree, knot_spacing=knot_spacing)


InteractionKind = Literal["age_space", "age_time", "space_time"]
Operand = Union[PrecisionSpec, tuple[SplineBasis, PrecisionSpec]]


def _operand(op: Operand) -> tuple[sp.csr_matrix, int, np.ndarray | None]:
    if isinstance(op, tuple):
        basis, q = op
        if q.n != basis.n_basis:
            raise StructuralError(
                "Spline precision does not match basis size", {"precision": q.n, "basis": basis.n_basis}
            )
        projected = basis.design @ q.dense() @ basis.design.T
        projected = 0.5 * (projected + projected.T)
        deficiency = projected.shape[0] - int(np.linalg.matrix_rank(projected))
        null = scipy.linalg.null_space(projected).T if deficiency else None
        return sp.csr_matrix(projected), deficiency, null
    if op.rank_deficiency and op.constraints is None:
        raise StructuralError("Rank-deficient operand without null-space description", {"label": op.label})
    return op.matrix.tocsr(), op.rank_deficiency, op.constraints


def build_interaction_precision(
    kind: InteractionKind,
    parts: Sequence[Operand],
    dims: tuple[int, int] | None = None,
) -> PrecisionSpec:
    """Type IV interaction precision: Kronecker product of the two marginal structures."""
    if kind not in ("age_space", "age_time", "space_time"):
        raise StructuralError("Unknown interaction kind", {"kind": kind})
    if len(parts) != 2:
        raise StructuralError("Interaction needs exactly two operands", {"kind": kind, "given": len(parts)})
    a, da, ca = _operand(parts[0])
    b, db, cb = _operand(parts[1])
    na, nb = a.shape[0], b.shape[0]
    if dims is not None and (na, nb) != tuple(dims):
        raise StructuralError("Interaction operand dimensions mismatch", {"kind": kind, "expected": list(dims), "got": [na, nb]})

    matrix = sp.kron(a, b, format="csr")
    deficiency = da * nb + na * db - da * db
    rows = []
    if da:
        rows.append(np.kron(ca, np.eye(nb)))
    if db:
        rows.append(np.kron(np.eye(na), cb))
    constraints = None
    if rows:
        constraints = np.vstack(rows)
        if da and db:
            constraints = scipy.linalg.orth(constraints.T).T
    return PrecisionSpec(matrix=matrix, rank_deficiency=deficiency, constraints=constraints, label=kind)


@dataclass(frozen=True, eq=False)
class CohortIndex:
    """Gather indices between (age, time) cells and (age, cohort) Lexis diagonals."""

    age_of: np.ndarray  # (A, C)
    time_of: np.ndarray  # (A, C), clipped into range
    valid: np.ndarray  # (A, C)
    cohort_of: np.ndarray  # (A, T)

    @classmethod
    def for_shape(cls, n_age: int, n_time: int) -> CohortIndex:
        n_cohort = n_time + n_age - 1
        a = np.arange(n_age)[:, None]
        c = np.arange(n_cohort)[None, :]
        t = c - (n_age - 1) + a
        valid = (t >= 0) & (t < n_time)
        cohort_of = np.arange(n_time)[None, :] - np.arange(n_age)[:, None] + (n_age - 1)
        return cls(
            age_of=np.broadcast_to(a, (n_age, n_cohort)).copy(),
            time_of=np.clip(t, 0, n_time - 1),
            valid=valid,
            cohort_of=cohort_of,
        )


@dataclass(frozen=True, eq=False)
class ModelStructure:
    grid: Grid
    graph: AdjacencyGraph
    icar: PrecisionSpec
    basis: SplineBasis
    cohorts: CohortIndex

    @property
    def n_basis(self) -> int:
        return self.basis.n_basis

    @cached_property
    def icar_dense(self) -> np.ndarray:
        return self.icar.dense()


def build_model_structure(grid: Grid, graph: AdjacencyGraph, knot_spacing: int = 5, degree: int = 3) -> ModelStructure:
    if graph.n != grid.n_region:
        raise StructuralError("Graph size does not match grid regions", {"graph": graph.n, "regions": grid.n_region})
    basis = build_spline_basis(grid.ages, knot_spacing, degree)
    structure = ModelStructure(
        grid=grid,
        graph=graph,
        icar=build_icar_precision(graph),
        basis=basis,
        cohorts=CohortIndex.for_shape(grid.n_age, grid.n_time),
    )
    log.info(
        "structure_built",
        extra={
            "regions": grid.n_region,
            "ages": grid.n_age,
            "times": grid.n_time,
            "spline_basis": basis.n_basis,
            "icar_deficiency": structure.icar.rank_deficiency,
        },
    )
    return structure

from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdme.spatial import (
    BoundingBox,
    SiteCoordinates,
    SpatialError,
    SpatialGraph,
    build_voronoi_adjacency,
    cell_polygons,
    cells_geojson,
    component_labels,
    connected_components,
    regular_grid,
)

shapely = pytest.importorskip("shapely")
from shapely.geometry import MultiPoint, box as shp_box  # noqa: E402
from shapely.ops import voronoi_diagram  # noqa: E402


def _shapely_adjacency(xy: np.ndarray, bbox: BoundingBox, tol: float) -> set[tuple[int, int]]:
    """Reference adjacency from shapely's Voronoi cells clipped to the box."""
    frame = shp_box(bbox.xmin, bbox.ymin, bbox.xmax, bbox.ymax)
    cells = voronoi_diagram(MultiPoint([tuple(p) for p in xy]), envelope=frame.buffer(10))
    by_site = {}
    for poly in cells.geoms:
        for i, p in enumerate(xy):
            if poly.contains(shapely.geometry.Point(p)):
                by_site[i] = poly.intersection(frame)
    out = set()
    for a in range(len(xy)):
        for b in range(a + 1, len(xy)):
            if by_site[a].intersection(by_site[b]).length > tol:
                out.add((a, b))
    return out


def _area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


class TestGrid:
    def test_default_grid_has_rook_adjacency(self):
        g = build_voronoi_adjacency(regular_grid(15))
        assert g.n_sites == 225
        assert g.n_edges == 2 * 15 * 14  # 420
        counts = g.neighbor_counts
        assert counts.min() == 2 and counts.max() == 4

    def test_corner_cell_neighbours(self):
        g = build_voronoi_adjacency(regular_grid(3))
        assert sorted(g.neighbors(0).tolist()) == [1, 3]
        assert sorted(g.neighbors(4).tolist()) == [1, 3, 5, 7]

    def test_diagonal_contact_is_not_adjacency(self):
        g = build_voronoi_adjacency(regular_grid(2))
        assert (0, 3) not in g.edge_set() and (1, 2) not in g.edge_set()


class TestRandomSites:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(4, 30))
    def test_matches_shapely_reference(self, seed, n):
        rng = np.random.default_rng(seed)
        xy = rng.uniform(0, 1, size=(n, 2))
        coords = SiteCoordinates(np.arange(n), xy[:, 0], xy[:, 1])
        bbox = BoundingBox(-0.05, -0.05, 1.05, 1.05)
        g = build_voronoi_adjacency(coords, bbox)
        tol = 1e-9 * bbox.diagonal
        assert g.edge_set() == _shapely_adjacency(xy, bbox, tol)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 25))
    def test_graph_is_simple_and_symmetric(self, seed, n):
        rng = np.random.default_rng(seed)
        xy = rng.uniform(0, 1, size=(n, 2))
        g = build_voronoi_adjacency(SiteCoordinates(np.arange(n), xy[:, 0], xy[:, 1]))
        A = g.adjacency_matrix()
        assert np.array_equal(A, A.T)
        assert not np.any(np.diag(A))
        # a clipped Voronoi tessellation of a convex box is connected
        assert len(connected_components(g)) == 1

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 20))
    def test_cells_tile_the_box(self, seed, n):
        rng = np.random.default_rng(seed)
        xy = rng.uniform(0, 1, size=(n, 2))
        bbox = BoundingBox(-0.1, -0.2, 1.1, 1.3)
        polys = cell_polygons(SiteCoordinates(np.arange(n), xy[:, 0], xy[:, 1]), bbox)
        assert sum(_area(p) for p in polys) == pytest.approx(1.2 * 1.5, rel=1e-9)

    def test_collinear_sites(self):
        coords = SiteCoordinates(np.arange(4), [0, 1, 2, 3], [0, 0, 0, 0])
        g = build_voronoi_adjacency(coords, BoundingBox(-1, -1, 4, 1))
        assert g.edge_set() == {(0, 1), (1, 2), (2, 3)}

    def test_site_ids_are_kept(self):
        coords = SiteCoordinates([10, 20, 30], [0, 1, 2], [0, 0.1, 0])
        g = build_voronoi_adjacency(coords)
        assert g.site_id.tolist() == [10, 20, 30]


class TestErrors:
    def test_duplicate_coordinates_named(self):
        coords = SiteCoordinates([5, 6, 7], [0, 0, 1], [0, 0, 1])
        with pytest.raises(SpatialError, match=r"sites \[5, 6\]"):
            build_voronoi_adjacency(coords)

    def test_site_outside_box(self):
        coords = SiteCoordinates([1, 2], [0, 5], [0, 0])
        with pytest.raises(SpatialError, match="outside"):
            build_voronoi_adjacency(coords, BoundingBox(-1, -1, 1, 1))

    def test_single_site(self):
        with pytest.raises(SpatialError):
            SiteCoordinates([1], [0], [0])

    def test_bad_edges(self):
        with pytest.raises(SpatialError):
            SpatialGraph(3, np.array([[0, 3]]))
        with pytest.raises(SpatialError):
            SpatialGraph(3, np.array([[1, 1]]))


class TestComponents:
    def test_isolated_islands(self):
        g = SpatialGraph(6, np.array([[0, 1], [1, 2], [3, 4]]), np.array([10, 11, 12, 13, 14, 15]))
        assert connected_components(g) == [{10, 11, 12}, {13, 14}, {15}]
        assert component_labels(g).tolist() == [0, 0, 0, 1, 1, 2]

    def test_subgraph_and_edge_rows_round_trip(self):
        g = build_voronoi_adjacency(regular_grid(4))
        rows = g.to_edge_rows()
        h = SpatialGraph.from_edge_rows(g.site_id, rows)
        assert h.edge_set() == g.edge_set()
        sub = g.subgraph([0, 1, 4, 5])
        assert sub.n_sites == 4 and sub.n_edges == 4


def test_geojson_is_valid_feature_collection():
    coords = regular_grid(3)
    doc = json.loads(cells_geojson(coords))
    assert doc["type"] == "FeatureCollection"
    assert len(doc["features"]) == 9
    ring = doc["features"][0]["geometry"]["coordinates"][0]
    assert ring[0] == ring[-1]

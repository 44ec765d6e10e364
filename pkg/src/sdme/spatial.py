"""Voronoi adjacency for areal units built around image locations.

Cells are clipped to a rectangle so that every cell is finite. Two sites are
neighbours when their clipped cells share a boundary segment of positive
length; cells that only touch at a corner are not neighbours.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as _cc
from scipy.spatial import Delaunay, QhullError

__all__ = [
    "BoundingBox",
    "SiteCoordinates",
    "SpatialGraph",
    "build_voronoi_adjacency",
    "cell_polygons",
    "connected_components",
    "default_bounding_box",
    "regular_grid",
]

# shared boundary shorter than this fraction of the box diagonal is a corner
LENGTH_TOL = 1e-9


class SpatialError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise SpatialError(f"degenerate bounding box {self}")

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.xmax - self.xmin, self.ymax - self.ymin))

    def contains(self, xy: np.ndarray) -> np.ndarray:
        return (
            (xy[:, 0] >= self.xmin)
            & (xy[:, 0] <= self.xmax)
            & (xy[:, 1] >= self.ymin)
            & (xy[:, 1] <= self.ymax)
        )


@dataclass(frozen=True)
class SiteCoordinates:
    """Planar site locations. ``crs`` is carried as metadata only."""

    site_id: np.ndarray
    lon: np.ndarray
    lat: np.ndarray
    crs: str = "planar"

    def __post_init__(self):
        sid = np.asarray(self.site_id, dtype=np.int64)
        lon = np.asarray(self.lon, dtype=float)
        lat = np.asarray(self.lat, dtype=float)
        object.__setattr__(self, "site_id", sid)
        object.__setattr__(self, "lon", lon)
        object.__setattr__(self, "lat", lat)
        if not (sid.shape == lon.shape == lat.shape) or sid.ndim != 1:
            raise SpatialError("site_id, lon and lat must be 1-d and the same length")
        if len(sid) < 2:
            raise SpatialError("at least 2 sites are required")
        if len(np.unique(sid)) != len(sid):
            raise SpatialError("site_ids must be unique")
        if not (np.all(np.isfinite(lon)) and np.all(np.isfinite(lat))):
            raise SpatialError("coordinates must be finite")

    def __len__(self) -> int:
        return len(self.site_id)

    @property
    def xy(self) -> np.ndarray:
        return np.column_stack([self.lon, self.lat])


@dataclass(frozen=True)
class SpatialGraph:
    """Undirected adjacency over sites indexed ``0..n_sites-1``.

    ``edges`` holds pairs ``(l, t)`` with ``l < t``; ``site_id`` maps the dense
    index back to the original identifiers.
    """

    n_sites: int
    edges: np.ndarray
    site_id: np.ndarray = field(default=None)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(e):
            e = np.sort(e, axis=1)
            if np.any(e[:, 0] == e[:, 1]):
                raise SpatialError("self-loops are not allowed")
            if e.min() < 0 or e.max() >= self.n_sites:
                raise SpatialError("edge endpoint out of range")
            e = e[np.lexsort((e[:, 1], e[:, 0]))]
            if np.any(np.all(np.diff(e, axis=0) == 0, axis=1)):
                raise SpatialError("duplicate edges")
        object.__setattr__(self, "edges", e)
        sid = self.site_id
        if sid is None:
            sid = np.arange(self.n_sites)
        object.__setattr__(self, "site_id", np.asarray(sid, dtype=np.int64))

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def neighbor_counts(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n_sites)

    def adjacency_matrix(self) -> np.ndarray:
        w = np.zeros((self.n_sites, self.n_sites))
        w[self.edges[:, 0], self.edges[:, 1]] = 1.0
        w[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return w

    def neighbors(self, l: int) -> np.ndarray:
        e = self.edges
        return np.sort(np.concatenate([e[e[:, 0] == l, 1], e[e[:, 1] == l, 0]]))

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(a), int(b)) for a, b in self.edges}

    def subgraph(self, keep: Sequence[int]) -> "SpatialGraph":
        """Induced subgraph on the given dense indices (renumbered in order)."""
        keep = np.asarray(keep, dtype=np.int64)
        remap = -np.ones(self.n_sites, dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        e = remap[self.edges]
        e = e[(e >= 0).all(axis=1)]
        return SpatialGraph(len(keep), e, self.site_id[keep], dict(self.meta))

    def to_edge_rows(self) -> list[tuple[int, int]]:
        """Edge list in original site ids with ``l < t``."""
        rows = []
        for a, b in self.edges:
            l, t = int(self.site_id[a]), int(self.site_id[b])
            rows.append((min(l, t), max(l, t)))
        return sorted(rows)

    @classmethod
    def from_edge_rows(cls, site_ids: Sequence[int], rows: Iterable[tuple[int, int]]) -> "SpatialGraph":
        site_ids = np.asarray(site_ids, dtype=np.int64)
        index = {int(s): i for i, s in enumerate(site_ids)}
        edges = []
        for l, t in rows:
            try:
                edges.append((index[int(l)], index[int(t)]))
            except KeyError as exc:
                raise SpatialError(f"edge ({l}, {t}) refers to unknown site {exc.args[0]}") from None
        return cls(len(site_ids), np.array(edges, dtype=np.int64).reshape(-1, 2), site_ids)


def default_bounding_box(xy: np.ndarray, pad: float = 0.05) -> BoundingBox:
    lo = xy.min(axis=0)
    hi = xy.max(axis=0)
    span = hi - lo
    # collinear inputs still need a box with area
    span = np.where(span > 0, span, max(span.max(), 1.0))
    return BoundingBox(*(lo - pad * span), *(hi + pad * span))


def regular_grid(k: int, box: BoundingBox | None = None) -> SiteCoordinates:
    """Cell centres of a ``k x k`` grid, row-major from the lower-left corner."""
    box = box or BoundingBox(0.0, 0.0, 1.0, 1.0)
    xs = box.xmin + (np.arange(k) + 0.5) * (box.xmax - box.xmin) / k
    ys = box.ymin + (np.arange(k) + 0.5) * (box.ymax - box.ymin) / k
    gx, gy = np.meshgrid(xs, ys)
    return SiteCoordinates(np.arange(k * k), gx.ravel(), gy.ravel())


def _check_duplicates(coords: SiteCoordinates) -> None:
    xy = coords.xy
    order = np.lexsort((xy[:, 1], xy[:, 0]))
    s = xy[order]
    dup = np.all(np.diff(s, axis=0) == 0, axis=1)
    if np.any(dup):
        groups: dict[tuple[float, float], list[int]] = {}
        for i in np.flatnonzero(dup):
            key = tuple(s[i])
            groups.setdefault(key, []).extend(
                [int(coords.site_id[order[i]]), int(coords.site_id[order[i + 1]])]
            )
        msg = "; ".join(
            f"sites {sorted(set(ids))} share coordinates {key}" for key, ids in groups.items()
        )
        raise SpatialError(f"duplicate coordinates: {msg}")


def _candidate_pairs(xy: np.ndarray) -> np.ndarray:
    n = len(xy)
    if n >= 4:
        try:
            tri = Delaunay(xy)
        except QhullError:
            tri = None
        if tri is not None:
            s = tri.simplices
            pairs = np.concatenate([s[:, [0, 1]], s[:, [1, 2]], s[:, [0, 2]]])
            pairs = np.sort(pairs, axis=1)
            return np.unique(pairs, axis=0)
    return np.array(list(combinations(range(n), 2)), dtype=np.int64).reshape(-1, 2)


def _shared_boundary_length(xy: np.ndarray, l: int, t: int, box: BoundingBox) -> float:
    """Length of the part of the l/t bisector that lies in both clipped cells.

    Points on the bisector are equidistant from l and t, so the shared boundary
    is the set of bisector points at least as close to l as to every other
    site, intersected with the box. Each condition is linear along the line.
    """
    pl, pt = xy[l], xy[t]
    mid = 0.5 * (pl + pt)
    d = pt - pl
    direction = np.array([-d[1], d[0]])
    direction /= np.linalg.norm(direction)
    lo, hi = -np.inf, np.inf

    # |p - l|^2 <= |p - s|^2  <=>  2 p.(s - l) <= |s|^2 - |l|^2
    others = np.delete(np.arange(len(xy)), [l, t])
    if len(others):
        s = xy[others]
        diff = s - pl
        a = 2.0 * diff @ direction
        c = (s * s).sum(axis=1) - pl @ pl - 2.0 * diff @ mid
        pos = a > 0
        neg = a < 0
        if np.any(pos):
            hi = min(hi, np.min(c[pos] / a[pos]))
        if np.any(neg):
            lo = max(lo, np.max(c[neg] / a[neg]))
        if np.any(~pos & ~neg & (c < 0)):
            return 0.0

    for k, (bmin, bmax) in enumerate(((box.xmin, box.xmax), (box.ymin, box.ymax))):
        dk = direction[k]
        if abs(dk) < 1e-15:
            if not (bmin <= mid[k] <= bmax):
                return 0.0
            continue
        r1 = (bmin - mid[k]) / dk
        r2 = (bmax - mid[k]) / dk
        lo = max(lo, min(r1, r2))
        hi = min(hi, max(r1, r2))
    return max(0.0, hi - lo)


def build_voronoi_adjacency(
    coords: SiteCoordinates, bounding_box: BoundingBox | None = None
) -> SpatialGraph:
    """Rook-style adjacency of Voronoi cells clipped to ``bounding_box``.

    The default box is the coordinate extent padded by 5% on every side.
    """
    _check_duplicates(coords)
    xy = coords.xy
    box = bounding_box or default_bounding_box(xy)
    outside = ~box.contains(xy)
    if np.any(outside):
        raise SpatialError(f"sites outside the bounding box: {coords.site_id[outside].tolist()}")
    tol = LENGTH_TOL * box.diagonal
    edges = [
        (int(l), int(t))
        for l, t in _candidate_pairs(xy)
        if _shared_boundary_length(xy, int(l), int(t), box) > tol
    ]
    meta = {"crs": coords.crs, "bounding_box": [box.xmin, box.ymin, box.xmax, box.ymax]}
    return SpatialGraph(len(coords), np.array(edges, dtype=np.int64).reshape(-1, 2), coords.site_id, meta)


def connected_components(graph: SpatialGraph) -> list[set[int]]:
    """Maximal connected sets of original site ids, ordered by smallest member."""
    n = graph.n_sites
    e = graph.edges
    mat = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    _, labels = _cc(mat, directed=False)
    comps: dict[int, set[int]] = {}
    for idx, lab in enumerate(labels):
        comps.setdefault(int(lab), set()).add(int(graph.site_id[idx]))
    return sorted(comps.values(), key=min)


def component_labels(graph: SpatialGraph) -> np.ndarray:
    """Component index per dense site index, numbered by first appearance."""
    n = graph.n_sites
    e = graph.edges
    mat = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    _, labels = _cc(mat, directed=False)
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(np.argsort(first))
    return order[labels]


def _clip(poly: list[np.ndarray], normal: np.ndarray, offset: float) -> list[np.ndarray]:
    # keep points with normal . p <= offset
    out: list[np.ndarray] = []
    n = len(poly)
    for i in range(n):
        cur, nxt = poly[i], poly[(i + 1) % n]
        fc = normal @ cur - offset
        fn = normal @ nxt - offset
        if fc <= 0:
            out.append(cur)
        if fc * fn < 0:
            out.append(cur + (nxt - cur) * (fc / (fc - fn)))
    return out


def cell_polygons(coords: SiteCoordinates, bounding_box: BoundingBox | None = None) -> list[np.ndarray]:
    """Clipped Voronoi cell of every site as an (n_vertices, 2) array."""
    xy = coords.xy
    box = bounding_box or default_bounding_box(xy)
    pairs = _candidate_pairs(xy)
    nbrs: dict[int, list[int]] = {i: [] for i in range(len(xy))}
    for l, t in pairs:
        nbrs[int(l)].append(int(t))
        nbrs[int(t)].append(int(l))
    cells = []
    for l in range(len(xy)):
        poly = [
            np.array([box.xmin, box.ymin]),
            np.array([box.xmax, box.ymin]),
            np.array([box.xmax, box.ymax]),
            np.array([box.xmin, box.ymax]),
        ]
        pl = xy[l]
        for t in nbrs[l]:
            pt = xy[t]
            normal = pt - pl
            poly = _clip(poly, normal, 0.5 * (pt @ pt - pl @ pl))
            if not poly:
                break
        cells.append(np.array(poly))
    return cells


def cells_geojson(coords: SiteCoordinates, bounding_box: BoundingBox | None = None) -> str:
    features = []
    for sid, poly in zip(coords.site_id, cell_polygons(coords, bounding_box)):
        ring = [[float(x), float(y)] for x, y in poly]
        ring.append(ring[0])
        features.append(
            {
                "type": "Feature",
                "properties": {"site_id": int(sid)},
                "geometry": {"type": "Polygon", "coordinates": [ring]},
            }
        )
    return json.dumps({"type": "FeatureCollection", "features": features}, indent=1)

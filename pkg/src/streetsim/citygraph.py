"""Geolocated street graphs.

Nodes are geolocated points joined by undirected edges. This module covers
graph file I/O, synthetic city generation, great-circle distance math,
hop-minimal shortest paths, and region extraction (search-depth or
bounding-box).

Graph file format (UTF-8, line oriented):

    # comment
    N <id> <lat> <lon>
    E <id1> <id2>

Landmark files hold one ``lat,lon`` pair per line.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EARTH_RADIUS_M = 6_371_000.0
METERS_PER_DEG_LAT = EARTH_RADIUS_M * math.pi / 180.0


class GraphError(Exception):
    """Base class for street-graph errors."""


class ParseError(GraphError):
    """Malformed graph or landmark file; carries the offending line number."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class ValidationError(GraphError):
    """Structurally invalid graph (dangling edge, duplicate id, ...)."""


class DegenerateInput(GraphError):
    """Synthetic-city dimensions too small to form a graph."""


class EmptyGraph(GraphError):
    """Operation requires at least one node."""


class EmptyRegion(GraphError):
    """Region extraction produced no nodes."""


class Unreachable(GraphError):
    """No path between the requested nodes."""


@dataclass(frozen=True)
class LatLong:
    """A WGS-ish latitude/longitude pair in degrees."""

    lat: float
    lon: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0):
            raise ValidationError(f"latitude {self.lat} outside [-90, 90]")
        if not (-180.0 <= self.lon <= 180.0):
            raise ValidationError(f"longitude {self.lon} outside [-180, 180]")


def haversine_m(a: LatLong, b: LatLong) -> float:
    """Great-circle distance in meters on a 6,371 km sphere."""
    phi1 = math.radians(a.lat)
    phi2 = math.radians(b.lat)
    dphi = phi2 - phi1
    dlam = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def haversine_m_many(origin: LatLong, lats: np.ndarray, lons: np.ndarray) -> np.ndarray:
    """Vectorized :func:`haversine_m` from one origin to arrays of coordinates."""
    phi1 = math.radians(origin.lat)
    phi2 = np.radians(lats)
    dphi = phi2 - phi1
    dlam = np.radians(lons - origin.lon)
    h = np.sin(dphi / 2.0) ** 2 + math.cos(phi1) * np.cos(phi2) * np.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(h)))


def bearing_deg(a: LatLong, b: LatLong) -> float:
    """Compass bearing from ``a`` to ``b``, clockwise degrees from true north.

    Uses a local equirectangular projection around ``a`` (delta-lon scaled by
    cos lat), which is accurate below city scale.
    """
    east = math.radians(b.lon - a.lon) * math.cos(math.radians(a.lat))
    north = math.radians(b.lat - a.lat)
    return math.degrees(math.atan2(east, north)) % 360.0


class StreetGraph:
    """Undirected graph of geolocated nodes. Immutable after construction.

    Node ids are opaque strings; adjacency lists are kept sorted so that
    traversal order (and hence BFS tie-breaking) is deterministic.
    """

    def __init__(self, nodes: dict[str, LatLong], edges):
        self._pos: dict[str, LatLong] = dict(nodes)
        if len(self._pos) == 0:
            raise ValidationError("graph has no nodes")
        edge_set: set[tuple[str, str]] = set()
        adj: dict[str, set[str]] = {nid: set() for nid in self._pos}
        for a, b in edges:
            if a == b:
                raise ValidationError(f"self-loop at node {a!r}")
            for end in (a, b):
                if end not in self._pos:
                    raise ValidationError(f"edge ({a!r}, {b!r}) references unknown node {end!r}")
            key = (a, b) if a < b else (b, a)
            edge_set.add(key)
            adj[a].add(b)
            adj[b].add(a)
        self._edges = frozenset(edge_set)
        self._adj: dict[str, tuple[str, ...]] = {nid: tuple(sorted(nbrs)) for nid, nbrs in adj.items()}
        self._ids: tuple[str, ...] = tuple(sorted(self._pos))
        self._index = {nid: i for i, nid in enumerate(self._ids)}
        self._lats = np.array([self._pos[nid].lat for nid in self._ids])
        self._lons = np.array([self._pos[nid].lon for nid in self._ids])

    @property
    def node_ids(self) -> tuple[str, ...]:
        return self._ids

    @property
    def num_nodes(self) -> int:
        return len(self._ids)

    @property
    def num_edges(self) -> int:
        return len(self._edges)

    @property
    def edges(self) -> frozenset[tuple[str, str]]:
        return self._edges

    @property
    def lat_array(self) -> np.ndarray:
        return self._lats

    @property
    def lon_array(self) -> np.ndarray:
        return self._lons

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._pos

    def position(self, node_id: str) -> LatLong:
        return self._pos[node_id]

    def neighbors(self, node_id: str) -> tuple[str, ...]:
        return self._adj[node_id]

    def degree(self, node_id: str) -> int:
        return len(self._adj[node_id])

    def index_of(self, node_id: str) -> int:
        return self._index[node_id]

    def edge_bearing(self, a: str, b: str) -> float:
        """Bearing of the edge leaving ``a`` toward ``b``."""
        if b not in self._adj[a]:
            raise ValidationError(f"no edge between {a!r} and {b!r}")
        return bearing_deg(self._pos[a], self._pos[b])

    def edge_length_m(self, a: str, b: str) -> float:
        if b not in self._adj[a]:
            raise ValidationError(f"no edge between {a!r} and {b!r}")
        return haversine_m(self._pos[a], self._pos[b])

    def bbox(self) -> tuple[LatLong, LatLong]:
        """(south-west, north-east) corners of the node bounding box."""
        return (
            LatLong(float(self._lats.min()), float(self._lons.min())),
            LatLong(float(self._lats.max()), float(self._lons.max())),
        )

    def distances_from(self, pos: LatLong) -> np.ndarray:
        """Haversine meters from ``pos`` to every node, in ``node_ids`` order."""
        return haversine_m_many(pos, self._lats, self._lons)

    def is_connected(self) -> bool:
        seen = {self._ids[0]}
        frontier = deque(seen)
        while frontier:
            for nbr in self._adj[frontier.popleft()]:
                if nbr not in seen:
                    seen.add(nbr)
                    frontier.append(nbr)
        return len(seen) == self.num_nodes


@dataclass(frozen=True)
class RegionSpec:
    """Region selector: search-tree depth around an origin, or a bounding box.

    Exactly one of ``max_depth`` / ``bbox`` must be set; ``origin`` is required
    in depth mode and ignored in bbox mode.
    """

    origin: LatLong | None = None
    max_depth: int | None = None
    bbox: tuple[LatLong, LatLong] | None = None

    def __post_init__(self):
        if (self.max_depth is None) == (self.bbox is None):
            raise ValidationError("exactly one of max_depth / bbox must be set")
        if self.max_depth is not None:
            if self.max_depth < 1:
                raise ValidationError("max_depth must be >= 1")
            if self.origin is None:
                raise ValidationError("depth mode requires an origin")


def load_graph(path) -> StreetGraph:
    """Parse a graph file. Raises ParseError / ValidationError."""
    nodes: dict[str, LatLong] = {}
    edges: list[tuple[str, str]] = []
    for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "N":
            if len(parts) != 4:
                raise ParseError(f"node line needs 'N <id> <lat> <lon>', got {raw!r}", line_no)
            nid = parts[1]
            if nid in nodes:
                raise ValidationError(f"line {line_no}: duplicate node id {nid!r}")
            try:
                lat, lon = float(parts[2]), float(parts[3])
            except ValueError as exc:
                raise ParseError(f"bad coordinate in {raw!r}", line_no) from exc
            nodes[nid] = LatLong(lat, lon)
        elif parts[0] == "E":
            if len(parts) != 3:
                raise ParseError(f"edge line needs 'E <id1> <id2>', got {raw!r}", line_no)
            edges.append((parts[1], parts[2]))
        else:
            raise ParseError(f"unknown record type {parts[0]!r}", line_no)
    return StreetGraph(nodes, edges)


def save_graph(graph: StreetGraph, path) -> None:
    """Write a graph file; byte-stable for a given graph (sorted ids, repr floats)."""
    lines = []
    for nid in graph.node_ids:
        pos = graph.position(nid)
        lines.append(f"N {nid} {pos.lat!r} {pos.lon!r}")
    for a, b in sorted(graph.edges):
        lines.append(f"E {a} {b}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_landmarks(path) -> list[LatLong]:
    """Parse a landmark file: one ``lat,lon`` pair per line."""
    out = []
    for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise ParseError(f"landmark line needs 'lat,lon', got {raw!r}", line_no)
        try:
            out.append(LatLong(float(parts[0]), float(parts[1])))
        except ValueError as exc:
            raise ParseError(f"bad coordinate in {raw!r}", line_no) from exc
    return out


def save_landmarks(landmarks, path) -> None:
    lines = [f"{lm.lat!r},{lm.lon!r}" for lm in landmarks]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def generate_synthetic_city(
    width: int,
    height: int,
    spacing_m: float = 10.0,
    irregularity: float = 0.0,
    seed: int = 0,
    origin: LatLong = LatLong(40.0, -74.0),
) -> StreetGraph:
    """Deterministic grid-like city of ``width * height`` nodes.

    Positions sit on a lat/long grid with ``spacing_m`` meters between
    neighbors, each jittered by up to ``irregularity * spacing_m``.
    A fraction (0.3 * irregularity) of the grid edges is deleted at random,
    skipping any deletion that would disconnect the graph.
    """
    if width < 2 or height < 2 or width * height < 2:
        raise DegenerateInput(f"city dimensions {width}x{height} too small")
    if spacing_m <= 0:
        raise DegenerateInput("spacing_m must be positive")
    if not (0.0 <= irregularity < 1.0):
        raise DegenerateInput("irregularity must lie in [0, 1)")

    rng = np.random.default_rng(seed)
    dlat = spacing_m / METERS_PER_DEG_LAT
    dlon = spacing_m / (METERS_PER_DEG_LAT * math.cos(math.radians(origin.lat)))

    def node_id(row: int, col: int) -> str:
        return f"n{row * width + col:04d}"

    nodes: dict[str, LatLong] = {}
    for row in range(height):
        for col in range(width):
            jit_n, jit_e = rng.uniform(-0.5, 0.5, size=2) * irregularity * spacing_m
            nodes[node_id(row, col)] = LatLong(
                float(origin.lat + row * dlat + jit_n / METERS_PER_DEG_LAT),
                float(origin.lon + col * dlon + jit_e / (METERS_PER_DEG_LAT * math.cos(math.radians(origin.lat)))),
            )

    grid_edges = []
    for row in range(height):
        for col in range(width):
            if col + 1 < width:
                grid_edges.append((node_id(row, col), node_id(row, col + 1)))
            if row + 1 < height:
                grid_edges.append((node_id(row, col), node_id(row + 1, col)))

    n_delete = int(round(0.3 * irregularity * len(grid_edges)))
    if n_delete > 0:
        adj = {nid: set() for nid in nodes}
        for a, b in grid_edges:
            adj[a].add(b)
            adj[b].add(a)

        def connected_without(a: str, b: str) -> bool:
            # BFS from a with the (a, b) edge removed; connected iff we reach b.
            seen = {a}
            frontier = deque([a])
            while frontier:
                cur = frontier.popleft()
                for nbr in adj[cur]:
                    if cur == a and nbr == b:
                        continue
                    if nbr == b:
                        return True
                    if nbr not in seen:
                        seen.add(nbr)
                        frontier.append(nbr)
            return False

        candidates = list(grid_edges)
        rng.shuffle(candidates)
        kept = set(grid_edges)
        deleted = 0
        for a, b in candidates:
            if deleted >= n_delete:
                break
            if connected_without(a, b):
                kept.discard((a, b))
                adj[a].discard(b)
                adj[b].discard(a)
                deleted += 1
        grid_edges = sorted(kept)

    return StreetGraph(nodes, grid_edges)


def hop_distances(graph: StreetGraph, source: str, max_depth: int | None = None) -> dict[str, int]:
    """BFS hop counts from ``source`` to every reachable node (optionally capped)."""
    if source not in graph:
        raise ValidationError(f"unknown node {source!r}")
    dist = {source: 0}
    frontier = deque([source])
    while frontier:
        cur = frontier.popleft()
        d = dist[cur]
        if max_depth is not None and d >= max_depth:
            continue
        for nbr in graph.neighbors(cur):
            if nbr not in dist:
                dist[nbr] = d + 1
                frontier.append(nbr)
    return dist


def bfs_parents(graph: StreetGraph, source: str) -> dict[str, str | None]:
    """BFS tree parents from ``source``; ties broken by sorted neighbor order."""
    if source not in graph:
        raise ValidationError(f"unknown node {source!r}")
    parent: dict[str, str | None] = {source: None}
    frontier = deque([source])
    while frontier:
        cur = frontier.popleft()
        for nbr in graph.neighbors(cur):
            if nbr not in parent:
                parent[nbr] = cur
                frontier.append(nbr)
    return parent


def shortest_path(graph: StreetGraph, src: str, dst: str) -> tuple[int, list[str]]:
    """Minimum-hop path from ``src`` to ``dst`` via breadth-first search.

    Deterministic: the BFS expands neighbors in sorted order, so ties resolve
    to the same path on every call.
    """
    for node in (src, dst):
        if node not in graph:
            raise ValidationError(f"unknown node {node!r}")
    if src == dst:
        return 0, [src]
    parent = bfs_parents(graph, src)
    if dst not in parent:
        raise Unreachable(f"no path from {src!r} to {dst!r}")
    path = [dst]
    while path[-1] != src:
        path.append(parent[path[-1]])
    path.reverse()
    return len(path) - 1, path


def shortest_path_m(graph: StreetGraph, src: str, dst: str) -> float:
    """Metric length (meters) of the best hop-minimal path from ``src`` to ``dst``.

    Among all minimum-hop paths, returns the smallest sum of haversine edge
    lengths; this makes the value symmetric in its endpoints.
    """
    for node in (src, dst):
        if node not in graph:
            raise ValidationError(f"unknown node {node!r}")
    if src == dst:
        return 0.0
    hops = hop_distances(graph, src)
    if dst not in hops:
        raise Unreachable(f"no path from {src!r} to {dst!r}")
    target_hops = hops[dst]
    # DP over the BFS layer DAG: best metric length per node, layer by layer.
    best = {src: 0.0}
    layer = [src]
    for depth in range(target_hops):
        nxt: dict[str, float] = {}
        for node in layer:
            for nbr in graph.neighbors(node):
                if hops.get(nbr) != depth + 1:
                    continue
                cand = best[node] + graph.edge_length_m(node, nbr)
                if nbr not in nxt or cand < nxt[nbr]:
                    nxt[nbr] = cand
        best.update(nxt)
        layer = list(nxt)
    return best[dst]


def nearest_node(graph: StreetGraph, pos: LatLong) -> str:
    """Node minimizing haversine distance to ``pos``; ties break to the smallest id."""
    if graph.num_nodes == 0:
        raise EmptyGraph("nearest_node on empty graph")
    dists = graph.distances_from(pos)
    # node_ids are sorted, so argmin's first-match is the smallest id on ties
    return graph.node_ids[int(np.argmin(dists))]


def extract_region(graph: StreetGraph, spec: RegionSpec) -> StreetGraph:
    """Induced subgraph for a region.

    Depth mode: nodes within ``max_depth`` BFS hops of the node nearest
    ``spec.origin``. Bbox mode: nodes inside the box, then the largest
    connected component. Edges to excluded nodes are dropped.
    """
    if spec.max_depth is not None:
        root = nearest_node(graph, spec.origin)
        keep = set(hop_distances(graph, root, max_depth=spec.max_depth))
    else:
        (sw, ne) = spec.bbox
        keep = {
            nid
            for nid in graph.node_ids
            if sw.lat <= graph.position(nid).lat <= ne.lat and sw.lon <= graph.position(nid).lon <= ne.lon
        }
        if not keep:
            raise EmptyRegion("bounding box contains no nodes")
        keep = _largest_component(graph, keep)
    if not keep:
        raise EmptyRegion("region is empty")
    nodes = {nid: graph.position(nid) for nid in keep}
    edges = [(a, b) for a, b in graph.edges if a in keep and b in keep]
    return StreetGraph(nodes, edges)


def _largest_component(graph: StreetGraph, keep: set[str]) -> set[str]:
    unvisited = set(keep)
    best: set[str] = set()
    while unvisited:
        start = min(unvisited)
        comp = {start}
        frontier = deque([start])
        while frontier:
            cur = frontier.popleft()
            for nbr in graph.neighbors(cur):
                if nbr in unvisited and nbr not in comp:
                    comp.add(nbr)
                    frontier.append(nbr)
        unvisited -= comp
        if len(comp) > len(best):
            best = comp
    return best

"""Spatial graph construction over point clouds.

Two strategies: k-nearest-neighbor graphs (directed, receiver-centric) and
radius graphs (symmetric).  Node features are the coordinates, with observed
field values appended for input-function clouds; edge features hold the
relative displacement, the Euclidean distance and, when values are present,
the difference in field values across the edge.

Neighbor search is exact chunked brute force.  At desk scale this is faster
to trust than a tree, and it doubles as its own oracle: ties are broken by
lower node index, deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PointCloud",
    "SpatialGraph",
    "GraphSpec",
    "check_point_cloud",
    "build_knn_graph",
    "build_radius_graph",
    "build_graph",
    "compute_features",
    "graph_stats",
]

_CHUNK = 512


@dataclass(eq=False)  # identity semantics: clouds key weak caches
class PointCloud:
    """Spatial locations with optional per-point field values."""

    coords: np.ndarray
    values: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        if self.values is not None:
            self.values = np.ascontiguousarray(self.values, dtype=np.float64)
            if self.values.ndim == 1:
                self.values = self.values[:, None]
        check_point_cloud(self.coords, self.values)

    @property
    def n_points(self):
        return self.coords.shape[0]

    @property
    def dim(self):
        return self.coords.shape[1]

    @property
    def n_channels(self):
        return 0 if self.values is None else self.values.shape[1]


def check_point_cloud(coords, values=None):
    """Validate coordinate/value arrays; raises ValueError on bad input."""
    coords = np.asarray(coords)
    if coords.ndim != 2:
        raise ValueError(f"coords must be 2-D (N, d), got shape {coords.shape}")
    n, d = coords.shape
    if n < 1:
        raise ValueError("point cloud needs at least one point")
    if d not in (2, 3):
        raise ValueError(f"spatial dimension must be 2 or 3, got {d}")
    if not np.isfinite(coords).all():
        raise ValueError("coords contain non-finite entries")
    if values is not None:
        values = np.asarray(values)
        if values.shape[0] != n:
            raise ValueError(f"values rows ({values.shape[0]}) do not match coords rows ({n})")
        if not np.isfinite(values).all():
            raise ValueError("values contain non-finite entries")
    return coords


@dataclass
class SpatialGraph:
    """Directed edge list plus per-node / per-edge feature matrices.

    Edge m runs from ``senders[m]`` to ``receivers[m]``; features for that
    edge are computed receiver-minus-sender.
    """

    senders: np.ndarray
    receivers: np.ndarray
    n_nodes: int
    node_features: np.ndarray | None = None
    edge_features: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_edges(self):
        return self.senders.shape[0]


@dataclass(frozen=True)
class GraphSpec:
    """One branch's construction strategy: ``knn`` with k or ``radius`` with r."""

    strategy: str
    k: int | None = None
    radius: float | None = None

    def __post_init__(self):
        if self.strategy not in ("knn", "radius"):
            raise ValueError(f"unknown graph strategy {self.strategy!r}")
        if self.strategy == "knn" and (self.k is None or self.k < 1):
            raise ValueError("knn strategy needs k >= 1")
        if self.strategy == "radius" and (self.radius is None or self.radius <= 0):
            raise ValueError("radius strategy needs radius > 0")

    @classmethod
    def parse(cls, text):
        """Parse ``knn:4`` / ``radius:0.25`` style specs."""
        kind, _, arg = text.partition(":")
        kind = kind.strip().lower()
        if kind == "knn":
            return cls("knn", k=int(arg))
        if kind == "radius":
            return cls("radius", radius=float(arg))
        raise ValueError(f"cannot parse graph spec {text!r}")

    def __str__(self):
        return f"knn:{self.k}" if self.strategy == "knn" else f"radius:{self.radius:g}"


def _pairwise_chunks(coords):
    """Yield (row_start, distance_block) over row chunks of the full matrix."""
    n = coords.shape[0]
    sq = (coords * coords).sum(axis=1)
    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        block = sq[start:stop, None] + sq[None, :] - 2.0 * coords[start:stop] @ coords.T
        np.maximum(block, 0.0, out=block)
        yield start, np.sqrt(block)


def build_knn_graph(cloud: PointCloud, k: int) -> SpatialGraph:
    """Connect each node to its k nearest distinct neighbors (incoming edges).

    Receiver-centric and directed: node i receives from its k nearest
    senders.  Ties (including duplicate coordinates) break toward the lower
    node index; self-edges are excluded.
    """
    n = cloud.n_points
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if k >= n:
        raise ValueError(f"k={k} needs at least k+1 points, cloud has {n}")
    senders = np.empty(n * k, dtype=np.int64)
    receivers = np.repeat(np.arange(n, dtype=np.int64), k)
    for start, dist in _pairwise_chunks(cloud.coords):
        rows = dist.shape[0]
        dist[np.arange(rows), np.arange(start, start + rows)] = np.inf  # never self
        # stable sort: equal distances keep ascending column index
        order = np.argsort(dist, axis=1, kind="stable")[:, :k]
        senders[start * k : (start + rows) * k] = order.reshape(-1)
    return SpatialGraph(senders, receivers, n, meta={"strategy": "knn", "k": k})


def build_radius_graph(cloud: PointCloud, radius: float) -> SpatialGraph:
    """Connect every pair with 0 < distance <= radius, both directions.

    Isolated nodes are allowed; they are reported by :func:`graph_stats`
    rather than repaired.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    n = cloud.n_points
    send_parts, recv_parts = [], []
    for start, dist in _pairwise_chunks(cloud.coords):
        mask = (dist > 0.0) & (dist <= radius)
        # roundoff can leave a tiny positive self-distance; never self-connect
        rows_in_chunk = dist.shape[0]
        mask[np.arange(rows_in_chunk), np.arange(start, start + rows_in_chunk)] = False
        rows, cols = np.nonzero(mask)
        recv_parts.append(rows + start)
        send_parts.append(cols)
    senders = np.concatenate(send_parts) if send_parts else np.empty(0, dtype=np.int64)
    receivers = np.concatenate(recv_parts) if recv_parts else np.empty(0, dtype=np.int64)
    return SpatialGraph(
        senders.astype(np.int64),
        receivers.astype(np.int64),
        n,
        meta={"strategy": "radius", "radius": radius},
    )


def build_graph(cloud: PointCloud, spec: GraphSpec, with_features=True) -> SpatialGraph:
    if spec.strategy == "knn":
        graph = build_knn_graph(cloud, spec.k)
    else:
        graph = build_radius_graph(cloud, spec.radius)
    if with_features:
        graph.node_features, graph.edge_features = compute_features(graph, cloud)
    return graph


def compute_features(graph: SpatialGraph, cloud: PointCloud):
    """Node and edge feature matrices for a topology over ``cloud``.

    Node i: ``[x_i]`` or ``[x_i, u_i]``.  Edge (receiver i <- sender j):
    ``[x_i - x_j, |x_i - x_j|]`` plus ``u_i - u_j`` when values are present.
    """
    coords = cloud.coords
    node_features = coords if cloud.values is None else np.hstack([coords, cloud.values])
    xi = coords[graph.receivers]
    xj = coords[graph.senders]
    disp = xi - xj
    dist = np.linalg.norm(disp, axis=1, keepdims=True)
    parts = [disp, dist]
    if cloud.values is not None:
        parts.append(cloud.values[graph.receivers] - cloud.values[graph.senders])
    edge_features = np.hstack(parts) if graph.n_edges else np.zeros((0, sum(p.shape[1] for p in parts)))
    return np.ascontiguousarray(node_features), np.ascontiguousarray(edge_features)


def graph_stats(graph: SpatialGraph) -> dict:
    """Summary counts: nodes, edges, isolated nodes, in-degree histogram.

    A node is isolated when it has no incident edge in either direction.
    """
    in_deg = np.bincount(graph.receivers, minlength=graph.n_nodes)
    out_deg = np.bincount(graph.senders, minlength=graph.n_nodes)
    isolated = int(((in_deg + out_deg) == 0).sum())
    degrees, counts = np.unique(in_deg, return_counts=True)
    hist = {int(d): int(c) for d, c in zip(degrees, counts)}
    return {
        "n_nodes": graph.n_nodes,
        "n_edges": graph.n_edges,
        "n_isolated": isolated,
        "degree_histogram": hist,
    }

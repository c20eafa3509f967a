"""
Supervoxel Graph Construction

Node centroids, mutual k-nearest-neighbour adjacency, Laplacian positional
encodings, and the `.svg2` graph container.

.svg2 layout:
    line 1   magic "SVG2"
    line 2   JSON header {version, n_nodes, n_edges, patch_rows, row_width,
             k_pe, has_targets, meta}
    payload  little-endian, in order:
             patches   float32 (n_nodes, patch_rows, row_width)
             lap_pe    float32 (n_nodes, k_pe)
             y_reg     float32 (n_nodes,)        if has_targets
             y_cls     uint8   (n_nodes,)        if has_targets
             isolated  uint8   (n_nodes,)
             node_ids  int32   (n_nodes,)
             centroids float64 (n_nodes, 3)
             edges     int32   (n_edges, 2)
"""

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist

DEFAULT_K_NN = 8
DEFAULT_K_PE = 8
KNN_RULES = ("mutual", "or")

SVG_MAGIC = b"SVG2"
SVG_VERSION = 1

DEGENERATE_EIGVAL_TOL = 1e-8
SIGN_TIE_TOL = 1e-12


class EmptyGraphError(ValueError):
    """Graph has no nodes."""


class GraphFormatError(ValueError):
    """Graph container is malformed, truncated or of another version."""


@dataclass(frozen=True)
class Adjacency:
    """
    Undirected graph over n_nodes.

    Args:
        n_nodes: node count
        edges: (E, 2) int64 pairs with i < j, sorted
        isolated: (n_nodes,) bool; True where the node has no edge and is
            served by its self-loop only
    """

    n_nodes: int
    edges: np.ndarray
    isolated: np.ndarray

    def dense(self) -> np.ndarray:
        A = np.zeros((self.n_nodes, self.n_nodes), dtype=np.uint8)
        if self.edges.size:
            A[self.edges[:, 0], self.edges[:, 1]] = 1
            A[self.edges[:, 1], self.edges[:, 0]] = 1
        return A

    def degree(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n_nodes)

    @classmethod
    def from_dense(cls, A: np.ndarray) -> "Adjacency":
        A = np.asarray(A) != 0
        edges = np.argwhere(np.triu(A, k=1)).astype(np.int64)
        return cls(n_nodes=A.shape[0], edges=edges, isolated=~A.any(axis=1))


def node_centroids(patches: Sequence) -> np.ndarray:
    """
    Node centroid = mean of its patch centres.

    Args:
        patches: one PatchTensor (or (n_patch, 3) array of centres) per node

    Returns:
        (n_nodes, 3) float64 world coordinates
    """
    out = np.empty((len(patches), 3), dtype=np.float64)
    for i, p in enumerate(patches):
        centres = getattr(p, "centroids_world", p)
        out[i] = np.asarray(centres, dtype=np.float64).reshape(-1, 3).mean(axis=0)
    return out


def knn_indices(centroids: np.ndarray, k: int) -> np.ndarray:
    """(n, k) nearest other nodes by Euclidean distance, ties to lower id."""
    D = cdist(centroids, centroids)
    np.fill_diagonal(D, np.inf)
    return np.argsort(D, axis=1, kind="stable")[:, :k]


def mutual_knn(centroids, k_nn: int = DEFAULT_K_NN, rule: str = "mutual") -> Adjacency:
    """
    Link nodes that are among each other's k_nn nearest neighbours.

    Args:
        centroids: (n, 3) node positions
        k_nn: neighbours per node; clamped to n - 1 with a warning
        rule: "mutual" (both directions) or "or" (either direction)

    Returns:
        Adjacency with zero diagonal; nodes left without edges are flagged
        as isolated

    Raises:
        ValueError: fewer than 2 nodes, k_nn < 1 or unknown rule
    """
    centroids = np.asarray(centroids, dtype=np.float64).reshape(-1, 3)
    n = centroids.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 nodes to build a graph, got {n}")
    if k_nn < 1:
        raise ValueError(f"k_nn must be >= 1, got {k_nn}")
    if rule not in KNN_RULES:
        raise ValueError(f"unknown neighbour rule '{rule}', expected one of {KNN_RULES}")
    if k_nn >= n:
        warnings.warn(f"k_nn={k_nn} >= node count {n}; clamping to {n - 1}")
        k_nn = n - 1

    nearest = knn_indices(centroids, k_nn)
    directed = np.zeros((n, n), dtype=bool)
    directed[np.repeat(np.arange(n), k_nn), nearest.ravel()] = True

    A = directed & directed.T if rule == "mutual" else directed | directed.T
    return Adjacency.from_dense(A)


def normalized_laplacian(adjacency: Adjacency) -> np.ndarray:
    """L = I - D^-1/2 A D^-1/2 with isolated-node degree clipped to 1."""
    A = adjacency.dense().astype(np.float64)
    inv_sqrt = 1.0 / np.sqrt(np.clip(A.sum(axis=1), 1.0, None))
    return np.eye(adjacency.n_nodes) - inv_sqrt[:, None] * A * inv_sqrt[None, :]


def _fix_sign(v: np.ndarray) -> np.ndarray:
    mag = np.abs(v)
    lead = int(np.flatnonzero(mag >= mag.max() - SIGN_TIE_TOL)[0])
    return -v if v[lead] < 0 else v


def laplacian_pe(adjacency: Adjacency, k_pe: int = DEFAULT_K_PE) -> Tuple[np.ndarray, np.ndarray]:
    """
    Low-frequency eigenvectors of the normalized Laplacian as node positions.

    One zero-eigenvalue (constant) eigenvector per connected component of
    two or more nodes is skipped. Each vector is sign-fixed so its
    largest-magnitude entry is positive; vectors of a degenerate eigenvalue
    are ordered lexicographically. Missing columns are zero.

    Args:
        adjacency: Graph
        k_pe: Number of encoding columns

    Returns:
        (pe, eigvals): pe is (n_nodes, k_pe) float64; eigvals holds the
        eigenvalue of each nonzero column, in column order
    """
    n = adjacency.n_nodes
    L = normalized_laplacian(adjacency)
    eigvals, eigvecs = np.linalg.eigh(L)

    if adjacency.edges.size:
        graph = coo_matrix(
            (np.ones(len(adjacency.edges)), (adjacency.edges[:, 0], adjacency.edges[:, 1])),
            shape=(n, n),
        )
        _, comp = connected_components(graph, directed=False)
        n_trivial = int((np.bincount(comp) >= 2).sum())
    else:
        n_trivial = 0

    vals = eigvals[n_trivial:]
    vecs = [_fix_sign(eigvecs[:, j]) for j in range(n_trivial, n)]

    ordered = []
    start = 0
    while start < len(vals):
        stop = start + 1
        while stop < len(vals) and vals[stop] - vals[start] < DEGENERATE_EIGVAL_TOL:
            stop += 1
        group = sorted(range(start, stop), key=lambda j: tuple(vecs[j]))
        ordered.extend(group)
        start = stop

    keep = ordered[:k_pe]
    pe = np.zeros((n, k_pe), dtype=np.float64)
    for col, j in enumerate(keep):
        pe[:, col] = vecs[j]
    return pe, vals[keep] if keep else np.zeros(0)


@dataclass
class SupervoxelGraph:
    """
    One preprocessed sample: retained supervoxels as nodes.

    Args:
        node_ids: (n,) supervoxel id of each node in the source partition
        patches: (n, n_patch * n_modalities, s + 3) float32 node tensors
        centroids: (n, 3) node centroids in mm
        edges: (E, 2) undirected edge list, i < j
        isolated: (n,) nodes whose only neighbour is themselves
        lap_pe: (n, k_pe) Laplacian positional encodings
        y_reg: (n,) tumor fraction, or None without ground truth
        y_cls: (n,) binarized tumor fraction, or None
        meta: provenance (granularity, k_nn, source volume, ...)
    """

    node_ids: np.ndarray
    patches: np.ndarray
    centroids: np.ndarray
    edges: np.ndarray
    isolated: np.ndarray
    lap_pe: np.ndarray
    y_reg: Optional[np.ndarray] = None
    y_cls: Optional[np.ndarray] = None
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.node_ids = np.asarray(self.node_ids, dtype=np.int32)
        self.patches = np.asarray(self.patches, dtype=np.float32)
        self.centroids = np.asarray(self.centroids, dtype=np.float64).reshape(-1, 3)
        self.edges = np.asarray(self.edges, dtype=np.int32).reshape(-1, 2)
        self.isolated = np.asarray(self.isolated, dtype=np.uint8)
        self.lap_pe = np.asarray(self.lap_pe, dtype=np.float32)
        if (self.y_reg is None) != (self.y_cls is None):
            raise ValueError("y_reg and y_cls must be given together")
        if self.y_reg is not None:
            self.y_reg = np.asarray(self.y_reg, dtype=np.float32)
            self.y_cls = np.asarray(self.y_cls, dtype=np.uint8)

        n = self.n_nodes
        sizes = {
            "patches": self.patches.shape[0],
            "centroids": self.centroids.shape[0],
            "isolated": self.isolated.shape[0],
            "lap_pe": self.lap_pe.shape[0],
        }
        if self.y_reg is not None:
            sizes.update(y_reg=self.y_reg.shape[0], y_cls=self.y_cls.shape[0])
        bad = {k: v for k, v in sizes.items() if v != n}
        if bad:
            raise ValueError(f"per-node arrays disagree with {n} nodes: {bad}")
        if self.patches.ndim != 3 or self.lap_pe.ndim != 2:
            raise ValueError("patches must be 3D and lap_pe 2D")
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= n):
            raise ValueError(f"edge endpoint outside [0, {n})")

    @property
    def n_nodes(self) -> int:
        return int(self.node_ids.shape[0])

    @property
    def has_targets(self) -> bool:
        return self.y_reg is not None

    @property
    def graph_id(self) -> str:
        return str(self.meta.get("graph_id") or self.meta.get("volume_id", ""))

    def adjacency(self) -> Adjacency:
        return Adjacency(
            n_nodes=self.n_nodes,
            edges=self.edges.astype(np.int64),
            isolated=self.isolated.astype(bool),
        )


def _payload_layout(n: int, n_edges: int, rows: int, width: int, k_pe: int, has_targets: bool):
    layout = [
        ("patches", "<f4", (n, rows, width)),
        ("lap_pe", "<f4", (n, k_pe)),
    ]
    if has_targets:
        layout += [("y_reg", "<f4", (n,)), ("y_cls", "u1", (n,))]
    layout += [
        ("isolated", "u1", (n,)),
        ("node_ids", "<i4", (n,)),
        ("centroids", "<f8", (n, 3)),
        ("edges", "<i4", (n_edges, 2)),
    ]
    return layout


def write_graph(graph: SupervoxelGraph, path: Union[str, Path]) -> Path:
    """
    Write a graph to an `.svg2` container.

    Raises:
        EmptyGraphError: graph has no nodes
    """
    if graph.n_nodes == 0:
        raise EmptyGraphError("empty graph")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _, rows, width = graph.patches.shape
    header = {
        "version": SVG_VERSION,
        "n_nodes": graph.n_nodes,
        "n_edges": int(graph.edges.shape[0]),
        "patch_rows": int(rows),
        "row_width": int(width),
        "k_pe": int(graph.lap_pe.shape[1]),
        "has_targets": graph.has_targets,
        "meta": graph.meta,
    }
    layout = _payload_layout(
        graph.n_nodes, header["n_edges"], rows, width, header["k_pe"], graph.has_targets
    )

    with open(path, "wb") as f:
        f.write(SVG_MAGIC + b"\n")
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        for name, dtype, _ in layout:
            f.write(np.ascontiguousarray(getattr(graph, name)).astype(dtype).tobytes())

    return path


def read_graph(path: Union[str, Path]) -> SupervoxelGraph:
    """
    Read an `.svg2` container.

    Raises:
        EmptyGraphError: header declares zero nodes
        GraphFormatError: bad magic, version mismatch, or payload size mismatch
    """
    with open(path, "rb") as f:
        magic = f.readline().rstrip(b"\n")
        if magic != SVG_MAGIC:
            raise GraphFormatError(f"not an SVG2 container (magic {magic!r})")
        try:
            header = json.loads(f.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise GraphFormatError(f"unreadable header: {e}") from e
        payload = f.read()

    if header.get("version") != SVG_VERSION:
        raise GraphFormatError(
            f"version mismatch: file has {header.get('version')!r}, reader expects {SVG_VERSION}"
        )

    try:
        n = int(header["n_nodes"])
        n_edges = int(header["n_edges"])
        rows, width = int(header["patch_rows"]), int(header["row_width"])
        k_pe = int(header["k_pe"])
        has_targets = bool(header["has_targets"])
    except (KeyError, TypeError, ValueError) as e:
        raise GraphFormatError(f"incomplete header: {e}") from e

    if n == 0:
        raise EmptyGraphError("empty graph")

    layout = _payload_layout(n, n_edges, rows, width, k_pe, has_targets)
    expected = sum(np.dtype(dt).itemsize * int(np.prod(shape)) for _, dt, shape in layout)
    if len(payload) != expected:
        raise GraphFormatError(
            f"payload size mismatch: expected {expected} bytes, got {len(payload)}"
        )

    arrays = {}
    offset = 0
    for name, dtype, shape in layout:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(payload, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
        offset += count * np.dtype(dtype).itemsize

    return SupervoxelGraph(
        node_ids=arrays["node_ids"],
        patches=arrays["patches"],
        centroids=arrays["centroids"],
        edges=arrays["edges"],
        isolated=arrays["isolated"],
        lap_pe=arrays["lap_pe"],
        y_reg=arrays.get("y_reg"),
        y_cls=arrays.get("y_cls"),
        meta=header.get("meta", {}),
    )

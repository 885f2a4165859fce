"""Bi-directed triangle-mesh graphs.

A mesh graph stores every undirected mesh edge as two directed edges plus a
self-loop on every node. Directed edges are kept in canonical (src, dst)
lexicographic order so that downstream scatter/gather indices are stable
across runs and platforms.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MeshError
from .fileio import array_to_blob, blob_to_array, sha256_bytes, write_json, read_json

NODE_INTERIOR = 0
NODE_BOUNDARY = 1
NODE_SOURCE = 2

MODES = ("eulerian", "lagrangian")


@dataclass(frozen=True)
class MeshGraph:
    node_count: int
    directed_edges: np.ndarray   # (E, 2) int64, sorted by (src, dst)
    mesh_positions: np.ndarray   # (N, 2) float64
    world_positions: np.ndarray  # (N, 2) float64
    node_types: np.ndarray       # (N,) int64
    cells: np.ndarray            # (C, 3) int64


@dataclass(frozen=True)
class GraphView:
    """Positions/types/edges of one hierarchy level (no cell list)."""

    node_count: int
    directed_edges: np.ndarray
    mesh_positions: np.ndarray
    world_positions: np.ndarray
    node_types: np.ndarray


@dataclass(frozen=True)
class CoarseGraph:
    selected: np.ndarray       # (N_fine,) bool
    fine_index_of: np.ndarray  # (N_coarse,) int64, coarse -> fine index
    directed_edges: np.ndarray  # (E_coarse, 2) int64 over coarse indices

    @property
    def node_count(self) -> int:
        return int(self.fine_index_of.shape[0])


@dataclass(frozen=True)
class EdgeOffsets:
    """Raw per-edge geometry features.

    Eulerian: [dx, dy, |dX|] (width 3). Lagrangian additionally carries the
    world-space offset: [dx, dy, |dX|, wx, wy, |dx_world|] (width 6).
    """

    values: np.ndarray
    mode: str


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def _canonical_edges(edges: np.ndarray) -> np.ndarray:
    """Deduplicate and sort directed edges by (src, dst)."""
    if edges.size == 0:
        return edges.reshape(0, 2).astype(np.int64)
    edges = np.unique(edges.astype(np.int64), axis=0)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    return edges[order]


def _as_edge_array(edges) -> np.ndarray:
    arr = np.asarray(edges, dtype=np.int64)
    if arr.size == 0:
        return arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise MeshError(f"edge list must be (E, 2), got shape {arr.shape}")
    return arr


def build_bidirected(cells, mesh_positions, node_types, world_positions=None) -> MeshGraph:
    """Build a bi-directed mesh graph with self-loops from triangle cells."""
    cells = np.asarray(cells, dtype=np.int64)
    if cells.size == 0:
        raise MeshError("cell list is empty")
    if cells.ndim != 2 or cells.shape[1] != 3:
        raise MeshError(f"cells must be (C, 3) triangles, got shape {cells.shape}")
    mesh_positions = np.asarray(mesh_positions, dtype=np.float64)
    if mesh_positions.ndim != 2 or mesh_positions.shape[1] != 2:
        raise MeshError("mesh_positions must be (N, 2)")
    n = mesh_positions.shape[0]
    if cells.min() < 0 or cells.max() >= n:
        raise MeshError(
            f"cell index out of range: valid [0, {n}), got "
            f"[{int(cells.min())}, {int(cells.max())}]"
        )
    degenerate = (
        (cells[:, 0] == cells[:, 1])
        | (cells[:, 1] == cells[:, 2])
        | (cells[:, 0] == cells[:, 2])
    )
    if degenerate.any():
        raise MeshError(f"degenerate triangle at cell {int(np.flatnonzero(degenerate)[0])}")

    node_types = np.asarray(node_types, dtype=np.int64)
    if node_types.shape != (n,):
        raise MeshError("node_types must have one entry per node")
    if world_positions is None:
        world_positions = mesh_positions.copy()
    world_positions = np.asarray(world_positions, dtype=np.float64)
    if world_positions.shape != (n, 2):
        raise MeshError("world_positions must be (N, 2)")

    ab = cells[:, [0, 1]]
    bc = cells[:, [1, 2]]
    ca = cells[:, [2, 0]]
    one_way = np.concatenate([ab, bc, ca], axis=0)
    both = np.concatenate([one_way, one_way[:, ::-1]], axis=0)
    loops = np.stack([np.arange(n), np.arange(n)], axis=1)
    edges = _canonical_edges(np.concatenate([both, loops], axis=0))

    return MeshGraph(
        node_count=n,
        directed_edges=_freeze(edges),
        mesh_positions=_freeze(mesh_positions),
        world_positions=_freeze(world_positions),
        node_types=_freeze(node_types),
        cells=_freeze(cells),
    )


def _adjacency_csr(edges: np.ndarray, n: int):
    """CSR-style (indptr, flat neighbor array) for edges sorted by src."""
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    e = edges[order]
    counts = np.bincount(e[:, 0], minlength=n)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return indptr, e[:, 1].copy()


def _compose_pairs(pairs: np.ndarray, indptr: np.ndarray, adj: np.ndarray) -> np.ndarray:
    """All (s, n) with (s, d) in pairs and n a neighbor of d."""
    d = pairs[:, 1]
    counts = indptr[d + 1] - indptr[d]
    total = int(counts.sum())
    if total == 0:
        return pairs[:0]
    src_rep = np.repeat(pairs[:, 0], counts)
    starts = np.cumsum(counts) - counts
    within = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
    dst_new = adj[np.repeat(indptr[d], counts) + within]
    return np.stack([src_rep, dst_new], axis=1)


def k_hop_closure(graph_edges, k: int) -> np.ndarray:
    """Edges augmented with every pair reachable within k directed hops.

    Self-loops add no reachability: the walk expansion runs on the loop-free
    adjacency and the original edge set (loops included) is unioned back in.
    """
    if k < 1:
        raise MeshError(f"k must be >= 1, got {k}")
    edges = _canonical_edges(_as_edge_array(graph_edges))
    if k == 1 or edges.shape[0] == 0:
        return edges
    n = int(edges.max()) + 1
    loop_free = edges[edges[:, 0] != edges[:, 1]]
    indptr, adj = _adjacency_csr(loop_free, n)

    def keys(p):
        return p[:, 0] * n + p[:, 1]

    reach = loop_free
    reach_keys = keys(reach)
    for _ in range(k - 1):
        new = _compose_pairs(reach, indptr, adj)
        merged = np.unique(np.concatenate([reach_keys, keys(new)]))
        if merged.shape[0] == reach_keys.shape[0]:
            break
        reach_keys = merged
        reach = np.stack([merged // n, merged % n], axis=1)
    combined = np.concatenate([edges, reach], axis=0)
    return _canonical_edges(combined)


def restrict_to_selected(enhanced_edges, selected_mask) -> CoarseGraph:
    """Keep edges whose endpoints are both selected, re-indexed to coarse ids."""
    mask = np.asarray(selected_mask, dtype=bool)
    edges = _as_edge_array(enhanced_edges)
    if edges.size and int(edges.max()) >= mask.shape[0]:
        raise MeshError("edge index exceeds selection mask length")
    fine_index_of = np.flatnonzero(mask).astype(np.int64)
    if fine_index_of.shape[0] == 0:
        raise MeshError("selection mask keeps zero nodes")
    coarse_of = np.full(mask.shape[0], -1, dtype=np.int64)
    coarse_of[fine_index_of] = np.arange(fine_index_of.shape[0])
    keep = mask[edges[:, 0]] & mask[edges[:, 1]]
    coarse_edges = _canonical_edges(coarse_of[edges[keep]])
    return CoarseGraph(
        selected=_freeze(mask),
        fine_index_of=_freeze(fine_index_of),
        directed_edges=_freeze(coarse_edges),
    )


def coarse_graph_view(parent, coarse: CoarseGraph) -> GraphView:
    """Level view of a coarse graph: gathered positions/types, coarse edges."""
    idx = coarse.fine_index_of
    return GraphView(
        node_count=coarse.node_count,
        directed_edges=coarse.directed_edges,
        mesh_positions=_freeze(parent.mesh_positions[idx]),
        world_positions=_freeze(parent.world_positions[idx]),
        node_types=_freeze(parent.node_types[idx]),
    )


def generate_grid_mesh(nx: int, ny: int, jitter_scale: float, rng_seed: int) -> MeshGraph:
    """nx-by-ny grid on the unit square, each quad split into two triangles.

    Interior nodes are perturbed by uniform jitter of magnitude
    jitter_scale * spacing per axis; boundary nodes stay on the square edge
    and are tagged NODE_BOUNDARY. Deterministic for a fixed seed.
    """
    if nx < 2 or ny < 2:
        raise MeshError(f"grid needs nx, ny >= 2, got {nx}x{ny}")
    if not (0.0 <= jitter_scale < 0.5):
        raise MeshError(f"jitter_scale must be in [0, 0.5), got {jitter_scale}")
    rng = np.random.default_rng(rng_seed)
    xs = np.linspace(0.0, 1.0, nx)
    ys = np.linspace(0.0, 1.0, ny)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    positions = np.column_stack([gx.ravel(), gy.ravel()])

    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    on_boundary = (ii == 0) | (ii == nx - 1) | (jj == 0) | (jj == ny - 1)
    boundary = on_boundary.ravel()
    node_types = np.where(boundary, NODE_BOUNDARY, NODE_INTERIOR).astype(np.int64)

    if jitter_scale > 0:
        spacing = np.array([1.0 / (nx - 1), 1.0 / (ny - 1)])
        jitter = rng.uniform(-1.0, 1.0, size=positions.shape) * jitter_scale * spacing
        positions = positions + jitter * (~boundary)[:, None]

    def nid(i, j):
        return i * ny + j

    cells = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            n00, n10 = nid(i, j), nid(i + 1, j)
            n01, n11 = nid(i, j + 1), nid(i + 1, j + 1)
            cells.append([n00, n10, n11])
            cells.append([n00, n11, n01])
    return build_bidirected(np.asarray(cells), positions, node_types)


def compute_edge_offsets(graph, mode: str) -> EdgeOffsets:
    """Relative position features per directed edge (dst minus src)."""
    if mode not in MODES:
        raise MeshError(f"mode must be one of {MODES}, got {mode!r}")
    src = graph.directed_edges[:, 0]
    dst = graph.directed_edges[:, 1]
    dmesh = graph.mesh_positions[dst] - graph.mesh_positions[src]
    cols = [dmesh, np.linalg.norm(dmesh, axis=1, keepdims=True)]
    if mode == "lagrangian":
        dworld = graph.world_positions[dst] - graph.world_positions[src]
        cols += [dworld, np.linalg.norm(dworld, axis=1, keepdims=True)]
    return EdgeOffsets(values=np.concatenate(cols, axis=1), mode=mode)


def connected_components(edges, node_count: int) -> int:
    """Number of weakly connected components (self-loops ignored)."""
    parent = np.arange(node_count)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for s, d in np.asarray(edges, dtype=np.int64):
        if s == d:
            continue
        ra, rb = find(s), find(d)
        if ra != rb:
            parent[rb] = ra
    return int(sum(1 for i in range(node_count) if find(i) == i))


def save_mesh(graph: MeshGraph, mode: str, json_path) -> None:
    """Write JSON manifest + sidecar blob of [mesh_positions | world_positions]."""
    if mode not in MODES:
        raise MeshError(f"mode must be one of {MODES}, got {mode!r}")
    json_path = Path(json_path)
    blob = array_to_blob(graph.mesh_positions, graph.world_positions)
    blob_path = json_path.with_suffix(".blob")
    blob_path.write_bytes(blob)
    manifest = {
        "node_count": graph.node_count,
        "cells": graph.cells.tolist(),
        "node_types": graph.node_types.tolist(),
        "mode": mode,
        "blob_file": blob_path.name,
        "blob_sha256": sha256_bytes(blob),
    }
    write_json(json_path, manifest)


def load_mesh(json_path):
    """Load a mesh manifest + blob pair; returns (MeshGraph, mode)."""
    json_path = Path(json_path)
    manifest = read_json(json_path)
    blob_path = json_path.parent / manifest["blob_file"]
    blob = blob_path.read_bytes()
    if sha256_bytes(blob) != manifest["blob_sha256"]:
        raise MeshError(f"blob sha256 mismatch for {blob_path}")
    n = int(manifest["node_count"])
    both = blob_to_array(blob, (2 * n, 2))
    graph = build_bidirected(
        np.asarray(manifest["cells"], dtype=np.int64),
        both[:n],
        np.asarray(manifest["node_types"], dtype=np.int64),
        world_positions=both[n:],
    )
    return graph, manifest["mode"]

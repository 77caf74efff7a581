"""Pseudo-distances between trajectory samples.

Three modes are provided:

``timestamp``
    ``min(speed * |dt|, cap)``: temporal proximity as a proxy for distance.
``cir``
    squared-cosine dissimilarity of the complex CIRs, averaged over antennas
    and scaled to meters.
``fused-geodesic``
    shortest paths over a k-NN graph whose edges carry
    ``min(timestamp distance, scale * cir dissimilarity)``.

The meter scale for CIR dissimilarities is picked by matching the median of
the timestamp k-NN edge weights with the median of the CIR k-NN edge weights.
"""
from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .errors import ConfigurationError, DegenerateSampleError, UnreachableError
from .sim import CirDataset, complex_taps

MODES = ("timestamp", "cir", "fused-geodesic")
_ROW_BLOCK = 512


def timestamp_distance(t_n, t_k, speed: float = 1.0, cap: float = 5.0):
    if speed <= 0 or cap <= 0:
        raise ConfigurationError("timestamp metric needs speed > 0 and cap > 0")
    return np.minimum(speed * np.abs(np.asarray(t_n) - np.asarray(t_k)), cap)


def cir_dissimilarity(x: np.ndarray, y: np.ndarray) -> float:
    """``1 - |<u, v>|^2 / (|u|^2 |v|^2)`` for the complex taps behind two CIRs."""
    x, y = np.asarray(x), np.asarray(y)
    if x.shape != y.shape:
        raise ConfigurationError(f"tap layouts differ: {x.shape} vs {y.shape}")
    u, v = complex_taps(x), complex_taps(y)
    nu, nv = np.vdot(u, u).real, np.vdot(v, v).real
    if nu == 0 or nv == 0:
        raise DegenerateSampleError("zero-norm CIR")
    return float(np.clip(1.0 - abs(np.vdot(u, v)) ** 2 / (nu * nv), 0.0, 1.0))


def _unit_vectors(dataset: CirDataset) -> np.ndarray:
    """Complex taps normalized to unit length, ``[a_max, M, L]``."""
    u = np.moveaxis(complex_taps(dataset.taps), 1, 0)
    norms = np.linalg.norm(u, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateSampleError("dataset holds a zero-norm CIR")
    return u / norms


def _cir_rows(units: np.ndarray, rows: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
    """Antenna-averaged dissimilarity between ``rows`` and ``cols`` (all columns by default)."""
    right = units if cols is None else units[:, cols]
    sim = np.zeros((len(rows), right.shape[1]))
    for a in range(units.shape[0]):
        sim += np.abs(units[a, rows] @ right[a].conj().T) ** 2
    return np.clip(1.0 - sim / units.shape[0], 0.0, 1.0)


def cir_dissimilarity_matrix(dataset: CirDataset) -> np.ndarray:
    units = _unit_vectors(dataset)
    m = len(dataset)
    out = np.empty((m, m))
    for start in range(0, m, _ROW_BLOCK):
        rows = np.arange(start, min(start + _ROW_BLOCK, m))
        out[rows] = _cir_rows(units, rows)
    np.fill_diagonal(out, 0.0)
    return np.minimum(out, out.T)


@dataclass
class KnnGraph:
    n_nodes: int
    adjacency: list  # per node: dict neighbor -> weight

    def edges(self):
        for i, nbrs in enumerate(self.adjacency):
            for j, w in nbrs.items():
                if i < j:
                    yield i, j, w

    def to_csr(self) -> csr_matrix:
        rows, cols, vals = [], [], []
        for i, nbrs in enumerate(self.adjacency):
            for j, w in nbrs.items():
                rows.append(i)
                cols.append(j)
                # csgraph treats explicit zeros as missing edges
                vals.append(w if w > 0 else np.finfo(float).tiny)
        return csr_matrix((vals, (rows, cols)), shape=(self.n_nodes, self.n_nodes))


def _knn_indices(row: np.ndarray, self_index: int, k: int) -> np.ndarray:
    row = row.copy()
    row[self_index] = np.inf
    # stable sort: equal dissimilarities fall back to the lower index
    return np.argsort(row, kind="stable")[:k]


def build_knn_graph(dissimilarities: np.ndarray, k: int) -> KnnGraph:
    d = np.asarray(dissimilarities, dtype=np.float64)
    n = d.shape[0]
    if d.shape != (n, n):
        raise ConfigurationError(f"dissimilarity matrix must be square, got {d.shape}")
    if not 1 <= k < n:
        raise ConfigurationError(f"k={k} must lie in [1, {n - 1}]")
    adjacency = [dict() for _ in range(n)]
    for i in range(n):
        for j in _knn_indices(d[i], i, k):
            j = int(j)
            adjacency[i][j] = float(d[i, j])
            adjacency[j][i] = float(d[i, j])
    return KnnGraph(n, adjacency)


def geodesic_distance(graph: KnnGraph, n: int, k: int) -> float:
    """Single-pair Dijkstra with early exit."""
    if not (0 <= n < graph.n_nodes and 0 <= k < graph.n_nodes):
        raise ConfigurationError(f"node ids ({n}, {k}) out of range")
    if n == k:
        return 0.0
    best = {n: 0.0}
    heap = [(0.0, n)]
    done = set()
    while heap:
        dist, node = heapq.heappop(heap)
        if node in done:
            continue
        if node == k:
            return dist
        done.add(node)
        for nbr, w in graph.adjacency[node].items():
            cand = dist + w
            if cand < best.get(nbr, np.inf):
                best[nbr] = cand
                heapq.heappush(heap, (cand, nbr))
    raise UnreachableError(f"no path between nodes {n} and {k}")


def geodesic_matrix(graph: KnnGraph) -> np.ndarray:
    """All-pairs shortest paths; unreachable pairs are ``inf``."""
    out = dijkstra(graph.to_csr(), directed=False)
    np.fill_diagonal(out, 0.0)
    return np.minimum(out, out.T)


class PseudoDistanceProvider:
    """Pairwise pseudo-distance oracle over the samples of one dataset."""

    def __init__(self, dataset: CirDataset, mode: str = "fused-geodesic", speed: float = 1.0,
                 cap: float = 5.0, k: int = 10, scale: float | None = None,
                 matrix: np.ndarray | None = None):
        if mode not in MODES:
            raise ConfigurationError(f"unknown metric mode {mode!r}; expected one of {MODES}")
        if speed <= 0 or cap <= 0:
            raise ConfigurationError("metric speed and cap must be positive")
        if len(dataset) < 2:
            raise ConfigurationError("a pseudo-distance needs at least 2 samples")
        self.mode, self.speed, self.cap, self.k = mode, speed, cap, k
        self.timestamps = dataset.timestamps
        self.n = len(dataset)
        self._units = _unit_vectors(dataset) if mode != "timestamp" else None
        self.scale = scale
        self.graph: KnnGraph | None = None
        self._matrix: np.ndarray | None = None
        if mode != "timestamp" and scale is None:
            self.scale = self._median_matched_scale()
        if mode == "fused-geodesic":
            if matrix is not None:
                # reuse a cached all-pairs result; the graph is rebuilt lazily if asked for
                matrix = np.asarray(matrix, dtype=np.float64)
                if matrix.shape != (self.n, self.n):
                    raise ConfigurationError(f"cached matrix {matrix.shape} does not match {self.n} samples")
                self._matrix = matrix
            else:
                self.graph = self._fused_graph()
                self._matrix = geodesic_matrix(self.graph)

    def _kk(self) -> int:
        return min(self.k, self.n - 1)

    def _median_matched_scale(self) -> float:
        kk = self._kk()
        ts_edges, cir_edges = [], []
        for start in range(0, self.n, _ROW_BLOCK):
            rows = np.arange(start, min(start + _ROW_BLOCK, self.n))
            t = timestamp_distance(self.timestamps[rows, None], self.timestamps[None], self.speed, self.cap)
            c = _cir_rows(self._units, rows)
            for r, i in enumerate(rows):
                ts_edges.append(t[r, _knn_indices(t[r], i, kk)])
                cir_edges.append(c[r, _knn_indices(c[r], i, kk)])
        med_t = float(np.median(np.concatenate(ts_edges)))
        med_c = float(np.median(np.concatenate(cir_edges)))
        if med_c <= 0:
            raise DegenerateSampleError("CIR k-NN dissimilarities are all zero; cannot set a scale")
        return med_t / med_c

    def _fused_graph(self) -> KnnGraph:
        kk = self._kk()
        adjacency = [dict() for _ in range(self.n)]
        for start in range(0, self.n, _ROW_BLOCK):
            rows = np.arange(start, min(start + _ROW_BLOCK, self.n))
            w = self._fused_rows(rows)
            for r, i in enumerate(rows):
                for j in _knn_indices(w[r], i, kk):
                    j = int(j)
                    adjacency[i][j] = adjacency[j][i] = float(w[r, j])
        return KnnGraph(self.n, adjacency)

    def _fused_rows(self, rows: np.ndarray) -> np.ndarray:
        t = timestamp_distance(self.timestamps[rows, None], self.timestamps[None], self.speed, self.cap)
        w = np.minimum(t, self.scale * _cir_rows(self._units, rows))
        # keep the weight symmetric: _cir_rows(i, j) and (j, i) can differ in the last bit
        w[np.arange(len(rows)), rows] = 0.0
        return w

    def edge_weight(self, n: int, k: int) -> float:
        """Fused edge weight ``min(timestamp, scale*cir)`` between two samples."""
        return float(self._fused_rows(np.array([n]))[0, k]) if n != k else 0.0

    def distances(self, n_idx, k_idx) -> np.ndarray:
        n_idx, k_idx = np.asarray(n_idx, dtype=np.int64), np.asarray(k_idx, dtype=np.int64)
        if self.mode == "timestamp":
            return timestamp_distance(self.timestamps[n_idx], self.timestamps[k_idx], self.speed, self.cap)
        if self.mode == "cir":
            lo, hi = np.minimum(n_idx, k_idx), np.maximum(n_idx, k_idx)
            sim = np.zeros(len(lo))
            for a in range(self._units.shape[0]):
                sim += np.abs(np.sum(self._units[a, lo] * self._units[a, hi].conj(), axis=-1)) ** 2
            d = self.scale * np.clip(1.0 - sim / self._units.shape[0], 0.0, 1.0)
            return np.where(n_idx == k_idx, 0.0, d)
        return self._matrix[n_idx, k_idx]

    def __call__(self, n: int, k: int) -> float:
        return fused_pseudo_distance(self, n, k)

    def matrix(self) -> np.ndarray:
        if self._matrix is not None:
            return self._matrix
        idx = np.arange(self.n)
        rows = np.repeat(idx, self.n)
        return self.distances(rows, np.tile(idx, self.n)).reshape(self.n, self.n)


def fused_pseudo_distance(provider: PseudoDistanceProvider, n: int, k: int) -> float:
    d = float(provider.distances([n], [k])[0])
    if not np.isfinite(d):
        raise UnreachableError(f"samples {n} and {k} are not connected in the k-NN graph")
    return d


def sample_training_pairs(provider: PseudoDistanceProvider, dataset_size: int, count: int,
                          rng: np.random.Generator, max_rounds: int = 100):
    """Uniform index pairs with ``n != k`` and their pseudo-distances.

    Unreachable pairs are redrawn.  Returns ``(n_idx, k_idx, d)`` arrays.
    """
    if dataset_size < 2:
        raise ConfigurationError("need at least 2 samples to form pairs")
    if count < 1:
        raise ConfigurationError("pair count must be >= 1")
    n_idx = np.empty(count, dtype=np.int64)
    k_idx = np.empty(count, dtype=np.int64)
    d = np.empty(count)
    todo = np.arange(count)
    for _ in range(max_rounds):
        if not len(todo):
            break
        a = rng.integers(0, dataset_size, size=len(todo))
        b = rng.integers(0, dataset_size - 1, size=len(todo))
        b = b + (b >= a)  # uniform over the other samples
        dist = provider.distances(a, b)
        n_idx[todo], k_idx[todo], d[todo] = a, b, dist
        todo = todo[~np.isfinite(dist)]
    if len(todo):
        raise UnreachableError(f"{len(todo)} pairs stayed unreachable after {max_rounds} redraws")
    return n_idx, k_idx, d


def cache_key(dataset_digest: str, mode: str, params: dict) -> str:
    blob = json.dumps({"dataset": dataset_digest, "mode": mode, "params": params}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def save_matrix_cache(path, matrix: np.ndarray, key: str) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, matrix=matrix, key=np.array(key))


def load_matrix_cache(path, key: str) -> np.ndarray | None:
    """Cached matrix, or ``None`` when missing or built from different inputs."""
    path = Path(path)
    if not path.exists():
        return None
    with np.load(path) as npz:
        if str(npz["key"]) != key:
            return None
        return npz["matrix"].copy()

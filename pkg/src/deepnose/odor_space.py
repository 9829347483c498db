"""Isomap-style 3-D odor spaces from descriptor overlap or learned features,
plus rotation-only alignment between two such spaces.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, dijkstra

from .errors import ConvergenceFailure, DegenerateConfiguration
from .molecule_io import DATASETS, LabelTable
from .train_eval import _csv

log = logging.getLogger(__name__)

ZERO_DISTANCE = 1e-12


@dataclass
class WeightedGraph:
    """Undirected graph stored as unique (i < j) edges with positive weights."""
    n: int
    i: np.ndarray
    j: np.ndarray
    w: np.ndarray
    labels: list = field(default_factory=list)  # node ids (cids), optional

    def __post_init__(self):
        self.i = np.asarray(self.i, dtype=np.int64)
        self.j = np.asarray(self.j, dtype=np.int64)
        self.w = np.asarray(self.w, dtype=np.float64)
        if np.any(self.i >= self.j):
            raise ValueError("edges must satisfy i < j (no self-loops)")
        if np.any(self.w <= 0):
            raise ValueError("edge weights must be positive")

    @property
    def n_edges(self) -> int:
        return len(self.w)

    def adjacency(self):
        """Symmetric sparse matrix of weights."""
        a = coo_matrix((np.r_[self.w, self.w], (np.r_[self.i, self.j], np.r_[self.j, self.i])),
                       shape=(self.n, self.n))
        return a.tocsr()

    def components(self) -> np.ndarray:
        return connected_components(self.adjacency(), directed=False)[1]


def inverse_shared(shared: np.ndarray) -> np.ndarray:
    return 1.0 / shared


def semantic_graph(table: LabelTable, dataset: str | int = "leffingwell",
                   weight: Callable[[np.ndarray], np.ndarray] = inverse_shared) -> WeightedGraph:
    """Molecules of one dataset, linked when they share a descriptor.

    Edge weight is ``weight(shared_count)``; the default makes molecules with
    more descriptors in common closer.
    """
    d = DATASETS.index(dataset) if isinstance(dataset, str) else int(dataset)
    rows = np.flatnonzero(table.dataset_mask[:, d])
    block = np.asarray(table.labels)[rows][:, table.vocab.block_slice(d)].astype(np.int32)
    shared = block @ block.T
    i, j = np.nonzero(np.triu(shared, k=1))
    return WeightedGraph(len(rows), i, j, weight(shared[i, j].astype(np.float64)),
                         [table.cids[r] for r in rows])


def pairwise_distances(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sq = np.einsum("ij,ij->i", x, x)
    d2 = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(np.maximum(d2, 0.0))


def _sym_edges(n: int, src: np.ndarray, dst: np.ndarray, dist: np.ndarray):
    """Deduplicate directed picks into unique undirected (i < j) edges."""
    lo, hi = np.minimum(src, dst), np.maximum(src, dst)
    key = lo * n + hi
    _, first = np.unique(key, return_index=True)
    return lo[first], hi[first], dist[first]


def knn_graph(features: np.ndarray, k: int, labels: Sequence | None = None) -> WeightedGraph:
    """Symmetrized k-nearest-neighbor graph (an edge if either end picks the other)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    d = pairwise_distances(features)
    n = len(d)
    k = min(k, n - 1)
    masked = d.copy()
    np.fill_diagonal(masked, np.inf)
    # stable sort so equal distances resolve by node index
    nbrs = np.argsort(masked, axis=1, kind="stable")[:, :k]
    src = np.repeat(np.arange(n), k)
    dst = nbrs.ravel()
    i, j, w = _sym_edges(n, src, dst, d[src, dst])
    return WeightedGraph(n, i, j, np.where(w > 0, w, ZERO_DISTANCE), list(labels or range(n)))


def prune_long_links(g: WeightedGraph, k_prune: int = 10) -> WeightedGraph:
    """Keep each node's ``k_prune`` shortest incident edges; an edge survives if either end keeps it."""
    if k_prune < 1:
        raise ValueError("k_prune must be >= 1")
    n_e = g.n_edges
    ends = np.r_[g.i, g.j]
    eid = np.r_[np.arange(n_e), np.arange(n_e)]
    w = np.r_[g.w, g.w]
    order = np.lexsort((eid, w, ends))  # by node, then weight, then edge id
    ends, eid = ends[order], eid[order]
    starts = np.searchsorted(ends, ends, side="left")
    rank = np.arange(len(ends)) - starts
    keep = np.zeros(n_e, dtype=bool)
    keep[eid[rank < k_prune]] = True
    return WeightedGraph(g.n, g.i[keep], g.j[keep], g.w[keep], g.labels)


@dataclass
class GeodesicResult:
    distances: np.ndarray  # [m, m] over the kept nodes
    nodes: np.ndarray      # indices into the original graph
    excluded: np.ndarray   # indices outside the largest component


def geodesic_distances(g: WeightedGraph, k_prune: int | None = 10) -> GeodesicResult:
    """All-pairs shortest paths on the largest connected component after pruning."""
    if g.n == 0:
        raise ValueError("empty graph")
    if k_prune is not None:
        g = prune_long_links(g, k_prune)
    comp = g.components()
    sizes = np.bincount(comp)
    # ties between equally large components go to the one holding the lowest node index
    big = int(np.argmax(sizes))
    nodes = np.flatnonzero(comp == big)
    excluded = np.flatnonzero(comp != big)
    if len(excluded):
        log.warning("%d node(s) outside the largest component excluded", len(excluded))
    adj = g.adjacency()[nodes][:, nodes]
    dist = dijkstra(adj, directed=False)
    return GeodesicResult(dist, nodes, excluded)


@dataclass
class Embedding3:
    coords: np.ndarray
    eigenvalues: np.ndarray
    stress: float
    iterations: list[int] = field(default_factory=list)


def double_center(D: np.ndarray) -> np.ndarray:
    D2 = np.asarray(D, dtype=np.float64) ** 2
    row = D2.mean(axis=1, keepdims=True)
    return -0.5 * (D2 - row - row.T + D2.mean())


def top_eigenpairs(B: np.ndarray, k: int = 3, tol: float = 1e-9, max_iter: int = 10000):
    """Power iteration with deflation.

    Each run starts from the first basis vector, orthogonalized against the
    pairs found so far. If the deflated operator annihilates that start (it
    can lie entirely in the span of earlier eigenvectors and the null space,
    e.g. with a repeated eigenvalue), the next basis vector is tried; only
    when every start is annihilated is the pair reported as zero.

    Converged when the eigen-residual ``|B v - lam v|`` falls below
    ``tol * max(1, |lam|)``.  Returns (values, vectors[:, k], iterations).
    """
    B = np.asarray(B, dtype=np.float64)
    n = len(B)
    null_tol = tol * max(1.0, float(np.abs(B).max(initial=0.0)))
    vals, vecs, iters = [], [], []
    residuals = []

    def apply(v):
        out = B @ v
        for lam_i, u in zip(vals, vecs):
            out -= lam_i * u * (u @ v)
        return out

    def orthogonal(v):
        for u in vecs:
            v = v - (u @ v) * u
        return v

    for _ in range(min(k, n)):
        v, fallback = None, None
        for start in range(n):
            cand = np.zeros(n)
            cand[start] = 1.0
            cand = orthogonal(cand)
            norm = np.linalg.norm(cand)
            if norm < 1e-8:
                continue
            cand /= norm
            fallback = cand if fallback is None else fallback
            if np.linalg.norm(apply(cand)) > null_tol:
                v = cand
                break
        if v is None:
            # operator is zero on everything left: remaining eigenvalues are 0
            vals.append(0.0)
            vecs.append(fallback)
            iters.append(0)
            residuals.append(0.0)
            continue
        lam, resid, converged, it = 0.0, np.inf, False, 0
        for it in range(1, max_iter + 1):
            w = apply(v)
            lam = float(v @ w)
            resid = float(np.linalg.norm(w - lam * v))
            if resid <= tol * max(1.0, abs(lam)):
                converged = True
                break
            norm = np.linalg.norm(w)
            if norm == 0.0:
                break
            v = w / norm
        residuals.append(resid)
        if not converged:
            raise ConvergenceFailure(f"eigenpair {len(vals) + 1} did not converge in {max_iter} iterations",
                                     residuals)
        vals.append(lam)
        vecs.append(v)
        iters.append(it)
    return np.array(vals), np.column_stack(vecs) if vecs else np.zeros((n, 0)), iters


def stress(D: np.ndarray, X: np.ndarray) -> float:
    """Normalized stress sqrt(sum (d_hat - d)^2 / sum d^2) over the upper triangle."""
    iu = np.triu_indices(len(D), k=1)
    target = np.asarray(D)[iu]
    fitted = pairwise_distances(X)[iu]
    denom = np.sum(target ** 2)
    return float(np.sqrt(np.sum((fitted - target) ** 2) / denom)) if denom > 0 else 0.0


def classical_mds(D: np.ndarray, dim: int = 3, tol: float = 1e-9, max_iter: int = 10000) -> Embedding3:
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValueError("D must be square")
    if not np.allclose(D, D.T) or np.any(np.diag(D) != 0):
        raise ValueError("D must be symmetric with a zero diagonal")
    n = len(D)
    vals, vecs, iters = top_eigenpairs(double_center(D), dim, tol, max_iter)
    if np.any(vals < 0):
        log.warning("negative eigenvalue(s) %s among the top %d set to zero", vals[vals < 0], dim)
        vals = np.maximum(vals, 0.0)
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    coords = np.zeros((n, dim))
    coords[:, :vals.size] = vecs * np.sqrt(vals)
    full = np.zeros(dim)
    full[:vals.size] = vals
    return Embedding3(coords, full, stress(D, coords), iters)


def _centered(a):
    a = np.asarray(a, dtype=np.float64)
    return a - a.mean(axis=0)


def procrustes_rotate(X: np.ndarray, Y: np.ndarray, rank_tol: float = 1e-12) -> np.ndarray:
    """Proper rotation R minimizing ||X R^T - Y|| after centering both sets."""
    X, Y = _centered(X), _centered(Y)
    if X.shape != Y.shape or X.shape[1] != 3 or len(X) < 3:
        raise ValueError("X and Y must both be [n >= 3, 3]")
    U, s, Vt = np.linalg.svd(X.T @ Y)
    if s[0] == 0 or s[1] <= rank_tol * s[0]:
        raise DegenerateConfiguration(f"cross-covariance rank < 2 (singular values {s})")
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    return Vt.T @ np.diag([1.0, 1.0, d]) @ U.T


def alignment_residual(X, Y, R) -> float:
    return float(np.linalg.norm(_centered(X) @ np.asarray(R).T - _centered(Y)))


# ---------------------------------------------------------------------------
# Outputs
# ---------------------------------------------------------------------------

def embedding_csv(blocks: Sequence[tuple[str, Sequence[int], np.ndarray]], provenance=None) -> str:
    """``blocks`` is a list of (source, cids, coords) triples."""
    rows = [(cid, *(f"{v:.9g}" for v in xyz), source)
            for source, cids, coords in blocks for cid, xyz in zip(cids, coords)]
    return _csv(rows, ["cid", "x", "y", "z", "source"], provenance)


def alignment_text(R: np.ndarray, residual: float, meta: dict | None = None) -> str:
    lines = [f"# {k}: {v}" for k, v in (meta or {}).items()]
    lines.append("rotation")
    lines += [" ".join(f"{v:.17g}" for v in row) for row in np.asarray(R)]
    lines.append(f"residual {residual:.17g}")
    return "\n".join(lines) + "\n"


def embed_graph(g: WeightedGraph, k_prune: int | None = 10, dim: int = 3):
    """Geodesic distances + classical MDS; returns (cids, Embedding3, GeodesicResult)."""
    geo = geodesic_distances(g, k_prune)
    emb = classical_mds(geo.distances, dim)
    cids = [g.labels[i] for i in geo.nodes] if g.labels else list(geo.nodes)
    return cids, emb, geo

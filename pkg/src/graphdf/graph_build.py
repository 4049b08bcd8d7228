"""Dependency-graph construction and Laplacian operators.

Edges come from a radial-basis-function kernel on past usage series,
sparsified either by keeping the top-k heaviest neighbors per node or by a
global weight threshold. From the weighted adjacency we derive the
symmetric normalized Laplacian L = I - D^{-1/2} A D^{-1/2}, its rescaled
form with spectrum in [-1, 1], and the row-normalized adjacency D^{-1} A.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import DegenerateGraphWarning, InvalidValue
from .panel_io import TimeSeriesPanel, atomic_write_text


@dataclass(frozen=True)
class Graph:
    """Undirected weighted graph as an (i < j) edge list, weights in (0, 1]."""

    n: int
    edges: tuple[tuple[int, int, float], ...]

    def __post_init__(self):
        if self.n <= 0:
            raise InvalidValue("graph must have at least one node")
        seen = set()
        for i, j, w in self.edges:
            if not 0 <= i < self.n or not 0 <= j < self.n:
                raise InvalidValue(f"edge ({i},{j}) outside node range")
            if i >= j:
                raise InvalidValue(f"edge ({i},{j}) must satisfy i < j")
            if not 0.0 < w <= 1.0:
                raise InvalidValue(f"edge weight {w} outside (0, 1]")
            if (i, j) in seen:
                raise InvalidValue(f"duplicate edge ({i},{j})")
            seen.add((i, j))

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def density(self) -> float:
        if self.n < 2:
            return 0.0
        return 2.0 * len(self.edges) / (self.n * (self.n - 1))

    def adjacency(self) -> sparse.csr_matrix:
        if not self.edges:
            return sparse.csr_matrix((self.n, self.n))
        rows, cols, vals = [], [], []
        for i, j, w in self.edges:
            rows += [i, j]
            cols += [j, i]
            vals += [w, w]
        return sparse.csr_matrix((vals, (rows, cols)), shape=(self.n, self.n))

    def neighbors(self, i: int) -> list[int]:
        out = []
        for a, b, _ in self.edges:
            if a == i:
                out.append(b)
            elif b == i:
                out.append(a)
        return sorted(out)


@dataclass(frozen=True)
class TopK:
    """Keep the k heaviest incident edges per node (union-symmetrized)."""

    k: int

    def __post_init__(self):
        if self.k < 1:
            raise InvalidValue("top-k rule needs k >= 1")


@dataclass(frozen=True)
class Threshold:
    """Keep every pair whose kernel weight reaches theta."""

    theta: float

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise InvalidValue("threshold must lie in (0, 1)")


KeepRule = TopK | Threshold


@dataclass(frozen=True)
class LaplacianBundle:
    """All graph operators the filters need, prebuilt once per graph."""

    laplacian: np.ndarray             # (N, N) symmetric, eigenvalues in [0, 2]
    scaled_laplacian: np.ndarray      # 2 L / lambda_max - I, spectrum in [-1, 1]
    lambda_max: float
    normalized_adjacency: np.ndarray  # D^{-1} A, zero rows for isolated nodes
    degree: np.ndarray                # (N,) weighted degrees
    laplacian_sp: sparse.csr_matrix
    scaled_laplacian_sp: sparse.csr_matrix
    normalized_adjacency_sp: sparse.csr_matrix

    @property
    def n(self) -> int:
        return self.degree.shape[0]


def median_length_scale(targets: np.ndarray, max_pairs: int = 2000, seed: int = 0) -> float:
    """Median pairwise series distance, the default RBF length scale."""
    targets = np.asarray(targets, dtype=np.float64)
    n = targets.shape[0]
    if n < 2:
        return 1.0
    rng = np.random.default_rng(seed)
    total = n * (n - 1) // 2
    if total <= max_pairs:
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    else:
        pairs = set()
        while len(pairs) < max_pairs:
            i, j = rng.integers(0, n, size=2)
            if i != j:
                pairs.add((min(i, j), max(i, j)))
        pairs = sorted(pairs)
    dists = [np.linalg.norm(targets[i] - targets[j]) for i, j in pairs]
    med = float(np.median(dists))
    return med if med > 0 else 1.0


def top_k_for_density(n: int, density: float) -> int:
    """k such that top-k per node lands near the requested edge density."""
    if not 0.0 < density <= 1.0:
        raise InvalidValue("density must lie in (0, 1]")
    return max(1, round(density * (n - 1) / 2.0))


def build_rbf_graph(panel: TimeSeriesPanel, length_scale: float | None = None,
                    keep_rule: KeepRule = TopK(4)) -> Graph:
    """Graph from exp(-||z_i - z_j||^2 / (2 l^2)) on the target series.

    Candidate weights are computed for every node pair, pruned per
    ``keep_rule``, then union-symmetrized. Pruning everything is allowed
    (isolated nodes are handled downstream) but emits a warning.
    """
    targets = panel.targets
    n = targets.shape[0]
    if length_scale is None:
        length_scale = median_length_scale(targets)
    if length_scale <= 0:
        raise InvalidValue("length_scale must be positive")

    sq_norms = np.einsum("ij,ij->i", targets, targets)
    d2 = sq_norms[:, None] + sq_norms[None, :] - 2.0 * targets @ targets.T
    np.maximum(d2, 0.0, out=d2)
    kernel = np.exp(-d2 / (2.0 * length_scale ** 2))
    np.fill_diagonal(kernel, 0.0)

    keep = np.zeros((n, n), dtype=bool)
    if isinstance(keep_rule, TopK):
        k = min(keep_rule.k, n - 1)
        if k > 0:
            # Highest-weight neighbors per row; ties resolved by index order.
            order = np.argsort(-kernel, axis=1, kind="stable")[:, :k]
            rows = np.repeat(np.arange(n), k)
            keep[rows, order.reshape(-1)] = True
        keep |= keep.T
    elif isinstance(keep_rule, Threshold):
        keep = kernel >= keep_rule.theta
    else:
        raise InvalidValue(f"unknown keep rule {keep_rule!r}")

    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if keep[i, j] and kernel[i, j] > 0.0:
                edges.append((i, j, float(kernel[i, j])))
    if not edges:
        warnings.warn("sparsification removed every edge; graph is empty",
                      DegenerateGraphWarning)
    return Graph(n=n, edges=tuple(edges))


def power_iteration(matrix, tol: float = 1e-9, max_iter: int = 1000,
                    seed: int = 0) -> tuple[float, bool]:
    """Largest-magnitude eigenvalue of a symmetric operator.

    Returns (estimate, converged). The start vector is seeded randomly so a
    structured start cannot sit orthogonal to the top eigenvector.
    """
    n = matrix.shape[0]
    if n == 1:
        if sparse.issparse(matrix):
            return float(matrix.toarray()[0, 0]), True
        return float(np.asarray(matrix)[0, 0]), True
    rng = np.random.default_rng(seed)
    vec = rng.standard_normal(n)
    vec /= np.linalg.norm(vec)
    lam = 0.0
    for _ in range(max_iter):
        nxt = matrix @ vec
        norm = np.linalg.norm(nxt)
        if norm == 0.0:
            return 0.0, True
        nxt /= norm
        lam = float(nxt @ (matrix @ nxt))
        if np.linalg.norm(matrix @ nxt - lam * nxt) < tol:
            return lam, True
        vec = nxt
    return lam, False


def laplacian_bundle(graph: Graph, lambda_mode: str = "exact") -> LaplacianBundle:
    """Derive L, the scaled L, and D^{-1} A for a graph.

    Isolated nodes get an identity row in L (and a zero row in D^{-1} A):
    D^{-1/2} is taken as 0 where the degree is 0. ``lambda_mode`` is
    "exact" (power iteration, falling back to 2.0 on non-convergence) or
    "assume_two" (the spectral upper bound of the normalized Laplacian).
    """
    if lambda_mode not in ("exact", "assume_two"):
        raise InvalidValue(f"lambda_mode must be exact/assume_two, got {lambda_mode!r}")
    n = graph.n
    adj = graph.adjacency()
    degree = np.asarray(adj.sum(axis=1)).reshape(-1)
    inv_sqrt = np.zeros(n)
    nz = degree > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(degree[nz])
    adj_dense = adj.toarray()
    lap = np.eye(n) - (inv_sqrt[:, None] * adj_dense) * inv_sqrt[None, :]
    lap = 0.5 * (lap + lap.T)  # kill rounding asymmetry

    inv_deg = np.zeros(n)
    inv_deg[nz] = 1.0 / degree[nz]
    norm_adj = inv_deg[:, None] * adj_dense

    lap_sp = sparse.csr_matrix(lap)
    if lambda_mode == "assume_two":
        lam = 2.0
    else:
        lam, converged = power_iteration(lap_sp)
        if not converged:
            # Safe: scaling by any value >= lambda_max keeps the spectrum
            # inside [-1, 1], and 2 bounds every normalized Laplacian.
            warnings.warn("power iteration did not converge; assuming lambda_max = 2",
                          RuntimeWarning)
            lam = 2.0
        if lam <= 0:
            lam = 2.0
    scaled = 2.0 * lap / lam - np.eye(n)

    return LaplacianBundle(
        laplacian=lap,
        scaled_laplacian=scaled,
        lambda_max=lam,
        normalized_adjacency=norm_adj,
        degree=degree,
        laplacian_sp=lap_sp,
        scaled_laplacian_sp=sparse.csr_matrix(scaled),
        normalized_adjacency_sp=sparse.csr_matrix(norm_adj),
    )


def node_neighborhood(bundle: LaplacianBundle, graph: Graph, i: int,
                      hops: int = 1) -> tuple[list[int], np.ndarray]:
    """Node i plus its <=hops-hop neighbors, and the matching L submatrix.

    The index list starts with i, then neighbors in ascending order; the
    returned matrix is the principal submatrix of L in that row order. An
    isolated node yields ([i], [[1.0]]).
    """
    if not 0 <= i < graph.n:
        raise InvalidValue(f"node index {i} out of range")
    if hops < 1:
        raise InvalidValue("hops must be >= 1")
    adjacency: dict[int, list[int]] = {}
    for a, b, _ in graph.edges:
        adjacency.setdefault(a, []).append(b)
        adjacency.setdefault(b, []).append(a)
    frontier = {i}
    reached = {i}
    for _ in range(hops):
        frontier = {nbr for node in frontier for nbr in adjacency.get(node, ())} - reached
        if not frontier:
            break
        reached |= frontier
    indices = [i] + sorted(reached - {i})
    sub = bundle.laplacian[np.ix_(indices, indices)].copy()
    return indices, sub


def save_graph(graph: Graph, path: str, metadata: dict | None = None) -> None:
    """CSV edge list `src,dst,weight` plus a JSON sidecar with n and metadata."""
    lines = ["src,dst,weight"]
    for i, j, w in graph.edges:
        lines.append(f"{i},{j},{w!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")
    sidecar = {"n": graph.n, "metadata": metadata or {}}
    atomic_write_text(path + ".json", json.dumps(sidecar, sort_keys=True))


def load_graph(path: str) -> Graph:
    with open(path + ".json") as handle:
        sidecar = json.load(handle)
    edges = []
    with open(path) as handle:
        header = handle.readline().strip()
        if header != "src,dst,weight":
            raise InvalidValue(f"unexpected graph header {header!r}")
        for line in handle:
            line = line.strip()
            if not line:
                continue
            src, dst, weight = line.split(",")
            edges.append((int(src), int(dst), float(weight)))
    return Graph(n=int(sidecar["n"]), edges=tuple(edges))

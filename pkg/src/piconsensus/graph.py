"""Communication topologies, graph Laplacians, and their spectral quantities.

Agents are labelled 0..m-1 and communicate over an undirected connected
graph.  The Laplacian L = D - A drives every consensus term in the package;
its block lift applies L to each of the d state coordinates independently
without ever materializing the (md x md) Kronecker product.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ZERO_EIG_RTOL = 1e-10  # eigenvalues below this (relative to lambda_max) count as structural zeros


class DisconnectedGraphError(ValueError):
    """The edge set does not connect all agents."""


def _normalize_edges(m, edges):
    """Validate and canonicalize an iterable of agent pairs as sorted tuples."""
    out = []
    seen = set()
    for pair in edges:
        i, j = int(pair[0]), int(pair[1])
        if i == j:
            raise ValueError(f"self-loop ({i},{i}) not allowed")
        if not (0 <= i < m and 0 <= j < m):
            raise ValueError(f"edge ({i},{j}) out of range for m={m}")
        e = (min(i, j), max(i, j))
        if e in seen:
            raise ValueError(f"duplicate edge {e}")
        seen.add(e)
        out.append(e)
    return tuple(sorted(out))


def _is_connected(m, edges):
    if m <= 1:
        return True
    adj = [[] for _ in range(m)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for w in adj[u]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return len(seen) == m


@dataclass(frozen=True)
class Topology:
    """Undirected communication graph over agents 0..m-1.

    Edges are unordered pairs stored as sorted tuples; no self-loops or
    duplicates.  Construction verifies connectivity by traversal whenever
    m >= 2, so every Topology in circulation is usable by the algorithms.
    """

    m: int
    edges: tuple[tuple[int, int], ...]
    kind: str = "custom"

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("need at least one agent")
        object.__setattr__(self, "edges", _normalize_edges(self.m, self.edges))
        if not _is_connected(self.m, self.edges):
            raise DisconnectedGraphError(
                f"edge set does not connect all {self.m} agents: {self.edges}"
            )

    def neighbors(self, i):
        """Sorted neighbor list of agent i."""
        out = []
        for a, b in self.edges:
            if a == i:
                out.append(b)
            elif b == i:
                out.append(a)
        return sorted(out)

    def degrees(self):
        deg = np.zeros(self.m, dtype=int)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    def to_edge_list_text(self):
        """Serialize as text: first line m, then one 'i j' pair per line."""
        lines = [str(self.m)]
        lines += [f"{i} {j}" for i, j in self.edges]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_edge_list_text(cls, text):
        rows = [ln for ln in (s.strip() for s in text.splitlines()) if ln]
        if not rows:
            raise ValueError("empty edge-list text")
        m = int(rows[0])
        edges = []
        for ln in rows[1:]:
            parts = ln.split()
            if len(parts) != 2:
                raise ValueError(f"malformed edge line: {ln!r}")
            edges.append((int(parts[0]), int(parts[1])))
        return cls(m=m, edges=tuple(edges))


def build_topology(kind, m, custom_edges=None):
    """Construct one of the canonical topologies, or a custom one.

    Parameters
    ----------
    kind : str
        One of "ring", "path", "complete", "star", "custom".
    m : int
        Number of agents (>= 1).
    custom_edges : iterable of (i, j), optional
        Only with kind="custom".
    """
    if m < 1:
        raise ValueError("need at least one agent")
    if custom_edges is not None and kind != "custom":
        raise ValueError("custom_edges only valid with kind='custom'")
    if kind == "ring":
        edges = {(min(i, (i + 1) % m), max(i, (i + 1) % m)) for i in range(m) if m > 1}
    elif kind == "path":
        edges = {(i, i + 1) for i in range(m - 1)}
    elif kind == "complete":
        edges = {(i, j) for i in range(m) for j in range(i + 1, m)}
    elif kind == "star":
        edges = {(0, i) for i in range(1, m)}
    elif kind == "custom":
        if custom_edges is None:
            raise ValueError("kind='custom' requires custom_edges")
        edges = custom_edges
    else:
        raise ValueError(f"unknown topology kind {kind!r}")
    return Topology(m=m, edges=tuple(edges), kind=kind)


@dataclass
class LaplacianOperator:
    """Dense Laplacian L of a topology plus its blockwise Kronecker lift.

    ``apply`` acts on stacked vectors x in R^{md} as (L kron I_d) x, done
    block-by-block; the lifted matrix itself is never formed.  The smallest
    nonzero and the largest eigenvalue are cached at construction.
    """

    L: np.ndarray
    d: int
    lam_min_nonzero: float = field(init=False)
    lam_max: float = field(init=False)

    def __post_init__(self):
        self.L = np.asarray(self.L, dtype=float)
        if self.d < 1:
            raise ValueError("block dimension d must be >= 1")
        eigs = np.linalg.eigvalsh(self.L)
        self.lam_max = float(eigs[-1])
        tol = ZERO_EIG_RTOL * max(self.lam_max, 1.0)
        nonzero = eigs[eigs > tol]
        self.lam_min_nonzero = float(nonzero[0]) if nonzero.size else 0.0
        self._n_zero_eigs = int(np.sum(eigs <= tol))

    @property
    def m(self):
        return self.L.shape[0]

    def apply(self, x):
        """Blockwise product (L kron I_d) @ x for stacked x in R^{md}."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.m * self.d,):
            raise ValueError(f"expected stacked vector of length {self.m * self.d}")
        return (self.L @ x.reshape(self.m, self.d)).ravel()


def laplacian(topology, d=1):
    """Laplacian operator (degree matrix minus adjacency) of a topology."""
    m = topology.m
    L = np.zeros((m, m))
    for i, j in topology.edges:
        L[i, j] = L[j, i] = -1.0
        L[i, i] += 1.0
        L[j, j] += 1.0
    return LaplacianOperator(L=L, d=d)


def spectral_interval(lap):
    """Smallest nonzero and largest Laplacian eigenvalue.

    Eigenvalues below the structural-zero tolerance are attributed to the
    all-ones null space; more than one such eigenvalue means the graph is
    disconnected.
    """
    if lap._n_zero_eigs > 1:
        raise DisconnectedGraphError(
            f"{lap._n_zero_eigs} near-zero Laplacian eigenvalues: graph is disconnected"
        )
    if lap.lam_min_nonzero <= 0.0:
        raise ValueError("Laplacian has no nonzero eigenvalue (single agent?)")
    return lap.lam_min_nonzero, lap.lam_max


def _sqrt_spd(block, tol=1e-10):
    """Symmetric square root of an SPD matrix via eigendecomposition."""
    block = np.asarray(block, dtype=float)
    if not np.allclose(block, block.T, atol=tol * max(1.0, abs(block).max())):
        raise ValueError("preconditioner block is not symmetric")
    w, V = np.linalg.eigh(block)
    if w[0] <= 0.0:
        raise ValueError(f"preconditioner block is not positive definite (lambda_min={w[0]:g})")
    return (V * np.sqrt(w)) @ V.T


def effective_connectivity(h, beta, K, lap):
    """Smallest nonzero eigenvalue of h*beta*K*(L kron I).

    K may be None (identity), an (m, d, d) array of SPD blocks, or any
    object exposing a ``blocks`` attribute of that shape.  K L-tilde is
    similar to the symmetric PSD matrix K^{1/2} L-tilde K^{1/2}, whose
    blocks are L[i,j] * K_i^{1/2} K_j^{1/2}; that similar matrix is
    assembled blockwise so the Kronecker lift itself is never formed.
    """
    if h <= 0 or beta <= 0:
        raise ValueError("h and beta must be positive")
    if K is None or getattr(K, "is_identity", False):
        lam, _ = spectral_interval(lap)
        return h * beta * lam

    blocks = getattr(K, "blocks", K)
    blocks = np.asarray(blocks, dtype=float)
    m, d = lap.m, lap.d
    if blocks.shape != (m, d, d):
        raise ValueError(f"expected {m} preconditioner blocks of shape ({d},{d})")
    roots = [_sqrt_spd(b) for b in blocks]

    S = np.zeros((m * d, m * d))
    for i in range(m):
        for j in range(m):
            if lap.L[i, j] != 0.0:
                S[i * d:(i + 1) * d, j * d:(j + 1) * d] = lap.L[i, j] * (roots[i] @ roots[j])
    eigs = np.linalg.eigvalsh(S)
    tol = ZERO_EIG_RTOL * max(eigs[-1], 1.0)
    nonzero = eigs[eigs > tol]
    if nonzero.size == 0:
        raise ValueError("K L-tilde has no nonzero eigenvalue")
    return h * beta * float(nonzero[0])

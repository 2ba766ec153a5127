"""Complete landmark graphs, minimum-cost spanning trees, and
backtracking traversal sequences.

A set of 2-D landmarks is treated as the vertex set of a weighted
complete graph. A weight vector over the canonical edge enumeration
induces a unique minimum-cost spanning tree (weight ties are broken by
canonical edge index, so the tree is a pure function of the weights and
independent of the seed vertex), and a preorder walk that re-emits a node
on every return from a child turns the tree into the token sequence
consumed by the sequence models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Landmark",
    "LandmarkSet",
    "SpanningTree",
    "TraversalSequence",
    "num_edges",
    "edge_index",
    "edge_pair",
    "check_weights",
    "prim_mst",
    "preorder_traverse",
    "tree_from_sequence",
    "medoid_root",
    "tree_to_dot",
]


@dataclass(frozen=True)
class Landmark:
    """One keypoint: contiguous integer id plus coordinates in the unit square."""

    index: int
    x: float
    y: float


class LandmarkSet:
    """Ordered, index-aligned collection of landmarks.

    Coordinates are stored as an immutable (n, 2) float array; row k is
    landmark k. All coordinates must lie in [0, 1].
    """

    def __init__(self, coords) -> None:
        coords = np.array(coords, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError(f"expected (n, 2) coordinates, got shape {coords.shape}")
        if coords.shape[0] < 1:
            raise ValueError("landmark set must contain at least one point")
        if not np.all(np.isfinite(coords)):
            raise ValueError("landmark coordinates must be finite")
        if coords.min() < -1e-9 or coords.max() > 1.0 + 1e-9:
            raise ValueError("landmark coordinates must lie in [0, 1]")
        coords = np.clip(coords, 0.0, 1.0)
        coords.flags.writeable = False
        self.coords = coords

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def points(self) -> list[Landmark]:
        return [Landmark(i, float(x), float(y)) for i, (x, y) in enumerate(self.coords)]

    def __len__(self) -> int:
        return self.n

    def __repr__(self) -> str:
        return f"LandmarkSet(n={self.n})"


def num_edges(n: int) -> int:
    """Edge count of the complete graph on n vertices."""
    return n * (n - 1) // 2


def edge_index(i: int, j: int, n: int) -> int:
    """Canonical flat index of the unordered vertex pair {i, j}.

    Pairs are enumerated lexicographically with i < j, so (0, 1) -> 0 and
    (n-2, n-1) -> n(n-1)/2 - 1. Symmetric in i and j.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    if not (0 <= i < n and 0 <= j < n):
        raise ValueError(f"vertex out of range: ({i}, {j}) for n={n}")
    if i == j:
        raise ValueError("self-loops have no edge index")
    if i > j:
        i, j = j, i
    return i * n - i * (i + 1) // 2 + (j - i - 1)


def edge_pair(k: int, n: int) -> tuple[int, int]:
    """Inverse of edge_index: flat index -> (i, j) with i < j."""
    if not 0 <= k < num_edges(n):
        raise ValueError(f"edge index {k} out of range for n={n}")
    i = 0
    while k >= n - i - 1:
        k -= n - i - 1
        i += 1
    return i, i + 1 + k


def check_weights(w, n: int, bounds: tuple[float, float] | None = None) -> np.ndarray:
    """Validate an edge-weight vector for the complete graph on n vertices."""
    w = np.asarray(w, dtype=float)
    if w.shape != (num_edges(n),):
        raise ValueError(
            f"weight vector must have length {num_edges(n)} for n={n}, got shape {w.shape}"
        )
    if not np.all(np.isfinite(w)):
        raise ValueError("edge weights must be finite")
    if bounds is not None:
        lo, hi = bounds
        if w.min() < lo - 1e-12 or w.max() > hi + 1e-12:
            raise ValueError(f"edge weights must lie within [{lo}, {hi}]")
    return w


@dataclass(frozen=True)
class SpanningTree:
    """Rooted spanning tree with deterministic (ascending) child order."""

    n: int
    edges: tuple[tuple[int, int], ...]
    root: int
    children: dict[int, tuple[int, ...]]

    @classmethod
    def from_edges(cls, n: int, edges, root: int) -> "SpanningTree":
        if n < 1:
            raise ValueError("tree must have at least one node")
        if not 0 <= root < n:
            raise ValueError(f"root {root} out of range for n={n}")
        canon = sorted({(min(i, j), max(i, j)) for i, j in edges})
        if len(canon) != n - 1:
            raise ValueError(f"a tree on {n} nodes needs {n - 1} distinct edges, got {len(canon)}")
        adjacency: dict[int, list[int]] = {v: [] for v in range(n)}
        for i, j in canon:
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise ValueError(f"invalid edge ({i}, {j}) for n={n}")
            adjacency[i].append(j)
            adjacency[j].append(i)
        children: dict[int, tuple[int, ...]] = {}
        seen = {root}
        queue = [root]
        while queue:
            node = queue.pop()
            kids = tuple(v for v in sorted(adjacency[node]) if v not in seen)
            children[node] = kids
            seen.update(kids)
            queue.extend(kids)
        if len(seen) != n:
            raise ValueError("edge set is not connected")
        return cls(n, tuple(canon), root, children)

    def weight(self, w) -> float:
        """Total weight of the tree under an edge-weight vector."""
        w = check_weights(w, self.n)
        return float(sum(w[edge_index(i, j, self.n)] for i, j in self.edges))


@dataclass(frozen=True)
class TraversalSequence:
    """Euler-tour token list: node ids emitted on arrival and on each backtrack."""

    tokens: tuple[int, ...]

    @property
    def length(self) -> int:
        return len(self.tokens)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.tokens, dtype=np.int64)


def prim_mst(n: int, w, root: int = 0) -> SpanningTree:
    """Minimum-cost spanning tree of the weighted complete graph.

    Deterministic: among frontier edges of equal weight the one with the
    smallest canonical edge index wins. That rule is a strict total order
    on edges, so the minimum tree is unique and does not depend on which
    vertex the construction starts from.
    """
    if n < 2:
        raise ValueError("spanning trees need at least two vertices")
    w = check_weights(w, n)
    if not 0 <= root < n:
        raise ValueError(f"root {root} out of range for n={n}")

    verts = np.arange(n)
    in_tree = np.zeros(n, dtype=bool)
    parent = np.full(n, -1, dtype=np.int64)
    best_w = np.full(n, np.inf)
    best_k = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)

    def attach(u: int) -> None:
        # relax frontier costs through the freshly added vertex u
        in_tree[u] = True
        out = verts[~in_tree]
        if out.size == 0:
            return
        lo = np.minimum(out, u)
        hi = np.maximum(out, u)
        k = lo * n - lo * (lo + 1) // 2 + (hi - lo - 1)
        cand = w[k]
        better = (cand < best_w[out]) | ((cand == best_w[out]) & (k < best_k[out]))
        upd = out[better]
        best_w[upd] = cand[better]
        best_k[upd] = k[better]
        parent[upd] = u

    attach(root)
    edges = []
    for _ in range(n - 1):
        out = verts[~in_tree]
        pick = out[np.lexsort((best_k[out], best_w[out]))[0]]
        v = int(pick)
        edges.append((min(int(parent[v]), v), max(int(parent[v]), v)))
        attach(v)
    return SpanningTree.from_edges(n, edges, root)


def preorder_traverse(tree: SpanningTree) -> TraversalSequence:
    """Depth-first walk of the tree, children in ascending index order.

    Every node is emitted on first arrival and again each time the walk
    returns to it from a child, so a tree on n nodes yields exactly
    2n - 1 tokens that begin and end at the root.
    """
    tokens = [tree.root]
    path = [tree.root]
    stack = [iter(tree.children[tree.root])]
    while stack:
        child = next(stack[-1], None)
        if child is None:
            stack.pop()
            path.pop()
            if path:
                tokens.append(path[-1])
            continue
        tokens.append(child)
        path.append(child)
        stack.append(iter(tree.children[child]))
    return TraversalSequence(tuple(tokens))


def tree_from_sequence(tokens, n: int) -> SpanningTree:
    """Rebuild the tree whose backtracking walk produced `tokens`.

    Consecutive tokens of a valid traversal are exactly the tree edges, so
    the edge set, root, and child structure are all recoverable.
    """
    toks = [int(t) for t in tokens]
    if len(toks) != 2 * n - 1:
        raise ValueError(f"traversal of an n={n} tree must have {2 * n - 1} tokens, got {len(toks)}")
    if toks[0] != toks[-1]:
        raise ValueError("traversal must start and end at the root")
    if any(t < 0 or t >= n for t in toks):
        raise ValueError("traversal token out of range")
    edges = {(min(a, b), max(a, b)) for a, b in zip(toks, toks[1:])}
    return SpanningTree.from_edges(n, edges, toks[0])


def medoid_root(landmarks: LandmarkSet) -> int:
    """Index minimizing the summed Euclidean distance to all other landmarks.

    Ties go to the smallest index so the root is reproducible.
    """
    pts = landmarks.coords
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    return int(np.argmin(dist.sum(axis=1)))


def tree_to_dot(tree: SpanningTree, landmarks: LandmarkSet) -> str:
    """Serialize a tree as DOT text with node positions from the landmarks.

    Deterministic layout: nodes ascending, edges in canonical order,
    two-space indentation, LF line endings.
    """
    if landmarks.n != tree.n:
        raise ValueError(f"landmark count {landmarks.n} does not match tree size {tree.n}")
    lines = ["graph tree {"]
    for i, (x, y) in enumerate(landmarks.coords):
        lines.append(f'  {i} [pos="{x:.6g},{y:.6g}"]')
    for i, j in tree.edges:
        lines.append(f"  {i} -- {j}")
    lines.append("}")
    return "\n".join(lines) + "\n"

"""
HDBSCAN on a precomputed distance matrix, reduced to "give me the largest cluster".

Steps: core distances -> mutual reachability -> minimum spanning tree ->
cluster hierarchy -> condensed tree -> excess-of-mass selection -> labels.

Edges of equal weight are merged in one step, so the hierarchy (and the
result) does not depend on which of several equal-weight spanning trees
Prim's algorithm happens to return.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from simulation.errors import LabError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClusterSelection:
    members: Tuple[int, ...]
    degenerate: bool = False


def core_distances(distances: np.ndarray, min_samples: int) -> np.ndarray:
    """
    Distance to the min_samples-th nearest point counting the point itself,
    with min_samples capped at n - 1.
    """
    n = distances.shape[0]
    k = max(min(n - 1, min_samples) - 1, 0)
    return np.sort(distances, axis=1)[:, k]


def mutual_reachability(distances: np.ndarray, min_samples: int) -> np.ndarray:
    core = core_distances(distances, min_samples)
    mr = np.maximum(distances, np.maximum(core[:, None], core[None, :]))
    np.fill_diagonal(mr, 0.0)
    return mr


def minimum_spanning_tree(weights: np.ndarray) -> List[Tuple[int, int, float]]:
    """Dense Prim's algorithm from vertex 0; ties go to the lowest vertex index."""
    n = weights.shape[0]
    if n < 2:
        return []
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    best = weights[0].astype(np.float64).copy()
    parent = np.zeros(n, dtype=np.int64)
    edges = []
    for _ in range(n - 1):
        j = int(np.argmin(np.where(in_tree, np.inf, best)))
        edges.append((int(parent[j]), j, float(best[j])))
        in_tree[j] = True
        closer = (~in_tree) & (weights[j] < best)
        best[closer] = weights[j][closer]
        parent[closer] = j
    return edges


class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


@dataclass
class _Node:
    children: List[int]
    distance: float
    points: List[int]


def build_hierarchy(n: int, mst: List[Tuple[int, int, float]]) -> Dict[int, _Node]:
    """
    Merge tree over the spanning tree. Leaves are 0..n-1; every internal node
    joins all components linked by edges of one weight.
    """
    nodes: Dict[int, _Node] = {i: _Node([], 0.0, [i]) for i in range(n)}
    owner = list(range(n))  # component representative -> node id
    components = _DisjointSet(n)
    next_id = n
    weights = sorted({w for _, _, w in mst})
    for w in weights:
        group = [(a, b) for a, b, ew in mst if ew == w]
        before = {}
        for a, b in group:
            for v in (a, b):
                r = components.find(v)
                before.setdefault(r, owner[r])
        for a, b in group:
            components.union(a, b)
        merged: Dict[int, List[int]] = {}
        for r, node_id in before.items():
            merged.setdefault(components.find(r), []).append(node_id)
        for root in sorted(merged):
            kids = sorted(merged[root], key=lambda k: min(nodes[k].points))
            points = sorted(p for k in kids for p in nodes[k].points)
            nodes[next_id] = _Node(kids, w, points)
            owner[root] = next_id
            next_id += 1
    return nodes


def _lambda(distance: float) -> float:
    return np.inf if distance == 0 else 1.0 / distance


def condense(nodes: Dict[int, _Node], n: int, min_cluster_size: int):
    """
    Condensed tree rows (parent_cluster, child, lambda, size). A child is a
    point (< n) falling out of its cluster or a new cluster label (>= n).
    """
    root = max(nodes)
    label = {root: n}
    next_label = n + 1
    rows = []
    queue = [root]
    while queue:
        node_id = queue.pop(0)
        node = nodes[node_id]
        if not node.children:
            continue
        lam = _lambda(node.distance)
        big = [k for k in node.children if len(nodes[k].points) >= min_cluster_size]
        small = [k for k in node.children if len(nodes[k].points) < min_cluster_size]
        for k in small:
            for p in nodes[k].points:
                rows.append((label[node_id], p, lam, 1))
        if len(big) == 1:
            label[big[0]] = label[node_id]
            queue.append(big[0])
        elif len(big) >= 2:
            for k in big:
                label[k] = next_label
                rows.append((label[node_id], next_label, lam, len(nodes[k].points)))
                next_label += 1
                queue.append(k)
    return rows


def _stabilities(rows, root_label: int) -> Dict[int, float]:
    birth = {root_label: 0.0}
    for parent, child, lam, size in rows:
        if size > 1:
            birth[child] = lam
    stability = {c: 0.0 for c in birth}
    for parent, child, lam, size in rows:
        gain = 0.0 if lam == birth[parent] else lam - birth[parent]
        stability[parent] += gain * size
    return stability


def select_clusters(rows, root_label: int) -> List[int]:
    """Excess-of-mass selection with the root allowed to win."""
    stability = _stabilities(rows, root_label)
    children: Dict[int, List[int]] = {c: [] for c in stability}
    for parent, child, _, size in rows:
        if size > 1:
            children[parent].append(child)
    chosen = {c: True for c in stability}
    for node in sorted(stability, reverse=True):
        below = sum(stability[c] for c in children[node])
        if children[node] and below > stability[node]:
            chosen[node] = False
            stability[node] = below
        else:
            stack = list(children[node])
            while stack:
                c = stack.pop()
                chosen[c] = False
                stack.extend(children[c])
    return sorted(c for c, keep in chosen.items() if keep)


def label_points(rows, n: int, selected: List[int]) -> np.ndarray:
    """Cluster label per point, -1 for noise."""
    root_label = n
    parent_of = {child: parent for parent, child, _, size in rows if size > 1}
    chosen = set(selected)
    root_max = max((lam for parent, _, lam, _ in rows if parent == root_label), default=np.inf)
    labels = np.full(n, -1, dtype=np.int64)
    for parent, child, lam, size in rows:
        if size != 1:
            continue
        c = parent
        while c not in chosen and c != root_label:
            c = parent_of[c]
        if c in chosen and c != root_label:
            labels[child] = c
        elif c == root_label and root_label in chosen and lam >= root_max:
            # root selected: only points that stay until its last split belong to it
            labels[child] = c
    return labels


def hdbscan_labels(distances: np.ndarray, min_cluster_size: int) -> np.ndarray:
    d = np.asarray(distances, dtype=np.float64)
    n = d.shape[0]
    mr = mutual_reachability(d, min_cluster_size)
    nodes = build_hierarchy(n, minimum_spanning_tree(mr))
    rows = condense(nodes, n, min_cluster_size)
    return label_points(rows, n, select_clusters(rows, n))


def hdbscan_largest_cluster(distances: np.ndarray, min_cluster_size: int) -> ClusterSelection:
    """
    Members of the largest flat HDBSCAN cluster (min_samples == min_cluster_size).
    Flat clusters come from excess-of-mass selection with the root eligible,
    which agrees with leaf selection whenever min_cluster_size > n / 2.
    Ties go to the cluster holding the smallest index. Fewer points than
    min_cluster_size returns everything flagged degenerate.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ShapeError(f"distance matrix must be square, got {d.shape}")
    if min_cluster_size < 2:
        raise LabError(f"min_cluster_size must be at least 2, got {min_cluster_size}")
    n = d.shape[0]
    if n < min_cluster_size:
        logger.info("hdbscan: %d points < min_cluster_size %d, keeping all", n, min_cluster_size)
        return ClusterSelection(tuple(range(n)), degenerate=True)
    labels = hdbscan_labels(d, min_cluster_size)
    groups: Dict[int, List[int]] = {}
    for i, lab in enumerate(labels):
        if lab >= 0:
            groups.setdefault(int(lab), []).append(i)
    if not groups:
        return ClusterSelection(tuple(range(n)), degenerate=True)
    best = min(groups.values(), key=lambda members: (-len(members), members[0]))
    return ClusterSelection(tuple(best))

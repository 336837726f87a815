"""Collapse extracted mentions into open-world entities.

A Siamese scorer (one shared projection applied to both inputs) turns a
mention-embedding pair into a link probability; pairs scoring above a
threshold become edges of a mention graph; Louvain community detection
(Blondel et al., 2008) partitions the graph; each community becomes an
entity named after its most frequent surface.

Determinism notes: Louvain's result depends on visiting order, so nodes
are always visited in ascending id order and ties in the gain comparison
break toward the smallest community id. Mentions with identical
normalized surfaces are linked with weight 1 regardless of the scorer, as
the unambiguous base case of "same concept".
"""

from __future__ import annotations

import hashlib
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .documents import Mention
from .mathutil import bce_from_logits, sigmoid
from .textnorm import normalize_text

__all__ = [
    "ClusteringError",
    "MentionGraph",
    "OpenEntity",
    "Partition",
    "SiameseParams",
    "build_graph",
    "canonicalize",
    "link_score",
    "louvain",
    "modularity",
    "train_siamese",
]

BLOCK_PREFIX_LEN = 4


class ClusteringError(ValueError):
    pass


@dataclass
class SiameseParams:
    """Shared projection plus sigmoid calibration for pair scoring.

    Defaults map cosine 0.5 to probability 0.5 (alpha 8, beta -4), which
    makes the link threshold directly interpretable as a cosine cut.
    """

    P: np.ndarray
    alpha: float = 8.0
    beta: float = -4.0

    def __post_init__(self) -> None:
        if self.P.ndim != 2 or self.P.shape[0] != self.P.shape[1]:
            raise ClusteringError("projection P must be square")
        if not (np.all(np.isfinite(self.P)) and np.isfinite(self.alpha) and np.isfinite(self.beta)):
            raise ClusteringError("siamese parameters must be finite")
        if self.alpha <= 0:
            raise ClusteringError("alpha must be positive")

    @classmethod
    def identity(cls, dim: int) -> "SiameseParams":
        return cls(P=np.eye(dim))

    def to_dict(self) -> dict:
        return {"P": self.P.tolist(), "alpha": self.alpha, "beta": self.beta}

    @classmethod
    def from_dict(cls, obj: dict) -> "SiameseParams":
        return cls(
            P=np.asarray(obj["P"], dtype=np.float64),
            alpha=float(obj["alpha"]),
            beta=float(obj["beta"]),
        )


def _projected_cosine(a: np.ndarray, b: np.ndarray, P: np.ndarray) -> float:
    u = P @ a
    v = P @ b
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(u @ v / (nu * nv))


def link_score(a: np.ndarray, b: np.ndarray, params: SiameseParams) -> float:
    """sigmoid(alpha * cos(Pa, Pb) + beta); symmetric because P is shared."""
    if a.shape != b.shape or a.shape[0] != params.P.shape[1]:
        raise ClusteringError("embedding dims do not match projection")
    return float(sigmoid(params.alpha * _projected_cosine(a, b, params.P) + params.beta))


def train_siamese(
    pairs: Sequence[tuple[np.ndarray, np.ndarray, bool]],
    lr: float = 0.05,
    epochs: int = 100,
    seed: int = 0,
) -> SiameseParams:
    """Gradient descent on the BCE of link_score over labeled pairs.

    P starts at identity plus seeded noise. A corpus with only one label
    is degenerate: a warning is issued and only beta is fitted.
    """
    if not pairs:
        raise ClusteringError("no training pairs")
    labels = [bool(same) for _, _, same in pairs]
    degenerate = all(labels) or not any(labels)
    if degenerate:
        warnings.warn(
            "all training pairs share one label; fitting beta only",
            stacklevel=2,
        )
    dim = pairs[0][0].shape[0]
    rng = np.random.default_rng(seed)
    params = SiameseParams(
        P=np.eye(dim) + rng.normal(0.0, 0.01, size=(dim, dim)),
        alpha=8.0,
        beta=-4.0,
    )
    n = len(pairs)
    for _ in range(epochs):
        dP = np.zeros_like(params.P)
        dalpha = 0.0
        dbeta = 0.0
        for a, b, same in pairs:
            u = params.P @ a
            v = params.P @ b
            nu = np.linalg.norm(u)
            nv = np.linalg.norm(v)
            if nu == 0.0 or nv == 0.0:
                c = 0.0
            else:
                c = float(u @ v / (nu * nv))
            s = float(sigmoid(params.alpha * c + params.beta))
            dz = (s - float(same)) / n
            dbeta += dz
            dalpha += dz * c
            if nu > 0.0 and nv > 0.0:
                dc = dz * params.alpha
                du = dc * (v / (nu * nv) - c * u / (nu * nu))
                dv = dc * (u / (nu * nv) - c * v / (nv * nv))
                dP += np.outer(du, a) + np.outer(dv, b)
        if not degenerate:
            params.P -= lr * dP
            params.alpha -= lr * dalpha
        params.beta -= lr * dbeta
        if params.alpha <= 0.0:  # keep the calibration well-formed
            params.alpha = 1e-6
    return params


@dataclass(frozen=True)
class MentionGraph:
    """Weighted undirected graph over mention indices, no self-loops."""

    nodes: list[int]
    edges: list[tuple[int, int, float]]
    block_keys: list[str]

    def __post_init__(self) -> None:
        seen: set[tuple[int, int]] = set()
        for i, j, w in self.edges:
            if i >= j:
                raise ClusteringError(f"edge ({i}, {j}) must satisfy i < j")
            if (i, j) in seen:
                raise ClusteringError(f"duplicate edge ({i}, {j})")
            seen.add((i, j))
            if not 0.0 < w <= 1.0:
                raise ClusteringError(f"edge weight {w} outside (0, 1]")


def build_graph(
    mentions: Sequence[Mention],
    params: SiameseParams | None = None,
    link_threshold: float = 0.8,
    blocking: str = "none",
) -> MentionGraph:
    """Score mention pairs and keep edges at or above the threshold.

    With ``blocking="normalized_surface"`` only pairs sharing a normalized
    surface prefix (first 4 characters) are scored, which bounds pair
    counts on large corpora. Pairs with exactly equal normalized surfaces
    are linked with weight 1 in either mode, bypassing the scorer.
    """
    if blocking not in ("none", "normalized_surface"):
        raise ClusteringError(f"unknown blocking mode {blocking!r}")
    for i, m in enumerate(mentions):
        if m.embedding is None:
            raise ClusteringError(f"mention {i} has no embedding")
    if params is None and mentions:
        params = SiameseParams.identity(mentions[0].embedding.shape[0])
    normalized = [normalize_text(m.surface) for m in mentions]
    block_keys = [s[:BLOCK_PREFIX_LEN] for s in normalized]
    nodes = list(range(len(mentions)))
    edges: list[tuple[int, int, float]] = []
    for i in range(len(mentions)):
        for j in range(i + 1, len(mentions)):
            if normalized[i] == normalized[j]:
                edges.append((i, j, 1.0))
                continue
            if blocking == "normalized_surface" and block_keys[i] != block_keys[j]:
                continue
            w = link_score(mentions[i].embedding, mentions[j].embedding, params)
            if w >= link_threshold:
                edges.append((i, j, w))
    return MentionGraph(nodes=nodes, edges=edges, block_keys=block_keys)


@dataclass(frozen=True)
class Partition:
    """Community id per node plus the partition's modularity."""

    membership: dict[int, int]
    modularity: float


def modularity(
    graph: MentionGraph, membership: dict[int, int], resolution: float = 1.0
) -> float:
    """Q = (1/2m) sum_ij [A_ij - resolution * k_i k_j / 2m] delta(c_i, c_j)."""
    m = sum(w for _, _, w in graph.edges)
    if m == 0.0:
        return 0.0
    degree: dict[int, float] = {n: 0.0 for n in graph.nodes}
    for i, j, w in graph.edges:
        degree[i] += w
        degree[j] += w
    intra = 0.0
    tot: dict[int, float] = {}
    for i, j, w in graph.edges:
        if membership[i] == membership[j]:
            intra += w
    for n in graph.nodes:
        tot[membership[n]] = tot.get(membership[n], 0.0) + degree[n]
    q = intra / m
    for s in tot.values():
        q -= resolution * (s / (2.0 * m)) ** 2
    return q


def _local_moving(
    adj: list[dict[int, float]],
    degrees: list[float],
    comm: list[int],
    m: float,
    resolution: float,
) -> bool:
    """One Louvain phase: greedily move nodes until no move improves Q.

    Nodes are visited in ascending id order. The gain of inserting an
    isolated node i into community C is w(i,C)/m - r*tot_C*k_i/(2m^2);
    the node goes to the strictly best community, or to an empty one when
    no insertion gain is positive. Returns whether any node moved.
    """
    n = len(adj)
    tot = [0.0] * n
    size = [0] * n
    for node in range(n):
        tot[comm[node]] += degrees[node]
        size[comm[node]] += 1
    moved_any = False
    while True:
        moved = False
        for node in range(n):
            old = comm[node]
            tot[old] -= degrees[node]
            size[old] -= 1
            weights: dict[int, float] = {}
            for nb, w in adj[node].items():
                weights[comm[nb]] = weights.get(comm[nb], 0.0) + w
            best_comm = -1  # -1 encodes "stay isolated"
            best_gain = 0.0
            scale = resolution * degrees[node] / (2.0 * m * m)
            for cand in sorted(weights):
                gain = weights[cand] / m - tot[cand] * scale
                if gain > best_gain + 1e-12:
                    best_gain = gain
                    best_comm = cand
            if best_comm == -1:
                if size[old] == 0:
                    best_comm = old
                else:
                    best_comm = next(c for c in range(n) if size[c] == 0)
            comm[node] = best_comm
            tot[best_comm] += degrees[node]
            size[best_comm] += 1
            if best_comm != old:
                moved = True
                moved_any = True
        if not moved:
            return moved_any


def _pair_refinement(
    adj: list[dict[int, float]],
    degrees: list[float],
    comm: list[int],
    m: float,
    resolution: float,
    max_nodes: int = 12,
) -> bool:
    """Kernighan-Lin style joint moves of node pairs, exact and greedy.

    Single-node moving gets stuck when an improvement needs two nodes to
    relocate together; on small levels (and aggregation makes most levels
    small) trying all pair moves is cheap and escapes those optima. The
    best strictly-improving joint move is applied until none remains.
    Skipped entirely above ``max_nodes``.
    """
    n = len(adj)
    if n > max_nodes or n < 2:
        return False
    tot: dict[int, float] = {}
    size: dict[int, int] = {}
    for x in range(n):
        tot[comm[x]] = tot.get(comm[x], 0.0) + degrees[x]
        size[comm[x]] = size.get(comm[x], 0) + 1

    def move_delta(x: int, target: int) -> float:
        a = comm[x]
        if target == a:
            return 0.0
        w_new = w_old = 0.0
        for nb, w in adj[x].items():
            if comm[nb] == target:
                w_new += w
            elif comm[nb] == a:
                w_old += w
        return (w_new - w_old) / m - resolution * degrees[x] * (
            tot.get(target, 0.0) - tot[a] + degrees[x]
        ) / (2.0 * m * m)

    def apply_move(x: int, target: int) -> int:
        a = comm[x]
        tot[a] -= degrees[x]
        size[a] -= 1
        comm[x] = target
        tot[target] = tot.get(target, 0.0) + degrees[x]
        size[target] = size.get(target, 0) + 1
        return a

    def free_slot() -> int | None:
        for c in range(n):
            if size.get(c, 0) == 0:
                return c
        return None

    improved_any = False
    while True:
        best_gain = 1e-12
        best_move: tuple[int, int, int, int] | None = None
        for i in range(n):
            fresh = free_slot()
            targets_i = sorted({comm[nb] for nb in adj[i]} - {comm[i]})
            if fresh is not None and size[comm[i]] > 1:
                targets_i.append(fresh)
            for ci in targets_i:
                d1 = move_delta(i, ci)
                old_i = apply_move(i, ci)
                for j in range(n):
                    if j == i:
                        continue
                    targets_j = {comm[nb] for nb in adj[j]} - {comm[j]}
                    targets_j.add(ci)
                    targets_j.discard(comm[j])
                    for cj in sorted(targets_j):
                        gain = d1 + move_delta(j, cj)
                        if gain > best_gain:
                            best_gain = gain
                            best_move = (i, ci, j, cj)
                apply_move(i, old_i)
        if best_move is None:
            return improved_any
        i, ci, j, cj = best_move
        apply_move(i, ci)
        apply_move(j, cj)
        improved_any = True


def _optimize_level(
    adj: list[dict[int, float]],
    degrees: list[float],
    comm: list[int],
    m: float,
    resolution: float,
) -> bool:
    """Alternate single-node and pair moves until neither improves."""
    changed = False
    while True:
        moved = _local_moving(adj, degrees, comm, m, resolution)
        paired = _pair_refinement(adj, degrees, comm, m, resolution)
        changed = changed or moved or paired
        if not paired:
            return changed


def _relabel_compact(comm: list[int]) -> list[int]:
    """Renumber community ids 0..k-1 in order of each community's first member."""
    mapping: dict[int, int] = {}
    out = []
    for c in comm:
        if c not in mapping:
            mapping[c] = len(mapping)
        out.append(mapping[c])
    return out


def _aggregate(
    adj: list[dict[int, float]], loops: list[float], comm: list[int]
) -> tuple[list[dict[int, float]], list[float]]:
    """Collapse each community into one super-node (intra weight as self-loop)."""
    k = max(comm) + 1
    new_adj: list[dict[int, float]] = [dict() for _ in range(k)]
    new_loops = [0.0] * k
    for i, l in enumerate(loops):
        new_loops[comm[i]] += l
    for i in range(len(adj)):
        ci = comm[i]
        for j, w in adj[i].items():
            if j < i:
                continue
            cj = comm[j]
            if ci == cj:
                new_loops[ci] += w
            else:
                a, b = min(ci, cj), max(ci, cj)
                new_adj[a][b] = new_adj[a].get(b, 0.0) + w
                new_adj[b][a] = new_adj[b].get(a, 0.0) + w
    return new_adj, new_loops


def louvain(
    graph: MentionGraph, resolution: float = 1.0, seed: int = 0
) -> Partition:
    """Two-phase Louvain with deterministic order and multilevel refinement.

    Upward pass: local moving from singletons, aggregate communities into
    super-nodes, repeat while anything merges. Downward pass: project the
    coarse partition back level by level and re-run local moving at each
    finer level, which lets individual nodes escape early greedy merges
    (multilevel refinement in the sense of Rotta and Noack, 2011). The
    V-cycle repeats until modularity stops improving. ``seed`` is accepted
    for interface stability; the algorithm is fully deterministic
    (ascending-id visiting order, smallest-community tie-breaks).
    """
    if not graph.nodes:
        raise ClusteringError("graph is empty")
    n = len(graph.nodes)
    index = {node: i for i, node in enumerate(graph.nodes)}
    m = sum(w for _, _, w in graph.edges)
    if m == 0.0:
        return Partition({node: i for i, node in enumerate(graph.nodes)}, 0.0)

    base_adj: list[dict[int, float]] = [dict() for _ in range(n)]
    for a, b, w in graph.edges:
        i, j = index[a], index[b]
        base_adj[i][j] = base_adj[i].get(j, 0.0) + w
        base_adj[j][i] = base_adj[j].get(i, 0.0) + w
    base_loops = [0.0] * n

    def degrees_of(adj: list[dict[int, float]], loops: list[float]) -> list[float]:
        return [sum(a.values()) + 2.0 * l for a, l in zip(adj, loops)]

    assign = list(range(n))  # level-0 node -> community, refined across cycles
    best_q = modularity(graph, {node: assign[index[node]] for node in graph.nodes}, resolution)
    while True:
        # upward pass, recording every level for the downward refinement
        levels: list[tuple[list[dict[int, float]], list[float], list[int]]] = []
        adj, loops = base_adj, base_loops
        comm = list(assign)
        while True:
            _optimize_level(adj, degrees_of(adj, loops), comm, m, resolution)
            comm = _relabel_compact(comm)
            levels.append((adj, loops, comm))
            if max(comm) + 1 == len(adj):
                break  # nothing merged at this level
            adj, loops = _aggregate(adj, loops, comm)
            comm = list(range(len(adj)))

        # downward pass: project and refine at each finer level
        top = list(range(max(levels[-1][2]) + 1))
        for adj_l, loops_l, comm_l in reversed(levels):
            proj = [top[comm_l[i]] for i in range(len(adj_l))]
            _optimize_level(adj_l, degrees_of(adj_l, loops_l), proj, m, resolution)
            top = proj
        assign = _relabel_compact(top)

        q = modularity(
            graph, {node: assign[index[node]] for node in graph.nodes}, resolution
        )
        if q <= best_q + 1e-12:
            break
        best_q = q

    final = {node: assign[index[node]] for node in graph.nodes}
    return Partition(final, modularity(graph, final, resolution))


@dataclass(frozen=True)
class OpenEntity:
    entity_id: str
    canonical_name: str
    members: list[int]


def canonicalize(
    partition: Partition, mentions: Sequence[Mention]
) -> list[OpenEntity]:
    """Name each community after its most frequent normalized surface.

    Frequency ties break toward the shortest string, then lexicographic.
    Entity ids are a stable hash of the sorted member surfaces, so equal
    clusters get equal ids across runs.
    """
    if set(partition.membership) != set(range(len(mentions))):
        raise ClusteringError("partition does not cover the mention list")
    groups: dict[int, list[int]] = {}
    for node, c in partition.membership.items():
        groups.setdefault(c, []).append(node)
    entities: list[OpenEntity] = []
    for c in sorted(groups, key=lambda c: min(groups[c])):
        members = sorted(groups[c])
        surfaces = [normalize_text(mentions[i].surface) for i in members]
        counts = Counter(surfaces)
        canonical = min(counts, key=lambda s: (-counts[s], len(s), s))
        digest = hashlib.sha256("\x1f".join(sorted(surfaces)).encode("utf-8"))
        entities.append(
            OpenEntity(
                entity_id="ow_" + digest.hexdigest()[:16],
                canonical_name=canonical,
                members=members,
            )
        )
    return entities

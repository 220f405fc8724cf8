"""Balanced k-way graph partitioning.

Multilevel recursive bisection: heavy-edge matching coarsens the graph,
greedy region growing seeds a bisection on the coarsest level, and
boundary Fiduccia-Mattheyses/Kernighan-Lin passes refine it on the way back
up.  Part sizes are exactly balanced (they differ by at most one node).
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data import GraphTopology


class PartitionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Partition:
    assignment: np.ndarray
    k: int
    cut: int
    sizes: tuple

    @classmethod
    def from_assignment(cls, topology: GraphTopology, assignment, k: int) -> "Partition":
        assignment = np.asarray(assignment, dtype=np.int64)
        sizes = tuple(int(c) for c in np.bincount(assignment, minlength=k))
        return cls(assignment, k, edge_cut(topology, assignment), sizes)

    def members(self, part: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == part)

    def is_balanced(self) -> bool:
        return max(self.sizes) - min(self.sizes) <= 1 and min(self.sizes) > 0


def edge_cut(topology: GraphTopology, assignment) -> int:
    assignment = np.asarray(assignment)
    if assignment.shape != (topology.num_nodes,):
        raise PartitionError("assignment must cover every node")
    if assignment.size and assignment.min() < 0:
        raise PartitionError("negative part index")
    if not topology.edges:
        return 0
    e = np.asarray(topology.edges)
    return int(np.count_nonzero(assignment[e[:, 0]] != assignment[e[:, 1]]))


# ---------------------------------------------------------------------------
# weighted working graph


class _WGraph:
    __slots__ = ("adj", "vw")

    def __init__(self, adj: list[dict], vw: list[int]):
        self.adj = adj
        self.vw = vw

    @property
    def n(self) -> int:
        return len(self.vw)

    @classmethod
    def from_topology(cls, topology: GraphTopology, nodes: Optional[np.ndarray] = None) -> "_WGraph":
        if nodes is None:
            nodes = np.arange(topology.num_nodes)
        local = {int(v): i for i, v in enumerate(nodes)}
        adj: list[dict] = [dict() for _ in nodes]
        for i, j in topology.edges:
            if i in local and j in local:
                a, b = local[i], local[j]
                adj[a][b] = adj[a].get(b, 0) + 1
                adj[b][a] = adj[b].get(a, 0) + 1
        return cls(adj, [1] * len(nodes))

    def cut(self, part) -> int:
        total = 0
        for u, nb in enumerate(self.adj):
            pu = part[u]
            for v, w in nb.items():
                if v > u and part[v] != pu:
                    total += w
        return total


def _heavy_edge_matching(g: _WGraph, rng: np.random.Generator, max_vw: int) -> list[int]:
    """Return ``match[u]`` (``u`` itself when unmatched)."""
    match = [-1] * g.n
    for u in rng.permutation(g.n).tolist():
        if match[u] != -1:
            continue
        best, best_w = u, 0
        for v in sorted(g.adj[u]):
            w = g.adj[u][v]
            if match[v] == -1 and v != u and w > best_w and g.vw[u] + g.vw[v] <= max_vw:
                best, best_w = v, w
        match[u] = best
        match[best] = u
    return match


def coarsen(g: _WGraph, rng: np.random.Generator, max_vw: int) -> tuple[_WGraph, list[int]]:
    """Contract a heavy-edge matching; returns the coarse graph and fine->coarse map."""
    match = _heavy_edge_matching(g, rng, max_vw)
    cmap = [-1] * g.n
    nc = 0
    for u in range(g.n):
        if cmap[u] == -1:
            cmap[u] = nc
            cmap[match[u]] = nc
            nc += 1
    vw = [0] * nc
    adj: list[dict] = [dict() for _ in range(nc)]
    for u in range(g.n):
        cu = cmap[u]
        vw[cu] += g.vw[u]
        for v, w in g.adj[u].items():
            cv = cmap[v]
            if cv != cu:
                adj[cu][cv] = adj[cu].get(cv, 0) + w
    return _WGraph(adj, vw), cmap


# ---------------------------------------------------------------------------
# bisection machinery


def _gains(g: _WGraph, part: list[int]) -> list[int]:
    out = [0] * g.n
    for u, nb in enumerate(g.adj):
        pu = part[u]
        s = 0
        for v, w in nb.items():
            s += w if part[v] != pu else -w
        out[u] = s
    return out


def _excess(w0: int, target: int, tol: int) -> int:
    return max(0, abs(w0 - target) - tol)


def _rebalance(g: _WGraph, part: list[int], target: int, tol: int) -> None:
    """Greedily move best-gain vertices off the heavy side until within tolerance."""
    w0 = sum(w for w, p in zip(g.vw, part) if p == 0)
    gains = _gains(g, part)
    while _excess(w0, target, tol) > 0:
        heavy = 0 if w0 > target else 1
        over = abs(w0 - target)
        best = None
        for u in range(g.n):
            if part[u] != heavy:
                continue
            # never overshoot past the target band on the other side
            if g.vw[u] > over + tol:
                continue
            key = (gains[u], -g.vw[u] if over > tol else 0, -u)
            if best is None or key > best[0]:
                best = (key, u)
        if best is None:
            return
        u = best[1]
        part[u] = 1 - heavy
        w0 += -g.vw[u] if heavy == 0 else g.vw[u]
        gains[u] = -gains[u]
        for v, w in g.adj[u].items():
            gains[v] += 2 * w if part[v] == heavy else -2 * w


def fm_pass(g: _WGraph, part: list[int], target: int, tol: int, max_stall: int = 64) -> int:
    """One boundary refinement pass, rolled back to its best prefix.

    Mutates ``part`` in place and returns the resulting cut.  The score of
    the final state is never worse than the starting state's
    ``(balance excess, cut)``, so a balanced input never gets a larger cut.
    """
    n = g.n
    cut = g.cut(part)
    w0 = sum(w for w, p in zip(g.vw, part) if p == 0)
    gains = _gains(g, part)
    window = tol + max(g.vw)
    heaps: list[list] = [[], []]
    for u in range(n):
        heapq.heappush(heaps[part[u]], (-gains[u], u))
    locked = [False] * n
    moves: list[int] = []
    best_score = (_excess(w0, target, tol), cut)
    best_len = 0
    stall = 0
    while True:
        cands = []
        for side in (0, 1):
            h = heaps[side]
            while h and (locked[h[0][1]] or -h[0][0] != gains[h[0][1]] or part[h[0][1]] != side):
                heapq.heappop(h)
            if not h:
                continue
            u = h[0][1]
            nw0 = w0 - g.vw[u] if side == 0 else w0 + g.vw[u]
            cur = abs(w0 - target)
            if abs(nw0 - target) <= window or abs(nw0 - target) < cur:
                cands.append((gains[u], -u, side))
        if not cands:
            break
        gain, neg_u, side = max(cands)
        u = -neg_u
        heapq.heappop(heaps[side])
        locked[u] = True
        part[u] = 1 - side
        w0 += -g.vw[u] if side == 0 else g.vw[u]
        cut -= gain
        gains[u] = -gain
        for v, w in g.adj[u].items():
            gains[v] += 2 * w if part[v] == side else -2 * w
            if not locked[v]:
                heapq.heappush(heaps[part[v]], (-gains[v], v))
        moves.append(u)
        score = (_excess(w0, target, tol), cut)
        if score < best_score:
            best_score, best_len, stall = score, len(moves), 0
        else:
            stall += 1
            if stall >= max_stall:
                break
    for u in moves[best_len:]:
        part[u] = 1 - part[u]
    return best_score[1]


def refine(g: _WGraph, part: list[int], target: int, tol: int, max_passes: int = 8,
           history: Optional[list] = None) -> int:
    _rebalance(g, part, target, tol)
    cut = g.cut(part)
    for _ in range(max_passes):
        new_cut = fm_pass(g, part, target, tol)
        if history is not None:
            history.append((cut, new_cut))
        if new_cut >= cut:
            cut = new_cut
            break
        cut = new_cut
    return cut


def _grow(g: _WGraph, target: int, tol: int, start: int) -> list[int]:
    """Greedy graph growing: absorb the frontier vertex that lowers the cut most."""
    part = [1] * g.n
    w0 = 0
    # cut reduction if u joined part 0
    gains = [-sum(g.adj[u].values()) for u in range(g.n)]
    heap: list = []

    def push(u):
        heapq.heappush(heap, (-gains[u], u))

    push(start)
    while w0 < target - tol or (w0 < target and heap):
        while heap and (part[heap[0][1]] == 0 or -heap[0][0] != gains[heap[0][1]]):
            heapq.heappop(heap)
        if not heap:
            rest = [u for u in range(g.n) if part[u] == 1]
            if not rest:
                break
            push(rest[0])
            continue
        _, u = heapq.heappop(heap)
        if w0 + g.vw[u] > target + tol:
            # too heavy to add; stop if already inside the band
            if w0 >= target - tol:
                break
            continue
        part[u] = 0
        w0 += g.vw[u]
        for v, w in g.adj[u].items():
            if part[v] == 1:
                gains[v] += 2 * w
                push(v)
    return part


def _initial_bisection(g: _WGraph, target: int, tol: int, rng: np.random.Generator, tries: int) -> list[int]:
    order = rng.permutation(g.n).tolist()[: max(1, min(tries, g.n))]
    best = None
    for s in order:
        part = _grow(g, target, tol, s)
        cut = refine(g, part, target, tol)
        w0 = sum(w for w, p in zip(g.vw, part) if p == 0)
        score = (_excess(w0, target, tol), cut)
        if best is None or score < best[0]:
            best = (score, part)
    return best[1]


def bisect(g: _WGraph, target: int, rng: np.random.Generator, coarsen_to: int, tries: int = 16) -> list[int]:
    """Split ``g`` into part 0 of weight exactly ``target`` (unit weights) and part 1."""
    levels: list[tuple[_WGraph, list[int]]] = []
    cur = g
    total = sum(g.vw)
    max_vw = max(1, int(math.ceil(1.5 * total / coarsen_to)))
    while cur.n > coarsen_to:
        coarse, cmap = coarsen(cur, rng, max_vw)
        if coarse.n > 0.95 * cur.n:
            break
        levels.append((cur, cmap))
        cur = coarse
    part = _initial_bisection(cur, target, _tol(cur, levels), rng, tries)
    for fine, cmap in reversed(levels):
        part = [part[c] for c in cmap]
        cur = fine
        refine(cur, part, target, 0 if cur is g else max(cur.vw))
    if not levels:
        refine(g, part, target, 0)
    return part


def _tol(g: _WGraph, levels) -> int:
    return max(g.vw) if levels else 0


# ---------------------------------------------------------------------------
# public API


def _target_sizes(n: int, k: int) -> list[int]:
    q, r = divmod(n, k)
    return [q + 1 if i < r else q for i in range(k)]


def partition_kway(topology: GraphTopology, k: int, seed: int = 0) -> Partition:
    """Balanced k-way partition minimizing edge cut (recursive multilevel bisection)."""
    n = topology.num_nodes
    if not 1 <= k <= n:
        raise PartitionError(f"k={k} out of range for {n} nodes")
    rng = np.random.Generator(np.random.Philox(int(seed)))
    assignment = np.zeros(n, dtype=np.int64)
    coarsen_to = max(4 * k, 64)

    def recurse(nodes: np.ndarray, first_part: int, sizes: list[int]):
        if len(sizes) == 1:
            assignment[nodes] = first_part
            return
        k1 = (len(sizes) + 1) // 2
        target = sum(sizes[:k1])
        g = _WGraph.from_topology(topology, nodes)
        part = np.asarray(bisect(g, target, rng, coarsen_to))
        recurse(nodes[part == 0], first_part, sizes[:k1])
        recurse(nodes[part == 1], first_part + k1, sizes[k1:])

    recurse(np.arange(n), 0, _target_sizes(n, k))
    return Partition.from_assignment(topology, assignment, k)


def brute_force_partition(topology: GraphTopology, k: int) -> Partition:
    """Exhaustive minimum-cut balanced partition (test oracle, <= 12 nodes)."""
    n = topology.num_nodes
    if n > 12:
        raise PartitionError("brute force limited to 12 nodes")
    if not 1 <= k <= n:
        raise PartitionError(f"k={k} out of range for {n} nodes")
    lo, hi = n // k, -(-n // k)
    n_big = n - lo * k  # parts of size hi
    nbrs = topology.neighbors()
    assign = [-1] * n
    counts = [0] * k
    best = [math.inf, None]

    def rec(u: int, used: int, cut: int):
        if cut >= best[0]:
            return
        if u == n:
            if sorted(counts) == sorted([hi] * n_big + [lo] * (k - n_big)):
                best[0], best[1] = cut, list(assign)
            return
        n_full = sum(c == hi for c in counts) if hi > lo else 0
        for p in range(min(used + 1, k)):
            if counts[p] >= hi:
                continue
            if hi > lo and counts[p] == lo and n_full >= n_big:
                continue
            add = sum(1 for v in nbrs[u] if v < u and assign[v] != p)
            assign[u] = p
            counts[p] += 1
            rec(u + 1, max(used, p + 1), cut + add)
            counts[p] -= 1
            assign[u] = -1

    rec(0, 0, 0)
    if best[1] is None:
        raise PartitionError("no balanced assignment exists")
    return Partition.from_assignment(topology, best[1], k)


# ---------------------------------------------------------------------------
# cache


def partition_path(dataset_dir, k: int) -> Path:
    return Path(dataset_dir) / f"partition.k{k}.json"


def save_partition(partition: Partition, dataset_dir) -> Path:
    path = partition_path(dataset_dir, partition.k)
    path.write_text(json.dumps(partition.assignment.tolist()) + "\n", encoding="utf-8")
    return path


def load_partition(topology: GraphTopology, dataset_dir, k: int) -> Optional[Partition]:
    path = partition_path(dataset_dir, k)
    if not path.is_file():
        return None
    assignment = json.loads(path.read_text(encoding="utf-8"))
    if len(assignment) != topology.num_nodes:
        raise PartitionError(f"{path} does not match the topology")
    return Partition.from_assignment(topology, assignment, k)


def cached_partition(topology: GraphTopology, k: int, dataset_dir=None, seed: int = 0) -> Partition:
    if dataset_dir is not None:
        cached = load_partition(topology, dataset_dir, k)
        if cached is not None:
            return cached
    part = partition_kway(topology, k, seed=seed)
    if dataset_dir is not None:
        save_partition(part, dataset_dir)
    return part

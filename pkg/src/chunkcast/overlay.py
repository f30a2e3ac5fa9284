"""Erdős–Rényi neighborhood graph over the peers and the source.

Node 0 is the source; nodes 1..n are peers.  The graph is undirected, has no
self-loops, and is immutable once generated.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field


@dataclass(frozen=True)
class Overlay:
    node_count: int
    adjacency: tuple[tuple[int, ...], ...]   # sorted neighbor ids per node
    warnings: tuple[str, ...] = field(default=())

    def degree(self, node: int) -> int:
        return len(self.adjacency[node])

    @property
    def edge_count(self) -> int:
        return sum(len(a) for a in self.adjacency) // 2


def generate_overlay(n: int, p_e: float | str, seed: int) -> Overlay:
    """G(n+1, p_e) over the source and n peers; "complete" gives the full mesh.

    Each unordered pair is an edge independently with probability p_e.  The
    same seed yields a bit-identical adjacency.  Isolated nodes or a
    disconnected graph produce warnings, never failures.
    """
    if n < 1:
        raise ValueError(f"need at least one peer, got n={n}")
    nodes = n + 1
    adj: list[list[int]] = [[] for _ in range(nodes)]
    if p_e == "complete":
        full = list(range(nodes))
        tup = tuple(tuple(v for v in full if v != u) for u in range(nodes))
        return Overlay(node_count=nodes, adjacency=tup, warnings=())

    pe = float(p_e)
    if not (0.0 <= pe <= 1.0):
        raise ValueError(f"edge probability must be in [0, 1], got {pe}")
    rng = random.Random(seed)
    rnd = rng.random
    for u in range(nodes):
        for v in range(u + 1, nodes):
            if rnd() < pe:
                adj[u].append(v)
                adj[v].append(u)

    warnings = []
    isolated = [u for u in range(nodes) if not adj[u]]
    if isolated:
        warnings.append(f"{len(isolated)} isolated node(s), e.g. node {isolated[0]}")
    if not _connected(adj):
        warnings.append("overlay is disconnected")
    return Overlay(
        node_count=nodes,
        adjacency=tuple(tuple(sorted(a)) for a in adj),
        warnings=tuple(warnings),
    )


def neighbors(o: Overlay, node: int) -> tuple[int, ...]:
    """Sorted, stable neighbor list of ``node``."""
    return o.adjacency[node]


def _connected(adj: list[list[int]]) -> bool:
    nodes = len(adj)
    seen = bytearray(nodes)
    stack = [0]
    seen[0] = 1
    count = 1
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = 1
                count += 1
                stack.append(v)
    return count == nodes


def dump_overlay(o: Overlay, path) -> None:
    """Write the edge list as one "u v" pair per line (decimal node ids)."""
    with open(path, "w") as fh:
        for u in range(o.node_count):
            for v in o.adjacency[u]:
                if u < v:
                    fh.write(f"{u} {v}\n")


def load_overlay(path, node_count: int) -> Overlay:
    """Rebuild an overlay from an edge-list file; isolated nodes need node_count."""
    adj: list[list[int]] = [[] for _ in range(node_count)]
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            u, v = (int(x) for x in line.split())
            adj[u].append(v)
            adj[v].append(u)
    return Overlay(
        node_count=node_count,
        adjacency=tuple(tuple(sorted(a)) for a in adj),
        warnings=(),
    )

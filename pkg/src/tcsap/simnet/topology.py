"""Unit-disk connectivity and the graph searches used for delivery."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Topology:
    """Node ``i`` sits at ``positions[i]``; ``ids[i]`` is its identity.

    ``active`` marks radios that are switched on; switched-off nodes neither
    receive nor relay.
    """

    positions: np.ndarray
    radio_range: float
    area: tuple[float, float] = (1000.0, 1000.0)
    ids: list[int] = field(default_factory=list)
    active: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        n = len(self.positions)
        if not self.ids:
            self.ids = list(range(n))
        if self.active is None:
            self.active = np.ones(n, dtype=bool)
        self.refresh()

    def __len__(self) -> int:
        return len(self.positions)

    def refresh(self) -> None:
        diff = self.positions[:, None, :] - self.positions[None, :, :]
        dist2 = np.einsum("ijk,ijk->ij", diff, diff)
        adj = dist2 <= self.radio_range ** 2
        np.fill_diagonal(adj, False)
        adj &= self.active[:, None] & self.active[None, :]
        self.adjacency = adj
        order = np.argsort(np.asarray(self.ids), kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        # neighbor lists sorted by identity so every search is deterministic
        self._neighbors = [
            sorted(np.flatnonzero(adj[i]).tolist(), key=lambda j: rank[j]) for i in range(len(adj))
        ]

    def neighbors(self, i: int) -> list[int]:
        return self._neighbors[i]

    def linked(self, i: int, j: int) -> bool:
        return bool(self.adjacency[i, j])

    def set_active(self, i: int, on: bool) -> None:
        if bool(self.active[i]) != on:
            self.active[i] = on
            self.refresh()

    def components(self) -> list[list[int]]:
        seen: set[int] = set()
        out = []
        for s in range(len(self)):
            if s in seen or not self.active[s]:
                continue
            comp = sorted(bfs_depths(self, s, len(self)))
            seen.update(comp)
            out.append(comp)
        return out


def bfs_depths(topo: Topology, src: int, limit: int) -> dict[int, int]:
    depth = {src: 0}
    queue = deque([src])
    while queue:
        u = queue.popleft()
        if depth[u] >= limit:
            continue
        for v in topo.neighbors(u):
            if v not in depth:
                depth[v] = depth[u] + 1
                queue.append(v)
    return depth


def flood_tree(topo: Topology, src: int, hop_limit: int) -> tuple[dict[int, int], dict[int, list[int]]]:
    """BFS ball of radius ``hop_limit`` around ``src``.

    Returns (depth of every reached node, children of every relay).  Each node
    hangs off the first neighbor that reached it, so it is delivered exactly
    once.
    """
    depth = {src: 0}
    children: dict[int, list[int]] = {}
    queue = deque([src])
    while queue:
        u = queue.popleft()
        if depth[u] >= hop_limit:
            continue
        for v in topo.neighbors(u):
            if v not in depth:
                depth[v] = depth[u] + 1
                children.setdefault(u, []).append(v)
                queue.append(v)
    return depth, children


def next_hop(topo: Topology, src: int, dst: int) -> int | None:
    """First hop on a shortest path, ties broken by lowest identity."""
    if src == dst:
        return dst
    parent = {dst: dst}
    queue = deque([dst])
    # search backwards from the destination so the first hop is read directly
    while queue:
        u = queue.popleft()
        for v in topo.neighbors(u):
            if v not in parent:
                parent[v] = u
                if v == src:
                    return u
                queue.append(v)
    return None

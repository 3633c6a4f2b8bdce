"""Measurements extracted from a finished run."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field


@dataclass(frozen=True)
class JoinRecord:
    node: int
    first_discovery: float
    cert_at: float
    configured_at: float
    overhead: int

    @property
    def latency(self) -> float:
        return self.cert_at - self.first_discovery


@dataclass(frozen=True)
class NodeSummary:
    identity: int
    role: str
    state: str
    ip: str | None
    network_pk: int | None
    rat: tuple[tuple[str, int], ...] = ()


@dataclass
class Metrics:
    init_delay: float | None = None
    joins: list[JoinRecord] = field(default_factory=list)
    failed_joins: list[int] = field(default_factory=list)
    control_msg_count: int = 0
    by_kind: Counter = field(default_factory=Counter)
    retry_count: int = 0
    notes: Counter = field(default_factory=Counter)
    nodes: dict[int, NodeSummary] = field(default_factory=dict)

    @property
    def latencies(self) -> list[float]:
        return [j.latency for j in self.joins]

    @property
    def mean_config_latency(self) -> float:
        lat = self.latencies
        return sum(lat) / len(lat) if lat else math.nan

    @property
    def mean_join_overhead(self) -> float:
        return sum(j.overhead for j in self.joins) / len(self.joins) if self.joins else math.nan

    def networks(self, honest_only: bool = True) -> dict[int, list[int]]:
        """Configured nodes grouped by the network key they hold."""
        out: dict[int, list[int]] = {}
        for s in self.nodes.values():
            if s.state == "Configured" and s.network_pk is not None and (s.role == "honest" or not honest_only):
                out.setdefault(s.network_pk, []).append(s.identity)
        return {k: sorted(v) for k, v in out.items()}


def collect(notes, deliveries_about: Counter, started: dict[int, float], roles: dict[int, str]) -> tuple:
    """Turn the note stream into (init_delay, joins, failed_joins, retries).

    ``notes`` is a time-ordered list of (time, node, event, data).
    """
    first_discovery: dict[int, float] = {}
    last_cert: dict[int, float] = {}
    joins: dict[int, JoinRecord] = {}
    founders_done: dict[tuple, list[float]] = {}
    init_starts: dict[tuple, list[float]] = {}
    aborts: dict[tuple, list[float]] = {}
    configured: set[int] = set()
    retries = 0
    for t, node, event, data in notes:
        if event == "discovery_request":
            first_discovery.setdefault(node, t)
        elif event == "cert_received":
            last_cert[node] = t
        elif event in ("retry", "conflict_lost"):
            retries += 1
        elif event == "init_start":
            init_starts.setdefault(tuple(data["founders"]), []).append(t)
        elif event == "init_aborted":
            aborts.setdefault(tuple(data.get("founders", ())), []).append(t)
        elif event == "configured":
            configured.add(node)
            if data.get("how") == "founder":
                founders_done.setdefault(tuple(data["founders"]), []).append(t)
            elif data.get("how") == "join" and node not in joins and node in first_discovery and node in last_cert:
                joins[node] = JoinRecord(node, first_discovery[node], last_cert[node], t, deliveries_about.get(node, 0))

    init_delay = None
    finished = [(max(ts), g) for g, ts in founders_done.items() if len(ts) >= len(g)]
    if finished:
        done_at, group = min(finished)
        first_done = min(founders_done[group])
        stale = [a for a in aborts.get(group, []) if a <= first_done]
        cutoff = max(stale) if stale else -math.inf
        starts = [s for s in init_starts.get(group, []) if cutoff < s <= first_done]
        if starts:
            init_delay = done_at - min(starts)

    failed = sorted(n for n in started if roles.get(n) == "honest" and n not in configured)
    return init_delay, sorted(joins.values(), key=lambda j: (j.first_discovery, j.node)), failed, retries

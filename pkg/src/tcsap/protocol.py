"""Pure decision functions used by the node state machine.

These carry no timers or I/O so they can be tested against hand-computed
oracles: founding-set intersection, network parameter derivation, founder
self-assignment, coalition selection and state reconciliation.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .addressing import (
    SUBNET_SPACE,
    SUBPREFIX_SPACE,
    AllocationState,
    BlockLayout,
    PendingEntry,
    RegisteredEntry,
    SiteLocalAddress,
    compose_address,
)


class TooManyFounders(ValueError):
    pass


class MissingContribution(Exception):
    pass


class InsufficientAgreement(Exception):
    pass


class NoCommonFreeHostId(Exception):
    pass


@dataclass(frozen=True)
class FoundingSet:
    members: tuple[int, ...]

    @property
    def lowest(self) -> int:
        return self.members[0]

    def __contains__(self, identity: int) -> bool:
        return identity in self.members

    def __len__(self) -> int:
        return len(self.members)


def compute_founding_set(own_id: int, views: Mapping[int, Iterable[int]], k: int) -> FoundingSet | None:
    """Intersect the neighbor lists of every node in ``views``.

    ``views`` maps each node of H (the requester and each neighbor that
    answered) to its advertised closed neighbor list.  Only nodes whose list
    was actually received can be founders.  Returns ``None`` when fewer than
    ``k`` nodes survive the intersection.
    """
    if own_id not in views:
        raise ValueError("the requester's own view is required")
    common = set(views)
    for members in views.values():
        common &= set(members)
    if len(common) < k or own_id not in common:
        return None
    return FoundingSet(tuple(sorted(common)))


def derive_network_params(
    contributions: Sequence[tuple[int, int] | None] | Mapping[int, tuple[int, int] | None],
    expected: int | None = None,
) -> tuple[int, int]:
    values = list(contributions.values()) if isinstance(contributions, Mapping) else list(contributions)
    if any(v is None for v in values) or (expected is not None and len(values) < expected):
        raise MissingContribution(f"{sum(v is not None for v in values)} of {expected or len(values)} contributions")
    subprefix = sum(x for x, _ in values) % SUBPREFIX_SPACE
    subnet = sum(y for _, y in values) % SUBNET_SPACE
    return subprefix, subnet


def founding_self_assign(
    founding: FoundingSet | Iterable[int], layout: BlockLayout, subprefix: int, subnet: int
) -> dict[int, SiteLocalAddress]:
    members = sorted(founding.members if isinstance(founding, FoundingSet) else founding)
    if len(members) > layout.m_blocks:
        raise TooManyFounders(f"{len(members)} founders for {layout.m_blocks} blocks")
    return {m: compose_address(subprefix, subnet, layout.base(i)) for i, m in enumerate(members)}


@dataclass(frozen=True)
class ServerReply:
    server: int
    hops: int
    network_pk: int
    commitments: tuple[int, ...]
    subprefix: int
    active_subnet: int
    fat: tuple[int, ...]
    ip: SiteLocalAddress


def agreeing_replies(replies: Iterable[ServerReply], k: int) -> list[ServerReply]:
    """Keep only replies carrying the CA key that at least ``k`` responders share."""
    replies = list(replies)
    counts = Counter(r.network_pk for r in replies)
    if not counts:
        raise InsufficientAgreement("no replies")
    key, n = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if n < k:
        raise InsufficientAgreement(f"best CA key has {n} responders, need {k}")
    return [r for r in replies if r.network_pk == key]


def select_coalition(replies: Iterable[ServerReply], k: int, exclude: Iterable[int] = ()) -> list[ServerReply]:
    excluded = set(exclude)
    pool = [r for r in agreeing_replies(replies, k) if r.server not in excluded]
    if len(pool) < k:
        raise InsufficientAgreement(f"{len(pool)} usable servers, need {k}")
    return sorted(pool, key=lambda r: (r.hops, r.server))[:k]


def choose_free_host(
    coalition: Sequence[ServerReply],
    layout: BlockLayout,
    rng,
    forced_block: int | None = None,
) -> tuple[int, int]:
    """A Host-ID every coalition member considers free: per block, the highest
    of the members' lowest-free values.  The block is drawn by ``rng``."""
    viable = {}
    for b in range(layout.m_blocks):
        host = max(r.fat[b] for r in coalition)
        if host < layout.bound(b):
            viable[b] = host
    if not viable:
        raise NoCommonFreeHostId("every block is exhausted in some member's view")
    if forced_block is not None and forced_block in viable:
        return forced_block, viable[forced_block]
    blocks = sorted(viable)
    b = blocks[rng.randrange(len(blocks))]
    return b, viable[b]


@dataclass(frozen=True)
class StateSnapshot:
    subprefix: int
    subnets: tuple[int, ...]
    fat: tuple[tuple[int, int, int], ...]
    pat: tuple[tuple[SiteLocalAddress, int, float], ...]
    rat: tuple[tuple[SiteLocalAddress, RegisteredEntry], ...]
    rc: tuple[tuple[int, int], ...]
    bl: tuple[int, ...]


def snapshot_of(alloc: AllocationState, blacklist: Iterable[int] = ()) -> StateSnapshot:
    return StateSnapshot(
        alloc.subprefix,
        tuple(alloc.subnets),
        tuple(sorted((s, b, v) for (s, b), v in alloc.fat.items())),
        tuple(sorted((a, p.requester, p.assigned_at) for a, p in alloc.pat.items())),
        tuple(sorted(alloc.rat.items(), key=lambda kv: kv[0])),
        tuple(sorted(alloc.rc.items())),
        tuple(sorted(blacklist)),
    )


def _vote(values: list, prefer=max):
    counts = Counter(values)
    best = max(counts.values())
    return prefer(v for v, c in counts.items() if c == best)


def merge_snapshots(
    snapshots: Sequence[StateSnapshot], layout: BlockLayout, pending_ttl: float
) -> tuple[AllocationState, set[int]]:
    """Reconcile redundant copies entry by entry: an entry is kept when a strict
    majority of snapshots hold it, and takes its most common value (ties go to
    the larger, which for FAT entries is the safe side)."""
    if not snapshots:
        raise ValueError("nothing to merge")
    n = len(snapshots)
    majority = n // 2 + 1
    subnets = _vote([s.subnets for s in snapshots], prefer=lambda vs: max(vs, key=lambda t: (len(t), t)))
    alloc = AllocationState(
        layout=layout,
        subprefix=_vote([s.subprefix for s in snapshots]),
        pending_ttl=pending_ttl,
    )
    for sn in subnets:
        alloc.add_subnet(sn)

    def table(rows_of):
        grouped: dict = {}
        for s in snapshots:
            for key, value in rows_of(s):
                grouped.setdefault(key, []).append(value)
        return grouped

    for (sn, b), vals in table(lambda s: (((sn, b), v) for sn, b, v in s.fat)).items():
        alloc.fat[(sn, b)] = max(_vote(vals), alloc.fat.get((sn, b), 0))
    rat = table(lambda s: s.rat)
    for addr, vals in rat.items():
        if len(vals) >= majority:
            alloc.rat[addr] = _vote(vals, prefer=lambda vs: min(vs, key=lambda e: e.identity))
    for addr, vals in table(lambda s: ((a, (r, t)) for a, r, t in s.pat)).items():
        if len(vals) >= majority and addr not in alloc.rat:
            r, t = _vote(vals, prefer=min)
            alloc.pat[addr] = PendingEntry(r, t)
    for addr in list(alloc.pat) + list(alloc.rat):
        key = (addr.subnet, layout.block_of(addr.host_id))
        alloc.fat[key] = max(alloc.fat.get(key, 0), addr.host_id + 1)
    for ident, vals in table(lambda s: s.rc).items():
        alloc.rc[ident] = _vote(vals)
    bl = {i for i, vals in table(lambda s: ((b, True) for b in s.bl)).items() if len(vals) >= majority}
    return alloc, bl

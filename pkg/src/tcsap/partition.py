"""Network partitioning and merging over sets of node machines.

Both operations are driven from outside the event loop: the simulator (or a
test) hands over the connectivity components it computed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from . import dpki
from .addressing import SUBNET_SPACE, AllocationState, PendingEntry, SiteLocalAddress
from .messages import encode_value
from .node import NodeMachine, NodeState
from .protocol import StateSnapshot, derive_network_params, snapshot_of


@dataclass(frozen=True)
class PartitionId:
    lowest_ip: SiteLocalAddress
    prefix: int
    subnets: tuple[int, ...]
    network_pk: int


def _configured(machines: Iterable[NodeMachine]) -> list[NodeMachine]:
    return [m for m in machines if m.state is NodeState.CONFIGURED and m.address is not None and m.alloc]


def partition_id(machines: Iterable[NodeMachine]) -> PartitionId | None:
    live = _configured(machines)
    if not live:
        return None
    low = min(live, key=lambda m: m.address)
    return PartitionId(low.address, low.alloc.subprefix, tuple(low.alloc.subnets), low.network_pk)


def partition_split(
    nodes: Mapping[int, NodeMachine],
    components: Sequence[Iterable[int]],
    rng,
    k: int | None = None,
) -> list[PartitionId | None]:
    """Assign identifiers to the components left after a split.

    The component holding the lowest address in use keeps the old identifier.
    Every other qualifying component agrees on a fresh subnet, built like the
    founding one from the contributions of ``k`` randomly chosen members, and
    allocates from it only.  Components with fewer than ``k`` configured nodes
    lose service and get ``None``.
    """
    groups = [_configured(nodes[i] for i in sorted(c) if i in nodes) for c in components]
    everyone = [m for g in groups for m in g]
    if not everyone:
        return [None] * len(groups)
    k = k or everyone[0].k
    lowest = min(everyone, key=lambda m: m.address).address
    result: list[PartitionId | None] = []
    for members in groups:
        if len(members) < k:
            for m in members:
                m.service = False
            result.append(None)
            continue
        for m in members:
            m.service = True
        if any(m.address == lowest for m in members):
            result.append(partition_id(members))
            continue
        taken = set(members[0].alloc.subnets)
        chosen = rng.sample(members, k)
        contribs = [(0, m.rng.randrange(SUBNET_SPACE)) for m in chosen]
        _, subnet = derive_network_params(contribs)
        while subnet in taken:
            contribs.append((0, chosen[len(contribs) % k].rng.randrange(SUBNET_SPACE)))
            _, subnet = derive_network_params(contribs)
        for m in members:
            m.alloc.add_subnet(subnet)
            # make sure the new subnet is the active one even if it was known
            m.alloc.subnets.remove(subnet)
            m.alloc.subnets.append(subnet)
        result.append(partition_id(members))
    return result


@dataclass(frozen=True)
class SignedState:
    origin: int
    snapshot: StateSnapshot
    signature: dpki.ThresholdSignature


def state_message(snapshot: StateSnapshot) -> bytes:
    return dpki.encode_fields(b"partition-state", encode_value(snapshot))


def sign_partition_state(members: Sequence[NodeMachine]) -> SignedState:
    """The lowest-addressed member's state, countersigned by ``k`` members."""
    live = _configured(members)
    origin = min(live, key=lambda m: m.address)
    k = origin.k
    if len(live) < k:
        raise dpki.InsufficientShares(f"{len(live)} configured members, {k} required")
    snap = snapshot_of(origin.alloc, origin.revocation.bl)
    msg = state_message(snap)
    signers = sorted(live, key=lambda m: m.address)[:k]
    partials = [dpki.partial_sign(msg, m.share) for m in signers]
    return SignedState(origin.identity, snap, dpki.combine(partials, k, origin.group))


def union_state(alloc: AllocationState, snap: StateSnapshot) -> None:
    """Fold another partition's tables into ``alloc``; nothing is cleaned up."""
    if snap.subprefix != alloc.subprefix:
        return
    active = alloc.active_subnet
    for sn in snap.subnets:
        alloc.add_subnet(sn)
    alloc.subnets.remove(active)
    alloc.subnets.append(active)
    for sn, b, v in snap.fat:
        alloc.fat[(sn, b)] = max(alloc.fat.get((sn, b), 0), v)
    for addr, entry in snap.rat:
        if addr not in alloc.rat:
            alloc.rat[addr] = entry
            alloc.pat.pop(addr, None)
    for addr, requester, t in snap.pat:
        if addr not in alloc.rat and addr not in alloc.pat:
            alloc.pat[addr] = PendingEntry(requester, t)
    for ident, count in snap.rc:
        alloc.rc[ident] = max(alloc.rc.get(ident, 0), count)


def partition_merge(
    partitions: Sequence[Sequence[NodeMachine]],
    broadcasts: Sequence[SignedState] | None = None,
) -> int:
    """Every node applies each verified partition state it did not originate.

    ``broadcasts`` defaults to one honestly signed state per partition; tests
    pass forged ones.  Returns the number of (node, state) applications.
    """
    if broadcasts is None:
        broadcasts = [sign_partition_state(p) for p in partitions if len(_configured(p)) >= p[0].k]
    applied = 0
    for members in partitions:
        for m in _configured(members):
            for st in broadcasts:
                if st.origin == m.identity:
                    continue
                if not dpki.verify_threshold(st.signature, state_message(st.snapshot), m.network_pk, m.group):
                    continue
                union_state(m.alloc, st.snapshot)
                m.revocation.bl |= set(st.snapshot.bl)
                m.service = True
                applied += 1
    return applied
